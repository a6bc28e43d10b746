"""Golden-file and invariant checks runnable from an installed package.

Each check returns ``(ok, detail)``; output is deterministic (no timings).
Golden matrices live in ``orthotrain/golden`` and are regenerated with
``python -m orthotrain.selftest --regenerate`` after an intended change.
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff, energy, linalg, ortho
from .config import dump_config, parse_config
from .data import load_mnist_idx, write_idx
from .train import ModelSpec, TrainConfig, forward, init_model, predict_logits
from .train.loop import MomentumSGD, prepare_sopt, sopt_round, batch_stream
from .train.specs import SOptConfig

GOLDEN_DIR = Path(__file__).parent / "golden"


def _fixed_input(n=6, seed=7):
    return linalg.rand_gaussian(n, n, 0.0, 1.0, linalg.RngState(seed))


def golden_values():
    """The matrices pinned by golden files, computed by the current code."""
    u = _fixed_input()
    return {
        "rng_gaussian_3x4_seed42": linalg.rand_gaussian(3, 4, 0.0, 1.0, linalg.RngState(42)),
        "rng_orthogonal_4_seed1": linalg.rand_orthogonal(4, linalg.RngState(1)),
        "gs_6x6": ortho.gram_schmidt(u),
        "mgs_6x6": ortho.gram_schmidt(u, "modified"),
        "igs2_6x6": ortho.iterative_gram_schmidt(u, 2),
        "hr_6x6": ortho.householder_orthogonalize(u),
        "ls_6x6": ortho.lowdin(u),
        "cp_6x6": ortho.cayley(0.1 * u),
    }


def regenerate():
    for name, value in golden_values().items():
        linalg.write_matrix(GOLDEN_DIR / f"{name}.txt", value)


def check_golden():
    bad = []
    for name, value in golden_values().items():
        ref = linalg.read_matrix(GOLDEN_DIR / f"{name}.txt")
        tol = 0.0 if name.startswith("rng_gaussian") else 1e-12
        if ref.shape != value.shape or np.max(np.abs(ref - value)) > tol:
            bad.append(name)
    return not bad, "mismatch: " + ", ".join(bad) if bad else f"{len(golden_values())} files"


def check_orthogonality():
    rng = linalg.RngState(11)
    worst = 0.0
    for _ in range(5):
        u = linalg.rand_gaussian(16, 16, 0.0, 1.0, rng)
        for r in (ortho.gram_schmidt(u), ortho.gram_schmidt(u, "modified"), ortho.iterative_gram_schmidt(u),
                  ortho.householder_orthogonalize(u), ortho.lowdin(u), ortho.cayley(u)):
            worst = max(worst, linalg.ortho_residual(r))
    return worst <= 1e-10, f"max residual {worst:.1e}"


def check_cayley_det():
    r = ortho.cayley(linalg.rand_gaussian(8, 8, 0.0, 1.0, linalg.RngState(5)))
    dev = abs(linalg.det(r) - 1.0)
    return dev <= 1e-10, f"|det - 1| = {dev:.1e}"


def check_antipodal_energy():
    value = energy.hyperspherical_energy(np.array([[1.0, 0.0], [-1.0, 0.0]]), 1.0)
    return abs(value - 1.0) <= 1e-12, f"E = {value!r}"


def check_energy_invariance():
    rng = linalg.RngState(3)
    v = linalg.rand_gaussian(20, 8, 0.0, 1.0, rng)
    dev = energy.energy_invariance_check(v, linalg.rand_orthogonal(8, rng), 1.0)
    return dev <= 1e-10, f"relative change {dev:.1e}"


def check_subset_invariance():
    rng = linalg.RngState(4)
    v = linalg.rand_gaussian(32, 16, 0.0, 1.0, rng)
    dims = rng.permutation_subset(16, 4)
    dev = energy.subset_invariance_check(v, dims, linalg.rand_orthogonal(4, rng), 1.0)
    return dev <= 1e-9, f"relative change {dev:.1e}"


def check_gradients():
    rng = linalg.RngState(9)
    c = linalg.rand_gaussian(5, 5, 0.0, 1.0, rng)
    worst = 0.0
    for method in ("gs", "igs", "mgs", "hr", "cp"):
        spec = ortho.OrthoSpec(method=method)

        def f(tape, x, spec=spec):
            return tape.sum(tape.hadamard(ortho.orthogonal_node(tape, spec, x), tape.constant(c)))

        worst = max(worst, autodiff.grad_check(f, linalg.rand_gaussian(5, 5, 0.0, 1.0, rng)))
    return worst <= 1e-5, f"max relative error {worst:.1e}"


def check_idx_roundtrip():
    images = (np.arange(2 * 3 * 4) % 256).astype(np.uint8).reshape(2, 3, 4)
    labels = np.array([7, 2], dtype=np.uint8)
    with tempfile.TemporaryDirectory() as tmp:
        write_idx(Path(tmp) / "img.gz", images)
        write_idx(Path(tmp) / "lab", labels)
        x, y = load_mnist_idx(Path(tmp) / "img.gz", Path(tmp) / "lab")
    ok = np.array_equal(x, images.reshape(2, -1) / 255.0) and list(y) == [7, 2]
    return ok, "bit-exact" if ok else "mismatch"


def check_config_roundtrip():
    cfg = TrainConfig(model=ModelSpec(dims=(8, 6, 3), ortho=ortho.OrthoSpec(method="cp")), sopt=SOptConfig(p=2))
    ok = parse_config(dump_config(cfg)) == cfg
    return ok, "identical" if ok else "differs"


def check_inference_equivalence():
    spec = ModelSpec(dims=(8, 6, 6, 3), ortho=ortho.OrthoSpec(method="gs"))
    model = init_model(spec, linalg.RngState(2))
    x = linalg.rand_gaussian(10, 8, 0.0, 1.0, linalg.RngState(6))
    graph = forward(model, x)
    dev = float(np.max(np.abs(graph.tape.value(graph.output) - predict_logits(model, x))))
    return dev <= 1e-10, f"max deviation {dev:.1e}"


def check_sopt_fold():
    spec = ModelSpec(dims=(4, 16, 16, 2), ortho=ortho.OrthoSpec(method="gs"))
    model = prepare_sopt(init_model(spec, linalg.RngState(8)), SOptConfig(p=4))
    rng = linalg.RngState(12)
    x = linalg.rand_gaussian(40, 4, 0.0, 1.0, rng)
    y = (x[:, 0] > 0).astype(np.int64)
    stream = batch_stream(x, y, 10, rng.spawn(1))
    opt = MomentumSGD(0.1, 0.9)
    worst = max(max(sopt_round(model, SOptConfig(p=4), 3, opt, stream, rng)) for _ in range(3))
    return worst <= 1e-9, f"max fold deviation {worst:.1e}"


CHECKS = [
    ("golden_files", check_golden),
    ("orthogonality", check_orthogonality),
    ("cayley_det", check_cayley_det),
    ("antipodal_energy", check_antipodal_energy),
    ("energy_invariance", check_energy_invariance),
    ("subset_invariance", check_subset_invariance),
    ("gradients", check_gradients),
    ("idx_roundtrip", check_idx_roundtrip),
    ("config_roundtrip", check_config_roundtrip),
    ("inference_equivalence", check_inference_equivalence),
    ("sopt_fold", check_sopt_fold),
]


def run_selftest(out=None):
    """Run every check, print one line each; returns True iff all pass."""
    out = out or sys.stdout
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=out)
    print(f"selftest {'passed' if all_ok else 'FAILED'}: {len(CHECKS)} checks", file=out)
    return all_ok


if __name__ == "__main__":
    if "--regenerate" in sys.argv:
        regenerate()
    sys.exit(0 if run_selftest() else 1)
