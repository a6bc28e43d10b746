"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the MNIST comparison
takes roughly a quarter of an hour on one core.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from orthotrain import energy, linalg, ortho
from orthotrain.autodiff import grad_check
from orthotrain.data import load_mnist, synth_dataset
from orthotrain.train import (
    ModelSpec,
    MomentumSGD,
    OptimizerConfig,
    SOptConfig,
    TrainConfig,
    batch_stream,
    forward,
    init_model,
    layer_energies,
    parameter_counts,
    predict_logits,
    prepare_sopt,
    sopt_round,
    train_run,
)

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return emit


def rel_drift(records):
    e0 = records[0].per_layer_energy
    return max(abs(e - b) / b for r in records for e, b in zip(r.per_layer_energy, e0))


def test_c01_orthogonality_suite(report):
    start = time.perf_counter()
    producers = {
        "GS": ortho.gram_schmidt,
        "MGS": lambda u: ortho.gram_schmidt(u, "modified"),
        "IGS(2)": lambda u: ortho.iterative_gram_schmidt(u, 2),
        "HR": ortho.householder_orthogonalize,
        "LS": ortho.lowdin,
        "CP": ortho.cayley,
    }
    worst = dict.fromkeys(producers, 0.0)
    det_dev = 0.0
    rng = linalg.RngState(1)
    for _ in range(100):
        u = linalg.rand_gaussian(64, 64, 0.0, 1.0, rng)
        for name, fn in producers.items():
            r = fn(u)
            worst[name] = max(worst[name], linalg.ortho_residual(r))
            if name == "CP":
                det_dev = max(det_dev, abs(linalg.det(r) - 1.0))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and det_dev <= 1e-10 and elapsed <= 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"max residual {detail}; CP |det-1| {det_dev:.1e}; {elapsed:.1f}s")


def test_c02_energy_invariance_during_training(report):
    data = synth_dataset("blobs", 2000, 1.0, linalg.RngState(0), features=32, classes=4)
    drifts, times = {}, {}
    for method in ("gs", "cp", "ogd", None):
        spec = ModelSpec(dims=(32, 32, 32, 4), ortho=None if method is None else ortho.OrthoSpec(method=method))
        cfg = TrainConfig(model=spec, optimizer=OptimizerConfig(lr=0.05, momentum=0.9), batch=100,
                          iterations=2000, eval_every=100, seed=0)
        start = time.perf_counter()
        drifts[method or "baseline"] = rel_drift(train_run(cfg, dataset=data).records)
        times[method or "baseline"] = time.perf_counter() - start
    ok = (max(drifts[m] for m in ("gs", "cp", "ogd")) <= 1e-6 and drifts["baseline"] > 1e-2
          and max(times.values()) <= 300)
    detail = ", ".join(f"{k} {v:.1e} ({times[k]:.0f}s)" for k, v in drifts.items())
    report(2, ok, f"max relative energy drift {detail}")


def test_c03_subset_rotation_invariance(report):
    rng = linalg.RngState(3)
    worst = 0.0
    for trial in range(100):
        p = (1, 4, 8, 16)[trial % 4]
        v = linalg.rand_gaussian(32, 16, 0.0, 1.0, rng)
        dims = rng.permutation_subset(16, p)
        worst = max(worst, energy.subset_invariance_check(v, dims, linalg.rand_orthogonal(p, rng)))
    spec = ModelSpec(dims=(8, 16, 16, 2), ortho=ortho.OrthoSpec(method="gs"))
    model = prepare_sopt(init_model(spec, linalg.RngState(4)), SOptConfig(p=4))
    e0 = layer_energies(model)
    x = linalg.rand_gaussian(200, 8, 0.0, 1.0, rng)
    stream = batch_stream(x, (x[:, 0] > 0).astype(np.int64), 20, rng.spawn(1))
    opt = MomentumSGD(0.1)
    fold_worst = 0.0
    for _ in range(10):
        sopt_round(model, SOptConfig(p=4), 5, opt, stream, rng)
        fold_worst = max(fold_worst, max(abs(a - b) / b for a, b in zip(layer_energies(model), e0)))
    ok = worst <= 1e-9 and fold_worst <= 1e-9
    report(3, ok, f"max deviation over 100 triples {worst:.1e}; over 10 folds {fold_worst:.1e}")


def test_c04_sphere_energy_statistic(report):
    values = [energy.hyperspherical_energy(
        energy.normalize_neurons(linalg.rand_gaussian(32, 3, 0.0, 1.0, linalg.RngState(seed))), 1.0)
        for seed in range(200)]
    expected = 32 * 31 * energy.expected_pair_term(3, 1.0)
    dev = abs(np.mean(values) / expected - 1.0)
    report(4, dev <= 0.02 and expected == 992.0, f"mean energy {np.mean(values):.2f} vs {expected:.0f} ({100 * dev:.2f}%)")


def test_c05_gradient_correctness(report):
    rng = linalg.RngState(5)
    c = linalg.rand_gaussian(6, 6, 0.0, 1.0, rng)

    def through(spec):
        return lambda t, x: t.sum(t.hadamard(ortho.orthogonal_node(t, spec, x), t.constant(c)))

    cases = {
        "GS": (through(ortho.OrthoSpec(method="gs")), 1e-5),
        "IGS": (through(ortho.OrthoSpec(method="igs")), 1e-5),
        "HR": (through(ortho.OrthoSpec(method="hr")), 1e-5),
        "LS(8 iters)": (through(ortho.OrthoSpec(method="ls", ls_iters=8, ls_tol=None)), 1e-4),
        "CP": (through(ortho.OrthoSpec(method="cp")), 1e-5),
        "OR penalty": (lambda t, x: ortho.ortho_penalty(t, x), 1e-5),
        "energy": (lambda t, x: energy.energy_node(t, x, 1.0), 1e-5),
    }
    errors = {k: grad_check(f, linalg.rand_gaussian(6, 6, 0.0, 1.0, rng)) for k, (f, _) in cases.items()}
    ok = all(errors[k] <= tol for k, (_, tol) in cases.items())
    report(5, ok, "relative errors " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))


def test_c06_lowdin_optimality(report):
    rng = linalg.RngState(6)
    closer, local = 0, 0
    for _ in range(100):
        u = linalg.rand_gaussian(8, 8, 0.0, 1.0, rng)
        r = ortho.lowdin(u)
        dist = np.linalg.norm(r - u)
        closer += dist <= np.linalg.norm(ortho.householder_orthogonalize(u) - u)
        z = np.triu(linalg.rand_gaussian(8, 8, 0.0, 1.0, rng), 1)
        local += np.linalg.norm(r @ ortho.cayley(1e-2 * z) - u) >= dist
    report(6, closer == 100 and local == 100, f"nearer than HR in {closer}/100, perturbation-stable in {local}/100")


def test_c07_cayley_fixed_point_order(report):
    rng = linalg.RngState(7)
    ratios = []
    for _ in range(20):
        u = linalg.rand_orthogonal(16, rng)
        g = linalg.rand_gaussian(16, 16, 0.0, 1.0, rng)
        errs = [np.linalg.norm(ortho.ogd_step(u, g, lam, 2) - ortho.ogd_step(u, g, lam, closed_form=True))
                for lam in (1e-2, 5e-3)]
        ratios.append(errs[0] / errs[1])
    median = float(np.median(ratios))
    report(7, median >= 8, f"median error ratio {median:.2f} when halving lambda")


@pytest.mark.slow
def test_c08_mnist_mlp(report):
    data = load_mnist(ROOT / "data" / "mnist10k")
    start = time.perf_counter()
    means = {}
    for method in (None, "cp"):
        errs = []
        for seed in range(3):
            spec = ModelSpec(dims=(784, 256, 256, 10), ortho=None if method is None else ortho.OrthoSpec(method=method))
            cfg = TrainConfig(model=spec, optimizer=OptimizerConfig(lr=0.01, momentum=0.9), batch=100, epochs=20,
                              weight_decay=5e-4, seed=seed, eval_every=10**9)
            errs.append(train_run(cfg, dataset=data).records[-1].test_error)
        means[method or "baseline"] = float(np.mean(errs))
    minutes = (time.perf_counter() - start) / 60
    ok = means["cp"] <= means["baseline"] and all(0.04 <= m <= 0.09 for m in means.values()) and minutes <= 30
    report(8, ok, f"mean test error baseline {100 * means['baseline']:.2f}%, OPT(CP) {100 * means['cp']:.2f}% "
                  f"({len(data.y_train)} train / {len(data.y_test)} test, {minutes:.1f} min)")


def test_c09_inference_equivalence(report):
    data = synth_dataset("blobs", 500, 1.0, linalg.RngState(9), features=32, classes=4)
    worst, counts_ok = 0.0, True
    baseline = parameter_counts(init_model(ModelSpec(dims=(32, 32, 32, 4)), linalg.RngState(0)))
    for method in ("gs", "cp", "hr", "ogd"):
        spec = ModelSpec(dims=(32, 32, 32, 4), ortho=ortho.OrthoSpec(method=method))
        model = train_run(TrainConfig(model=spec, iterations=50, batch=50), dataset=data).model
        probes = linalg.rand_gaussian(100, 32, 0.0, 1.0, linalg.RngState(10))
        graph = forward(model, probes)
        worst = max(worst, float(np.max(np.abs(graph.tape.value(graph.output) - predict_logits(model, probes)))))
        counts_ok &= parameter_counts(model) == baseline
    report(9, worst <= 1e-10 and counts_ok, f"max deviation {worst:.1e} on 100 probes; parameter counts equal: {counts_ok}")


def test_c10_block_diagonal(report):
    rng = linalg.RngState(10)
    d, worst_dense, worst_energy, counts_ok = 16, 0.0, 0.0, True
    for k in (2, 4, 8):
        for shared in (True, False):
            spec = ortho.OrthoSpec(method="cp", blocks=k, block_shared=shared)
            b = d // k
            params = [linalg.rand_gaussian(b, b, 0.0, 1.0, rng) for _ in range(spec.n_param_blocks())]
            v = linalg.rand_gaussian(d, 24, 0.0, 1.0, rng)
            blocks = [ortho.cayley(p) for p in params]
            dense = scipy.linalg.block_diag(*(blocks * k if shared else blocks))
            w = ortho.block_apply(spec, params, v)
            worst_dense = max(worst_dense, float(np.max(np.abs(w - dense @ v))))
            e0 = energy.hyperspherical_energy(v.T)
            worst_energy = max(worst_energy, abs(energy.hyperspherical_energy(w.T) - e0) / e0)
            expected = d * d // (k * k) if shared else d * d // k
            counts_ok &= sum(p.size for p in params) == expected == ortho.orthogonal_parameter_count(spec, d)
    ok = worst_dense <= 1e-12 and worst_energy <= 1e-9 and counts_ok
    report(10, ok, f"dense mismatch {worst_dense:.1e}, energy change {worst_energy:.1e}, counts d^2/k^2 and d^2/k: {counts_ok}")


def test_c11_determinism(report, tmp_path):
    def cli(*args):
        return subprocess.run([sys.executable, "-m", "orthotrain.cli", *args], capture_output=True, text=True)

    selftests = [cli("selftest") for _ in range(2)]
    same_selftest = selftests[0].returncode == 0 and selftests[0].stdout == selftests[1].stdout
    config = ROOT / "configs" / "blobs_gs.toml"
    runs = []
    for name in ("a", "b"):
        res = cli("train", str(config), "--out-dir", str(tmp_path / name))
        assert res.returncode == 0, res.stderr
        runs.append(tmp_path / name)


    def normalized(run, rel):
        raw = (run / rel).read_bytes()
        if rel.name != "metrics.jsonl":
            return raw
        return "\n".join(json.dumps({k: v for k, v in json.loads(l).items() if k != "wall_ms"})
                         for l in raw.decode().splitlines()).encode()

    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    differing = [str(f) for f in files if normalized(runs[0], f) != normalized(runs[1], f)]
    ok = same_selftest and not differing and len(files) > 5
    report(11, ok, f"selftest output identical: {same_selftest}; {len(files)} run files, differing: {differing or 'none'}")
