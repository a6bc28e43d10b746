"""``orthotrain`` command line: train, energy, landscape, selftest.

Exit codes: 0 success, 1 runtime failure (including a failed selftest or a
diverged run), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import energy, linalg
from .config import load_config, save_config
from .errors import ConfigError, FormatError
from .io_utils import atomic_write_text
from .selftest import run_selftest
from .train import LandscapeGrid, dataset_objective, landscape_grid, load_dataset, train_run
from .train.landscape import format_landscape_csv
from .train.persist import load_state, save_state, save_weights

THREADS_ENV = "ORTHOTRAIN_THREADS"


class _UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="orthotrain", description="Train MLPs as learned rotations of frozen random neurons.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a TOML config; writes metrics.jsonl and weights")
    t.add_argument("config_path", nargs="?", help="TOML config file")
    t.add_argument("--config", dest="config_flag", help="TOML config file (alternative to the positional)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out-dir", help="run directory (default: <config stem>_run)")
    t.add_argument("--eval-every", type=int, help="override the evaluation interval")

    e = sub.add_parser("energy", help="hyperspherical energy of a neuron matrix (rows are neurons)")
    e.add_argument("matrix", nargs="?", help="matrix text file")
    e.add_argument("--random", nargs=3, type=int, metavar=("N", "D", "SEED"), help="N Gaussian neurons in D dims")
    e.add_argument("--s", type=float, default=1.0)
    e.add_argument("--half-space", action="store_true")
    e.add_argument("--refine", nargs=2, metavar=("STEPS", "LR"), help="energy-minimizing refinement first")
    e.add_argument("--out-dir", help="also write energy.json here")

    ls = sub.add_parser("landscape", help="loss/error grid around a trained run")
    ls.add_argument("run_dir")
    ls.add_argument("--grid", type=int, default=11, help="points per axis")
    ls.add_argument("--range", type=float, default=1.0, help="alpha and beta span [-R, R]")
    ls.add_argument("--seed", type=int, help="direction seed (default: the run's seed)")
    ls.add_argument("--out-dir", help="where to write landscape.csv (default: the run dir)")

    sub.add_parser("selftest", help="golden-file and invariant checks")
    return p


def _cmd_train(args):
    path = args.config_flag or args.config_path
    if not path or (args.config_flag and args.config_path):
        raise _UsageError("train needs exactly one config path")
    cfg = load_config(path)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.eval_every is not None:
        overrides["eval_every"] = args.eval_every
    if cfg.data.kind == "mnist" and not Path(cfg.data.path).is_absolute():
        # pin the dataset location so the saved run config works from anywhere
        base = Path(path).parent
        found = Path(cfg.data.path) if Path(cfg.data.path).exists() else base / cfg.data.path
        overrides["data"] = dataclasses.replace(cfg.data, path=str(found.resolve()))
    cfg = dataclasses.replace(cfg, **overrides)
    out = Path(args.out_dir) if args.out_dir else Path(f"{Path(path).stem}_run")
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.toml", cfg)
    lines = []

    def emit(rec):
        # whole-file atomic rewrite: a reader never sees a torn line
        lines.append(rec.to_json())
        atomic_write_text(out / "metrics.jsonl", "\n".join(lines) + "\n")

    result = train_run(cfg, on_record=emit, base_dir=Path(path).parent)
    save_weights(result.model, out / "weights")
    save_state(result.model, out / "state")
    summary = {
        "iterations": result.records[-1].iteration if result.records else 0,
        "diverged": result.diverged,
        "message": result.message,
        "frozen_ok": result.frozen_ok,
        "final_test_err": result.records[-1].test_error if result.records else None,
        "e0": result.model.e0,
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=1) + "\n")
    print(f"wrote {out}")
    if result.diverged:
        print(f"run diverged: {result.message}", file=sys.stderr)
        return 1
    if not result.frozen_ok:
        print("frozen neurons changed during training", file=sys.stderr)
        return 1
    return 0


def _cmd_energy(args):
    if (args.matrix is None) == (args.random is None):
        raise _UsageError("energy needs either a matrix file or --random N D SEED")
    if args.random is not None:
        n, d, seed = args.random
        v = linalg.rand_gaussian(n, d, 0.0, 1.0, linalg.RngState(seed))
    else:
        v = linalg.read_matrix(args.matrix)
    if args.refine is not None:
        try:
            steps, lr = int(args.refine[0]), float(args.refine[1])
        except ValueError as exc:
            raise _UsageError(f"--refine expects STEPS LR: {exc}") from exc
        v = energy.refine_mhe(v, steps, lr, args.s, args.half_space)
    report = energy.uniformity_diagnostics(v, args.s, args.half_space)
    text = report.to_json()
    if args.out_dir:
        atomic_write_text(Path(args.out_dir) / "energy.json", text + "\n")
    print(text)
    return 0


def _cmd_landscape(args):
    if args.grid < 1 or args.range < 0:
        raise _UsageError("--grid must be >= 1 and --range >= 0")
    run = Path(args.run_dir)
    cfg = load_config(run / "config.toml")
    model = load_state(cfg.model, run / "state")
    data = load_dataset(cfg.data, base_dir=run)
    seed = cfg.seed if args.seed is None else args.seed
    grid = LandscapeGrid((-args.range, args.range), (-args.range, args.range), args.grid)
    rows = landscape_grid(model, dataset_objective(data), grid, linalg.RngState(seed).spawn(4))
    out = Path(args.out_dir) if args.out_dir else run
    atomic_write_text(out / "landscape.csv", format_landscape_csv(rows))
    print(f"wrote {out / 'landscape.csv'}")
    return 0


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise _UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise _UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def run_cli(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0)
    commands = {"train": _cmd_train, "energy": _cmd_energy, "landscape": _cmd_landscape}
    try:
        with threadpool_limits(limits=_threads()):
            if args.command == "selftest":
                return 0 if run_selftest() else 1
            return commands[args.command](args)
    except (_UsageError, ConfigError) as exc:
        print(f"orthotrain {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ArithmeticError, ValueError) as exc:
        print(f"orthotrain {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
