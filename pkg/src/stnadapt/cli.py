"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import harness, models, synthdata
from .autodiff import NumericsError, ShapeError
from .config import DEFAULTS, ConfigError, load_config
from .containers import ContainerError
from .harness import STRATEGIES


def _load_cfg(path: str | None) -> dict:
    return load_config(path) if path else dict(DEFAULTS)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args.config)
    manifest = synthdata.generate_corpus(cfg, args.seed, args.out)
    for sid in manifest:
        print(f"wrote {sid}")
    print(f"{len(manifest)} sessions under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    session_path = Path(args.data) / f"{args.session}.utis"
    session = synthdata.load_session(session_path)
    log = print if args.verbose else None
    model, history = harness.train_base(cfg, session, args.seed, log=log)
    models.save_model(args.out, model)
    print(f"trained on {args.session}: dev MSE {history['dev_mse']:.4f} "
          f"after {history['epochs']} epochs -> {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_cfg(args.config)
    base = models.load_model(args.base)
    if base.target_mean is None:
        raise ConfigError(f"{args.base} carries no target statistics")
    target_path = Path(args.data) / f"{args.target}.utis"
    raw = synthdata.load_session(target_path)
    ds = harness.prepare_dataset(raw, base.spec, cfg,
                                 (base.target_mean, base.target_std))
    log = print if args.verbose else None
    adapted, _ = harness.adapt(base, ds, args.strategy, cfg, args.seed, log=log)
    models.save_model(args.out, adapted)
    test_mse = harness.evaluate_split(adapted, ds, "test")
    print(f"adapted ({args.strategy}) to {args.target}: "
          f"test MSE {test_mse:.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    model = models.load_model(args.ckpt)
    if model.target_mean is None:
        raise ConfigError(f"{args.ckpt} carries no target statistics")
    raw = synthdata.load_session(args.data)
    ds = harness.prepare_dataset(raw, model.spec, cfg,
                                 (model.target_mean, model.target_std))
    mse = harness.evaluate_split(model, ds, args.split)
    print(f"{args.split} MSE: {mse:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.primitive] if args.primitive else list(gradcheck_mod.PRIMITIVES)
    unknown = [n for n in names if n not in gradcheck_mod.PRIMITIVES]
    if unknown:
        raise ConfigError(
            f"unknown primitive {unknown[0]!r}; choose from "
            f"{', '.join(gradcheck_mod.PRIMITIVES)}"
        )
    failed = False
    for name in names:
        errs = gradcheck_mod.run_primitive(name)
        worst = max(errs)
        ok = worst < gradcheck_mod.DEFAULT_TOL
        failed |= not ok
        print(f"{name:16s} trials={len(errs)} max_rel_err={worst:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    if failed:
        raise NumericsError("gradient check failed")
    return 0


def cmd_run_matrix(args) -> int:
    cfg = _load_cfg(args.config)
    log = print if args.verbose else None
    harness.run_experiment_matrix(cfg, args.data, args.out, log=log)
    print(f"experiment matrix written to {args.out}")
    return 0


def cmd_report(args) -> int:
    results = harness.load_runs(args.runs)
    sys.stdout.write(harness.render_report(results, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stnadapt",
        description="STN-based speaker/session adaptation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a base model on one session")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--session", default=harness.BASE_SESSION)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a trained model to a session")
    p.add_argument("--config", default=None)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--target", required=True, help="target session id")
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a session file")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="session .utis file")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--primitive", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run-matrix",
                       help="run every (target, strategy, seed) cell")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run_matrix)

    p = sub.add_parser("report", help="render results from a runs directory")
    p.add_argument("--runs", required=True)
    p.add_argument("--format", default="text", choices=("text", "csv"))
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContainerError, ShapeError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
