"""Command-line entry point.

Exit codes: 0 success, 1 validation/format error, 2 numerical failure
(non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import CheckpointError
from .data import DataError, Dataset, load_idx_dataset, synth_generate
from .gradcheck import DEFAULT_ATOL, DEFAULT_RTOL, DEFAULT_STEP
from .nn import NumericalError
from .norm import KINDS, NormError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = harness.RunConfig()
    p.add_argument("--norm", choices=KINDS, default=d.norm)
    p.add_argument("--modes", type=int, default=d.modes, help="K, number of modes (mn/mgn)")
    p.add_argument("--groups", type=int, default=d.groups, help="channel groups (gn)")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="running-estimate memory")
    p.add_argument("--eps", type=float, default=d.eps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--data", choices=("synth", "idx"), default=d.data)
    p.add_argument("--data-dir", default=d.data_dir)
    p.add_argument("--milestones", type=_int_list, default=None,
                   help="comma-separated epochs for tenfold lr decay (default: 65%% and 80%% of epochs)")
    p.add_argument("--out", default=d.out)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--gate-noise", type=float, default=d.gate_noise)
    _add_synth_flags(p)


def _add_synth_flags(p):
    d = harness.RunConfig()
    p.add_argument("--synth-modes", type=int, default=d.synth_modes)
    p.add_argument("--classes", type=int, default=d.classes)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-test", type=int, default=d.n_test)
    p.add_argument("--separation", type=float, default=d.separation)
    p.add_argument("--scale-ratio", type=float, default=d.scale_ratio)


def _run_config(args) -> harness.RunConfig:
    fields = {f.name for f in dataclasses.fields(harness.RunConfig)}
    kwargs = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    if "milestones" in kwargs:
        kwargs["milestones"] = tuple(kwargs["milestones"])
    return harness.RunConfig(**kwargs).validate()


def _eval_data(args, cfg: harness.RunConfig) -> Dataset:
    if args.data == "idx":
        return load_idx_dataset(args.data_dir, args.split)
    if args.data == "synth":
        train_ds, test_ds = synth_generate(cfg.synth_config())
        return train_ds if args.split == "train" else test_ds
    return harness.load_data(cfg)[0 if args.split == "train" else 1]


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = harness.train(cfg)
    print(res.metrics_csv, end="")
    print(f"wrote {Path(cfg.out) / harness.METRICS_NAME} and {Path(cfg.out) / harness.CHECKPOINT_NAME}",
          file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, echo = harness.load_checkpoint(args.checkpoint)
    ds = _eval_data(args, cfg)
    res = harness.eval_checkpoint(args.checkpoint, ds)
    usage = ",".join(repr(float(u)) for u in res["gate_usage"])
    print("split,loss,error_rate,gate_usage")
    print(f"{args.split},{res['loss']!r},{res['error_rate']!r},{usage}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = harness.GRAD_KINDS if args.layer == "all" else (args.layer,)
    ok = True
    for kind in kinds:
        reports = harness.run_gradcheck(kind, range(args.seed, args.seed + args.seeds),
                                        args.step, args.rtol, args.atol)
        failed = [r for r in reports if not r.passed]
        worst = max(reports, key=lambda r: r.max_rel_err)
        print(f"{'PASS' if not failed else 'FAIL'} {kind}: {len(reports)} checks, "
              f"worst max_rel={worst.max_rel_err:.3e} ({worst.name})")
        for r in failed:
            print("  " + r.line())
        ok &= not failed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    base = _run_config(args)
    result = harness.sweep(base, args.batch_sizes, args.modes_grid, range(args.seed, args.seed + args.seeds),
                           jobs=args.jobs)
    print(result["trend"], end="")
    print(f"wrote {Path(base.out) / 'sweep.csv'}", file=sys.stderr)
    failed = [r for r in result["rows"] if r[4] != "ok"]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gates_report(args) -> int:
    model, cfg, _ = harness.load_checkpoint(args.checkpoint)
    ds = _eval_data(args, cfg)
    report = harness.gate_report(model, ds, args.top_p)
    text = harness.format_gate_report(report)
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _run_config(args).synth_config()
    train_ds, test_ds = synth_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", train_ds), ("test", test_ds)):
        np.savez(out / f"synth_{name}.npz", features=ds.features, labels=ds.labels, mode_labels=ds.mode_labels)
    print("split,mode,count,fraction," + ",".join(f"mean_c{c}" for c in range(cfg.channels)))
    for name, ds in (("train", train_ds), ("test", test_ds)):
        for m in range(cfg.modes):
            sel = ds.mode_labels == m
            means = ds.features[sel].mean(axis=(0, 2, 3)) if sel.any() else np.full(cfg.channels, np.nan)
            print(f"{name},{m},{int(sel.sum())},{sel.mean():.6f}," + ",".join(f"{v:.6f}" for v in means))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modenorm", description="Mode normalization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an MLP with the chosen normalization")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("gates-report", cmd_gates_report, "list top samples per mode")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--data", choices=("synth", "idx", "config"), default="config",
                       help="data source (default: the one recorded in the checkpoint)")
        p.add_argument("--data-dir", default="")
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "gates-report":
            p.add_argument("--top-p", type=int, default=5)
            p.add_argument("--output", default="")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference certification of backward passes")
    p.add_argument("--layer", choices=harness.GRAD_KINDS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--rtol", type=float, default=DEFAULT_RTOL)
    p.add_argument("--atol", type=float, default=DEFAULT_ATOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="batch size x mode count grid for mode norm")
    _add_run_flags(p)
    p.add_argument("--batch-sizes", type=_int_list, default=[32, 128, 512])
    p.add_argument("--modes-grid", type=_int_list, default=[1, 2, 4, 6])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=harness.default_jobs())
    p.set_defaults(func=cmd_sweep, out="runs/sweep")

    p = sub.add_parser("synth", help="generate the synthetic mixture and print per-mode statistics")
    _add_run_flags(p)
    p.set_defaults(func=cmd_synth, out="runs/synth")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataError, NormError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
