"""Command-line entry point: ``dskd <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import ContainerError, load_dataset, save_dataset
from .diffusion import ConfigError

log = logging.getLogger("dskd")


def cmd_pretrain_teacher(args) -> int:
    from . import trainer as tr

    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    clean_train, _, test = tr.load_data(cfg)
    teacher, acc = tr.pretrain_teacher(cfg, clean_train, test)
    tr.save_teacher(out / "teacher.dskd", teacher)
    save_dataset(out / "train.dskd", clean_train)
    save_dataset(out / "test.dskd", test)
    print(f"teacher test accuracy {acc:.4f} -> {out / 'teacher.dskd'}")
    if acc < tr.MIN_TEACHER_ACC:
        print(f"warning: below the {tr.MIN_TEACHER_ACC:.0%} gate required by train", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    from . import trainer as tr

    cfg = load_config(args.config)
    res = tr.train(cfg, resume=args.resume, dskd=not args.baseline)
    last = res.records[-1] if res.records else None
    summary = {
        "run_dir": str(res.run_dir),
        "epochs": res.state.epoch,
        "teacher_acc": res.teacher_acc,
        "test_acc": last.test_acc if last else tr.evaluate(res.state.student, tr.load_data(cfg)[2]),
    }
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    from . import trainer as tr

    bundle = tr.load_bundle(args.ckpt)
    ds = load_dataset(args.data, num_classes=bundle.spec.num_classes)
    if ds.images.shape[1:] != bundle.spec.input_shape:
        raise ConfigError(f"{args.data}: images {ds.images.shape[1:]} do not match network input {bundle.spec.input_shape}")
    acc = tr.evaluate(bundle, ds)
    print(json.dumps({"ckpt": str(args.ckpt), "data": str(args.data), "items": len(ds), "accuracy": acc}))
    return 0


def cmd_ablate(args) -> int:
    from . import trainer as tr

    cfg = load_config(args.config)
    values = tr.parse_values(args.axis, args.values)
    out = args.out or Path(cfg.output_dir) / f"ablation_{args.axis}.csv"
    rows = tr.run_ablation(cfg, args.axis, values, out)
    for row in rows:
        print(f"{args.axis}={row['value']}: test_acc {row['test_acc']:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    from .verification import format_table, run_suite

    reports = run_suite(args.suite, seed=args.seed)
    print(format_table(reports))
    lines = "".join(r.to_json() + "\n" for r in reports)
    if args.report == "-":
        sys.stdout.write(lines)
    else:
        Path(args.report).write_text(lines)
    failed = [r.check for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dskd", description="Diffusion-guided student feature distillation (toy scale).")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-teacher", help="train the teacher and write it with the dataset splits")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pretrain_teacher)

    s = sub.add_parser("train", help="run distillation")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--baseline", action="store_true", help="KD-only run without the denoising terms")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset container")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep one config axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="CSV path (default: <output_dir>/ablation_<axis>.csv)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("verify", help="run the numerical oracles")
    s.add_argument("--suite", default="all", choices=["all", "grad", "diffusion", "guidance", "lsh"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", default="verify_report.jsonl", help="JSON-lines output path, '-' for stdout")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContainerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
