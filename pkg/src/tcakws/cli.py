"""Command-line interface.

Subcommands: pretrain-wvc, pretrain-lgcsiam, finetune, evaluate, infer,
export-manifest, describe, report. Training commands take --config <file>
(JSON mirroring TrainConfig) plus flag overrides; metrics stream as JSON
lines to stdout and the run directory.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import data as D
from . import report as rpt
from . import trainer as tr
from .errors import ContractViolation, StoreIntegrityError, StoreNotFound
from .model import ModelConfig, TCANet


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (TrainConfig fields)")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--teacher-store", dest="teacher_store")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--checkpoint", help="init checkpoint (params + BN stats)")
    p.add_argument("--resume", help="resume this stage from a full checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--label-fraction", dest="label_fraction", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--no-figures", action="store_true")


def _build_config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig.from_json(args.config) if args.config else tr.TrainConfig()
    for name in ("data_root", "teacher_store", "run_dir", "seed",
                 "label_fraction", "batch", "lr0", "max_epochs", "resume"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "no_figures", False):
        cfg.figures = False
    if not cfg.data_root:
        raise ContractViolation("--data-root (or config data_root) is required")
    return cfg


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="tcakws", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    for name in ("pretrain-wvc", "pretrain-lgcsiam", "finetune"):
        _add_train_flags(sub.add_parser(name))

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", dest="data_root", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--batch", type=int, default=256)

    p = sub.add_parser("infer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)

    p = sub.add_parser("export-manifest")
    p.add_argument("--data-root", dest="data_root", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("describe")
    p.add_argument("--num-heads", dest="num_heads", type=int, default=4)

    p = sub.add_parser("report")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--out-dir", dest="out_dir")

    args = ap.parse_args(argv)
    try:
        if args.cmd == "pretrain-wvc":
            cfg = _build_config(args)
            _, report = tr.pretrain_wvc(cfg)
        elif args.cmd == "pretrain-lgcsiam":
            cfg = _build_config(args)
            _, report = tr.pretrain_lgcsiam(cfg, getattr(args, "checkpoint", None))
        elif args.cmd == "finetune":
            cfg = _build_config(args)
            _, report = tr.finetune(cfg, getattr(args, "checkpoint", None))
        elif args.cmd == "evaluate":
            manifest = D.load_dataset(args.data_root)
            acc = tr.evaluate(args.checkpoint, manifest, args.split, args.batch)
            print(json.dumps({"split": args.split, "accuracy": acc}))
        elif args.cmd == "infer":
            name, probs = tr.infer(args.checkpoint, args.wav)
            print(json.dumps({"class": name,
                              "probabilities": {c: float(p) for c, p in
                                                zip(D.CLASS_NAMES, probs)}}))
        elif args.cmd == "export-manifest":
            D.load_dataset(args.data_root).export_jsonl(args.out)
            print(json.dumps({"manifest": args.out}))
        elif args.cmd == "describe":
            model = TCANet(ModelConfig(num_heads=args.num_heads))
            print(model.describe())
        elif args.cmd == "report":
            files = [rpt.write_csv(args.run_dir)]
            files += rpt.render_figures(args.run_dir, args.out_dir)
            print(json.dumps({"files": [str(f) for f in files]}))
    except (ContractViolation, StoreNotFound, StoreIntegrityError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
