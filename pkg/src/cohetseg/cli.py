"""Command-line entry point: data generation, training stages, evaluation.

Typical run, end to end::

    cohetseg gen-data --out runs/data
    cohetseg pretrain --data runs/data --out runs/exp
    cohetseg train --data runs/data --checkpoint runs/exp/pretrain.pt --out runs/exp
    cohetseg build-holes --data runs/data --checkpoint runs/exp/joint.pt --out runs/exp/holes
    cohetseg finetune --data runs/data --checkpoint runs/exp/joint.pt \\
        --holes runs/exp/holes --out runs/exp
    cohetseg eval --data runs/data --checkpoint runs/exp/finetune.pt \\
        --mode all-combos --out runs/exp/eval
    cohetseg report --out runs/exp/report runs/exp/eval
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import checkpoint_kind, load_checkpoint
from .config import build_configs, dump_configs, load_config
from .errors import ConfigError
from .evaluation import MODES, evaluate, write_report
from .fusion import load_cohetero_checkpoint
from .pseudolabel import build_holes_dataset, load_holes_dataset, save_holes_dataset
from .synthdata import generate_datasets, load_datasets, save_datasets
from .trainer import (
    finetune_with_holes,
    init_cohetero_from_pretrained,
    joint_train,
    load_joint_checkpoint,
    pretrain,
)


def _common(sp, *, out_required=True):
    sp.add_argument("--config", metavar="PATH", help="key=value options file")
    sp.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    sp.add_argument("--out", metavar="DIR", required=out_required, help="output directory")


def _configs(args):
    kv = load_config(args.config) if args.config else {}
    tcfg, scfg = build_configs(kv)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
        scfg = replace(scfg, seed=args.seed)
    return tcfg, scfg


def _snapshot(tcfg, scfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_configs(tcfg, scfg))


def _load_net(path):
    kind = checkpoint_kind(path)
    if kind == "phnn":
        return load_checkpoint(path)[0]
    return load_cohetero_checkpoint(path)[0]


def cmd_gen_data(args) -> int:
    tcfg, scfg = _configs(args)
    ds = generate_datasets(scfg)
    save_datasets(ds, args.out)
    counts = {k: len(v) for k, v in ds.splits().items()}
    print(f"wrote {sum(counts.values())} studies to {args.out} {counts}")
    return 0


def cmd_pretrain(args) -> int:
    tcfg, scfg = _configs(args)
    ds = load_datasets(args.data)
    _snapshot(tcfg, scfg, args.out)
    net, hist = pretrain(tcfg, ds.source_train, ds.source_val, out_dir=args.out)
    print(f"pretrain done: best val region DSC {hist['best_val_dsc']:.4f} "
          f"-> {Path(args.out) / 'pretrain.pt'}")
    return 0


def cmd_train(args) -> int:
    tcfg, scfg = _configs(args)
    ds = load_datasets(args.data)
    _snapshot(tcfg, scfg, args.out)
    base, _ = load_checkpoint(args.checkpoint)
    seg = init_cohetero_from_pretrained(base)
    seg, disc, hist = joint_train(tcfg, seg, ds.source_train, ds.target_train,
                                  ds.target_val, out_dir=args.out)
    print(f"joint training done: best val region DSC {hist['best_val_dsc']:.4f} "
          f"-> {Path(args.out) / 'joint.pt'}")
    return 0


def cmd_build_holes(args) -> int:
    tcfg, _ = _configs(args)
    ds = load_datasets(args.data)
    seg, _, _ = load_joint_checkpoint(args.checkpoint)
    holes = build_holes_dataset(seg, ds.target_train, slice_batch=tcfg.slice_batch)
    save_holes_dataset(holes, args.out)
    total = sum(len(r.hole_sizes) for r in holes)
    print(f"mined {total} holes in {len(holes)}/{len(ds.target_train)} studies -> {args.out}")
    return 0


def cmd_finetune(args) -> int:
    tcfg, scfg = _configs(args)
    ds = load_datasets(args.data)
    _snapshot(tcfg, scfg, args.out)
    seg, disc, _ = load_joint_checkpoint(args.checkpoint)
    holes = load_holes_dataset(args.holes)
    seg, disc, hist = finetune_with_holes(tcfg, seg, disc, ds.source_train,
                                          ds.target_train, holes, ds.target_val,
                                          out_dir=args.out)
    print(f"finetune done: best val region DSC {hist['best_val_dsc']:.4f} "
          f"-> {Path(args.out) / 'finetune.pt'}")
    return 0


def cmd_eval(args) -> int:
    ds = load_datasets(args.data)
    studies = ds.splits()[args.split]
    net = _load_net(args.checkpoint)
    report = evaluate(net, studies, args.mode)
    write_report(report, args.out)
    print(f"{args.mode} ({report.method}) on {args.split}: "
          f"mean region DSC {report.mean_dsc():.4f} over {len(report.scored())} rows "
          f"-> {args.out}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = None
    lines = []
    text = []
    for run_dir in args.runs:
        agg = Path(run_dir) / "aggregate.csv"
        if not agg.exists():
            raise ConfigError(f"{run_dir}: no aggregate.csv (not an eval output dir?)")
        rows = agg.read_text().splitlines()
        if header is None:
            header = "run," + rows[0]
            lines.append(header)
        label = Path(run_dir).name
        text.append(f"[{label}]")
        for row in rows[1:]:
            lines.append(f"{label},{row}")
            cells = row.split(",")
            text.append(f"  {cells[0]:>11}  n={cells[1]}  dsc={cells[4] or 'n/a'}")
        text.append("")
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    (out / "report.txt").write_text("\n".join(text) + "\n")
    print(f"combined {len(args.runs)} runs -> {out / 'report.csv'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cohetseg",
        description="Semi-supervised multi-phase CT liver segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised pretraining on labeled studies")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True, help="gen-data output")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint semi-supervised adaptation")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="pretrain checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-holes", help="mine pseudo labels from predictions")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="joint checkpoint")
    p.set_defaults(func=cmd_build_holes)

    p = sub.add_parser("finetune", help="finetune with the holes pseudo labels")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="joint checkpoint")
    p.add_argument("--holes", metavar="DIR", required=True, help="build-holes output")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint on a data split")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--mode", choices=MODES, default="all-available")
    p.add_argument("--split", default="target/test",
                   choices=("source/train", "source/val", "target/val", "target/test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine eval outputs into one table")
    _common(p)
    p.add_argument("runs", nargs="+", metavar="EVAL_DIR")
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
