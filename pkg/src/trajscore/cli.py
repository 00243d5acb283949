"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ExperimentConfig, with_overrides


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise harness.HarnessError("usage", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    return with_overrides(cfg, overrides) if overrides else cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. scorer.epochs=5")
    common.add_argument("--out", help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trajscore", description="Trajectory scoring experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset operations")
    ds.add_subparsers(dest="action", required=True).add_parser("build", parents=[common])
    vb = sub.add_parser("vocab", help="vocabulary operations")
    vb.add_subparsers(dest="action", required=True).add_parser("build", parents=[common])

    tr = sub.add_parser("train", parents=[common], help="train the generator or a scorer")
    tr.add_argument("--component", required=True, choices=["generator", "dense", "aug"])
    tr.add_argument("--name", help="checkpoint name (defaults to the component)")
    tr.add_argument("--resume", action="store_true")

    ev = sub.add_parser("eval", parents=[common], help="score evaluation scenes with one or more checkpoints")
    ev.add_argument("--inference-vocab", choices=["dp", "xl", "dp+xl", "dp+l"])
    ev.add_argument("--checkpoint", default="dense", help="scorer checkpoint name or path")
    ev.add_argument("--ensemble", nargs="+", metavar="CKPT", help="average several scorer checkpoints")
    ev.add_argument("--generator", default="generator")
    ev.add_argument("--name", help="report name")

    rp = sub.add_parser("report", parents=[common], help="collect eval reports into a roadmap table and figures")
    rp.add_argument("run_dir", nargs="?", help="run directory (defaults to the config out_dir)")
    rp.add_argument("--no-figures", action="store_true")
    rp.add_argument("--no-baselines", action="store_true", help="omit random and oracle rows")

    rn = sub.add_parser("run", parents=[common], help="full pipeline: data, training, evaluation, report")
    rn.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        if args.command == "dataset":
            m = harness.cmd_dataset_build(cfg)
            out = {"n_scenes": m["n_scenes"], "label_rows": m["label_rows"], "dataset_hash": m["dataset_hash"]}
        elif args.command == "vocab":
            xl, vl = harness.cmd_vocab_build(cfg)
            out = {"k_xl": len(xl), "k_l": len(vl)}
        elif args.command == "train":
            d = harness.cmd_train(cfg, args.component, args.name, args.resume)
            out = {"checkpoint": d["name"], "checksum": d["checksum"]}
        elif args.command == "eval":
            ckpts = args.ensemble or [args.checkpoint]
            rep = harness.cmd_eval(cfg, ckpts, args.inference_vocab, args.generator, args.name)
            print(harness.format_subscore_table(rep), end="")
            return 0
        elif args.command == "report":
            rows = harness.cmd_report(args.run_dir or cfg.out_dir, figures=not args.no_figures,
                                      baselines=not args.no_baselines)
            print(harness.format_roadmap(rows), end="")
            return 0
        else:
            _, rows = harness.run_roadmap(cfg, figures=not args.no_figures)
            print(harness.format_roadmap(rows), end="")
            return 0
    except harness.HarnessError as exc:
        print(json.dumps(exc.record()), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FloatingPointError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
