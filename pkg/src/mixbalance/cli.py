"""Command-line entry points: synth, train, eval, gradcheck, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .backbone import BackboneConfig
from .config import ConfigError, load_config, parse_bool, parse_float_list, parse_int_list
from .data import SynthSpec, load_dataset, save_dataset, synth_generate
from .losses import LOSS_MODES, parse_weights_scheme
from .metrics import EvalReport
from .train import TrainConfig, default_backbone, evaluate, full_scale_preset, train

log = logging.getLogger("mixbalance")

_LIST_INT = {"stage_blocks", "class_counts"}
_LIST_FLOAT = {"manual_weights"}
_BOOL = {"cbam_on", "head_bias"}
_STR = {"loss_mode", "weights_scheme", "stem"}


def _convert(key: str, value):
    if not isinstance(value, str):
        return value
    if key in _LIST_INT:
        return parse_int_list(value)
    if key in _LIST_FLOAT:
        return parse_float_list(value)
    if key in _BOOL:
        return parse_bool(value)
    if key in _STR:
        return value
    try:
        return int(value)
    except ValueError:
        return float(value)


def _select(values: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: _convert(k, v) for k, v in values.items() if k in names}


def _merged(args, overrides: dict) -> dict:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def _apply_weights_scheme(values: dict) -> None:
    scheme = values.get("weights_scheme")
    if isinstance(scheme, str):
        name, manual = parse_weights_scheme(scheme)
        values["weights_scheme"] = name
        if manual is not None:
            values["manual_weights"] = manual


def _cbam_flag(text):
    if text is None:
        return None
    return parse_bool(text)


def cmd_synth(args) -> int:
    values = _merged(args, {"class_counts": args.counts, "image_size": args.size,
                            "noise_std": args.noise, "seed": args.seed})
    if "class_counts" not in values:
        raise ConfigError("synth needs --counts (or class_counts in the config file)")
    spec = SynthSpec(**_select(values, SynthSpec))
    dataset = synth_generate(spec)
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples, counts {dataset.class_counts.tolist()} -> {manifest}")
    return 0


def cmd_train(args) -> int:
    values = _merged(args, {
        "seed": args.seed, "loss_mode": args.loss_mode, "weights_scheme": args.weights_scheme,
        "cbam_on": _cbam_flag(args.cbam), "epochs": args.epochs, "batch_size": args.batch_size,
        "lr_backbone": args.lr_backbone, "lr_classifier": args.lr_classifier,
        "weight_decay": args.weight_decay, "gamma": args.gamma,
        "base_channels": args.base_channels, "stage_blocks": args.stage_blocks,
        "feature_dim": args.feature_dim,
    })
    _apply_weights_scheme(values)
    dataset = load_dataset(args.data, values.get("num_classes") and int(values["num_classes"]))
    eval_dataset = load_dataset(args.eval_data, dataset.num_classes) if args.eval_data else None
    train_kw = _select(values, TrainConfig)
    config = full_scale_preset(**train_kw) if args.preset == "full" else TrainConfig(**train_kw)
    bb_kw = _select(values, BackboneConfig)
    bb_kw.pop("cbam_on", None)
    backbone = default_backbone(dataset, config.cbam_on, **bb_kw)
    result = train(config, dataset, eval_dataset, backbone, out_dir=args.out)
    last = result.history[-1]
    print(f"trained {config.epochs} epochs; final loss {last['train_loss']:.5f}; "
          f"best epoch {result.best_epoch}; outputs in {args.out}")
    return 0


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    report = evaluate(args.checkpoint, dataset)
    if args.out:
        write_report(report, args.out)
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(range(args.seeds), report=print)
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len({r.name for r in results})} gradient checks passed")
    return 0


def _read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    report = EvalReport.from_json(Path(args.metrics).read_text(encoding="utf-8"))
    write_report(report, args.out)
    summary = {}
    if args.history:
        rows = _read_history(args.history)
        if not rows:
            raise ValueError(f"{args.history} has no epochs")
        scored = [r for r in rows if r["eval_acc"]]
        best = max(scored, key=lambda r: float(r["eval_acc"])) if scored else None
        summary = {
            "epochs": len(rows),
            "final_train_loss": float(rows[-1]["train_loss"]),
            "best_epoch": int(best["epoch"]) if best else None,
            "best_eval_acc": float(best["eval_acc"]) if best else None,
        }
        (Path(args.out) / "summary.json").write_text(
            json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"report": report.to_dict(), "history": summary}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixbalance", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic imbalanced dataset")
    p.add_argument("--config")
    p.add_argument("--counts", help="comma-separated per-class sample counts")
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--data", required=True, help="training manifest CSV")
    p.add_argument("--eval-data", help="evaluation manifest CSV")
    p.add_argument("--config")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-mode", choices=LOSS_MODES)
    p.add_argument("--weights-scheme", help="none | inv-freq | manual:<w1,w2,...>")
    p.add_argument("--cbam", choices=("on", "off"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-backbone", type=float)
    p.add_argument("--lr-classifier", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--stage-blocks")
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render confusion CSV and metrics JSON")
    p.add_argument("--metrics", required=True, help="metrics JSON written by eval")
    p.add_argument("--history", help="history CSV written by train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
