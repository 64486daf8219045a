"""Command line entry point: ``ufnrec train`` and ``ufnrec preset run``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .dataio import build_dataset, load_dataset, load_interactions, split_leave_one_out
from .experiments import PRESETS, get_preset, run_preset
from .synth import SynthConfig, generate, score_mining
from .trainer import TrainConfig, fit
from .validation import UFNRecError

log = logging.getLogger("ufnrec")

# CLI flag -> TrainConfig field
OVERRIDES = {
    "m": "m",
    "alpha": "alpha",
    "d": "decay",
    "mining": "mining",
    "fn_action": "fn_action",
    "count_mode": "count_mode",
    "n_negatives": "n_negatives",
    "optimizer": "optimizer",
    "eval_neg_mode": "eval_neg_mode",
    "method": "method",
    "seed": "seed",
    "max_epochs": "max_epochs",
    "warmup": "warmup",
    "warmup_epochs": "warmup_epochs",
}


def read_config(path) -> dict:
    """JSON or YAML mapping.  Either the TrainConfig fields themselves, or a
    ``train:`` section plus an optional ``data:`` section."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        cfg = yaml.safe_load(text) or {}
    else:
        cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise UFNRecError(f"{path}: expected a mapping at top level")
    return cfg


def _m_value(s: str):
    return None if s.lower() in ("inf", "none", "never") else int(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufnrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True, help="JSON or YAML config")
    t.add_argument("--data", default=None, help="'synth', a dataset dump or an interaction log (overrides config)")
    t.add_argument("--format", default=None, help="interaction log format: csv, tsv, amazon-ratings")
    t.add_argument("--out", default=None, help="output directory for checkpoint and reports")
    t.add_argument("--m", type=_m_value, default=argparse.SUPPRESS)
    t.add_argument("--alpha", type=float, default=argparse.SUPPRESS)
    t.add_argument("--d", type=float, default=argparse.SUPPRESS, help="EMA decay")
    t.add_argument("--mining", choices=["ufnrec", "variance", "none"], default=argparse.SUPPRESS)
    t.add_argument("--fn-action", dest="fn_action", choices=["reverse", "remove", "keep"], default=argparse.SUPPRESS)
    t.add_argument("--count-mode", dest="count_mode", choices=["cumulative", "consecutive"], default=argparse.SUPPRESS)
    t.add_argument("--n-negatives", dest="n_negatives", type=int, default=argparse.SUPPRESS)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default=argparse.SUPPRESS)
    t.add_argument("--eval-neg-mode", dest="eval_neg_mode", choices=["exclude-history", "exclude-positive-only"],
                   default=argparse.SUPPRESS)
    t.add_argument("--method", choices=["ufnrec", "backbone"], default=argparse.SUPPRESS)
    t.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    t.add_argument("--max-epochs", dest="max_epochs", type=int, default=argparse.SUPPRESS)
    t.add_argument("--warmup", choices=["relative", "fixed"], default=argparse.SUPPRESS)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=argparse.SUPPRESS)

    pr = sub.add_parser("preset", help="experiment presets")
    psub = pr.add_subparsers(dest="preset_command", required=True)
    run = psub.add_parser("run", help="run a preset")
    run.add_argument("name", choices=sorted(PRESETS))
    run.add_argument("--data", default="synth", help="'synth' or a dataset path")
    run.add_argument("--out", required=True)
    run.add_argument("--seeds", type=int, nargs="+", default=None)
    run.add_argument("--arms", nargs="+", default=None, help="subset of arm names")
    run.add_argument("--subsample-users", dest="subsample", type=float, default=None)
    run.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    psub.add_parser("list", help="list presets")
    return p


def _load_data(spec: dict):
    src = spec.get("source", "synth")
    if src == "synth":
        corpus = generate(SynthConfig(**{k: tuple(v) if k == "seq_len_range" else v for k, v in spec.get("synth", {}).items()}))
        return corpus.dataset, corpus
    path = Path(src)
    with path.open() as fh:
        if fh.readline().startswith("#version"):
            return load_dataset(path), None
    rows = load_interactions(path, spec.get("format", "csv"))
    return build_dataset(rows, min_seq_len=spec.get("min_seq_len", 3), k_core=spec.get("k_core", 0)), None


def cmd_train(args) -> int:
    raw = read_config(args.config)
    data_spec = dict(raw.get("data", {}))
    train = dict(raw.get("train", {k: v for k, v in raw.items() if k != "data"}))
    for flag, key in OVERRIDES.items():
        if hasattr(args, flag):
            train[key] = getattr(args, flag)
    if args.data:
        data_spec["source"] = args.data
    if args.format:
        data_spec["format"] = args.format
    cfg = TrainConfig.from_dict(train)
    ds, corpus = _load_data(data_spec)
    split = split_leave_one_out(ds)

    def report(e):
        print(e.to_json(), flush=True)

    out = Path(args.out) if args.out else None
    result = fit(cfg, ds, split, out_dir=out, log=report)
    summary = {
        "best_epoch": result.best_epoch,
        "warmup_epochs": result.warmup_epochs,
        "test": result.test_report.as_dict(),
        "n_false": result.ledger.n_false,
    }
    if corpus is not None and cfg.method == "ufnrec" and cfg.mining != "none":
        summary["mining"] = score_mining(corpus, result.ledger)
    if out:
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(json.dumps(summary, default=lambda x: None if isinstance(x, float) and math.isnan(x) else str(x)))
    return 0


def cmd_preset(args) -> int:
    if args.preset_command == "list":
        for name, p in sorted(PRESETS.items()):
            tag = " [long-running]" if p.long_running else ""
            print(f"{name}\t{len(p.arms)} arms x {len(p.seeds)} seeds\t{p.description}{tag}")
        return 0
    preset = get_preset(args.name)
    base = {"max_epochs": args.max_epochs} if args.max_epochs else None
    result = run_preset(preset, args.data, args.out, seeds=args.seeds, subsample=args.subsample,
                        arms=args.arms, base_overrides=base)
    print((Path(args.out) / "results.md").read_text())
    return 0 if not result.failed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args)
        return cmd_preset(args)
    except UFNRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
