"""Experiment presets: ablations, removal-vs-utilization, sweeps, curves.

A preset is a base config plus named arms, each arm a dict of config deltas.
``run_preset`` trains every arm for every seed on one dataset with one shared
set of evaluation candidates, then writes ``results.csv``, ``results.md``,
plots and ``manifest.json`` into the output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import subprocess
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    InteractionDataset,
    build_dataset,
    build_eval_candidates,
    load_dataset,
    load_interactions,
    split_leave_one_out,
)
from .evaluation import RankingReport, sign_test
from .synth import SynthConfig, generate, score_mining
from .trainer import FitResult, TrainConfig, fit
from .validation import ConfigError, DataError

logger = logging.getLogger(__name__)

METRICS = ("HR@1", "HR@5", "HR@10", "NDCG@1", "NDCG@5", "NDCG@10")

# Settings shared by the desk-scale presets; every arm is a delta on top.
DESK_BASE = {
    "max_epochs": 300,
    "early_stop_patience": 30,
    "warmup": "relative",
    "warmup_window": 10,
    "warmup_rel_tol": 0.01,
    "warmup_cap": 150,
}
DESK_SYNTH: dict = {}  # the default SynthConfig

BACKBONE = {"method": "backbone"}
UFN = {}
FMR = {"alpha": 0.0}
FCR = {"fn_action": "keep"}
REMOVAL = {"fn_action": "remove"}
SRNS_REC = {"mining": "variance", "variance_use_rec": True}
SRNS = {"mining": "variance", "variance_use_rec": False}


@dataclass
class Arm:
    name: str
    deltas: dict = field(default_factory=dict)


@dataclass
class ExperimentPreset:
    name: str
    description: str
    arms: list
    seeds: tuple = (0, 1, 2)
    base: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    kind: str = "table"  # table | sweep | curves
    sweep_param: str | None = None
    long_running: bool = False
    data_format: str = "auto"
    k_core: int = 0

    def arm_config(self, arm: Arm, seed: int) -> TrainConfig:
        unknown = set(arm.deltas) - set(TrainConfig().to_dict())
        if unknown:
            raise ConfigError(f"arm {arm.name}: unknown keys {sorted(unknown)}")
        d = TrainConfig().to_dict()
        d.update(self.base)
        d.update(arm.deltas)
        d["seed"] = seed
        return TrainConfig.from_dict(d)

    def validate(self) -> "ExperimentPreset":
        if not self.arms:
            raise ConfigError(f"preset {self.name} has no arms")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"preset {self.name}: duplicate arm names")
        if not self.seeds:
            raise ConfigError(f"preset {self.name}: no seeds")
        for arm in self.arms:
            self.arm_config(arm, self.seeds[0])
        return self


def _sweep(param: str, values, label: str) -> list:
    return [Arm("backbone", BACKBONE)] + [Arm(f"+UFN {label}={v}", {param: v}) for v in values]


SWEEPS = {
    "alpha": (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    "m": (1, 2, 3, 4, 6, 8, 10),
    "decay": (0.9, 0.99, 0.995, 0.999),
    "batch_size": (32, 64, 128, 256, 512),
}

_ABLATION = [Arm("backbone", BACKBONE), Arm("+FMR", FMR), Arm("+FCR", FCR), Arm("+UFN", UFN)]
_REMOVAL = [
    Arm("SASRec", BACKBONE),
    Arm("SASRec^R", REMOVAL),
    Arm("+SRNS^R", {**SRNS_REC, **REMOVAL}),
    Arm("+SRNS", {**SRNS, **REMOVAL}),
    Arm("+UFN_srns^R", SRNS_REC),
    Arm("+UFN_srns", SRNS),
    Arm("+UFN", UFN),
]


def _presets() -> dict:
    p = {}
    p["synth_acceptance"] = ExperimentPreset(
        "synth_acceptance",
        "backbone, ablation arms and removal arm on the default synthetic corpus",
        _ABLATION + [Arm("SASRec^R", REMOVAL)],
        base=DESK_BASE,
        synth=DESK_SYNTH,
    )
    p["table3_ablation"] = ExperimentPreset(
        "table3_ablation", "contribution of reversal and consistency", list(_ABLATION), base=DESK_BASE, synth=DESK_SYNTH
    )
    p["table4_removal_vs_util"] = ExperimentPreset(
        "table4_removal_vs_util", "removing vs utilizing mined items", list(_REMOVAL), base=DESK_BASE, synth=DESK_SYNTH
    )
    labels = {"alpha": "alpha", "m": "m", "decay": "d", "batch_size": "batch"}
    for param, values in SWEEPS.items():
        name = f"fig4_sweep_{labels[param]}"
        p[name] = ExperimentPreset(
            name, f"sensitivity to {param}", _sweep(param, values, labels[param]),
            seeds=(0,), base=DESK_BASE, synth=DESK_SYNTH, kind="sweep", sweep_param=param,
        )
    p["fig4_sweeps"] = ExperimentPreset(
        "fig4_sweeps", "all four sensitivity sweeps",
        [Arm("backbone", BACKBONE)]
        + [Arm(f"+UFN {labels[k]}={v}", {k: v}) for k, vals in SWEEPS.items() for v in vals],
        seeds=(0,), base=DESK_BASE, synth=DESK_SYNTH, kind="sweep",
    )
    curves = {**DESK_BASE, "early_stop_patience": DESK_BASE["max_epochs"]}
    p["fig5_curves"] = ExperimentPreset(
        "fig5_curves", "validation curves without early stopping",
        [Arm("SASRec", BACKBONE), Arm("+UFN", UFN)], seeds=(0,), base=curves, synth=DESK_SYNTH, kind="curves",
    )
    beauty = {**DESK_BASE, "dropout_rate": 0.5}
    p["beauty_table3"] = ExperimentPreset(
        "beauty_table3", "ablation on Amazon Beauty ratings (long-running)", list(_ABLATION),
        base=beauty, long_running=True, data_format="amazon-ratings", k_core=5,
    )
    p["beauty_table4"] = ExperimentPreset(
        "beauty_table4", "removal vs utilization on Amazon Beauty ratings (long-running)", list(_REMOVAL),
        base=beauty, long_running=True, data_format="amazon-ratings", k_core=5,
    )
    return p


PRESETS = _presets()


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- data --------------------------------------------------------------------


def subsample_users(ds: InteractionDataset, fraction: float, seed: int = 0) -> InteractionDataset:
    """Keep a random ``fraction`` of users and re-index the items they touch."""
    if not 0 < fraction <= 1:
        raise ConfigError("subsample fraction must be in (0, 1]")
    if fraction == 1:
        return ds
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(ds.user_count, max(1, int(round(fraction * ds.user_count))), replace=False))
    used = sorted({i for u in keep for i in ds.sequences[u]})
    remap = {old: new for new, old in enumerate(used, start=1)}
    item_keys = ["<pad>"] + [ds.item_keys[i] if ds.item_keys else str(i) for i in used]
    user_keys = [ds.user_keys[u] if ds.user_keys else str(u) for u in keep]
    seqs = [[remap[i] for i in ds.sequences[u]] for u in keep]
    return InteractionDataset(len(keep), len(used), seqs, user_keys, item_keys)


def load_source(preset: ExperimentPreset, data, subsample: float | None = None, synth_overrides=None):
    """Returns ``(dataset, corpus_or_None, description)``."""
    corpus = None
    if data is None or data == "synth" or isinstance(data, (SynthConfig, dict)):
        if isinstance(data, SynthConfig):
            cfg = data
        else:
            cfg = SynthConfig(**{**preset.synth, **(data if isinstance(data, dict) else {}), **(synth_overrides or {})})
        corpus = generate(cfg)
        ds, source = corpus.dataset, {"synth": {**asdict(cfg), "seq_len_range": list(cfg.seq_len_range)}}
    else:
        path = Path(data)
        if not path.exists():
            raise DataError(f"dataset path {path} does not exist")
        with path.open() as fh:
            first = fh.readline()
        if first.startswith("#version"):
            ds = load_dataset(path)
        else:
            fmt = "csv" if preset.data_format == "auto" else preset.data_format
            ds = build_dataset(load_interactions(path, fmt), k_core=preset.k_core)
        source = {"path": str(path), "sha256": _sha256(path)}
    if subsample:
        if corpus is not None:
            raise ConfigError("subsampling applies to dataset paths, not synthetic corpora")
        ds = subsample_users(ds, subsample)
        source["subsample_users"] = subsample
    return ds, corpus, source


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- comparison --------------------------------------------------------------


def _ranks(run) -> tuple[dict, str | None]:
    if isinstance(run, FitResult):
        run = run.test_report
    if isinstance(run, RankingReport):
        return run.per_user_rank, run.candidates_digest
    if isinstance(run, dict) and "ranks" in run:
        return run["ranks"], run.get("candidates_digest")
    return dict(run), None


def compare_runs(run_a, run_b) -> dict:
    """Paired per-user sign test of two runs evaluated on the same candidates.

    Runs may be fit results, ranking reports or ``{user: rank}`` maps.  The
    summary reports, per metric, the difference ``a - b``.
    """
    ra, da = _ranks(run_a)
    rb, db = _ranks(run_b)
    if da is not None and db is not None and da != db:
        raise ValueError("runs were evaluated on different candidate sets")
    if set(ra) != set(rb):
        raise ValueError("runs were evaluated on different users")
    out = sign_test(ra, rb)
    a = np.array([ra[u] for u in sorted(ra)])
    b = np.array([rb[u] for u in sorted(ra)])
    for k in (1, 5, 10):
        for name, fn in (("HR", lambda r: (r <= k).astype(float)), ("NDCG", lambda r: np.where(r <= k, 1 / np.log2(r + 1.0), 0.0))):
            delta = float(fn(a).mean() - fn(b).mean())
            out[f"delta_{name}@{k}"] = delta
    d = out["delta_NDCG@10"]
    out["direction"] = 0 if d == 0 and out["a_better"] == out["b_better"] else int(np.sign(d) or np.sign(out["a_better"] - out["b_better"]))
    return out


def mean_ranks(rank_maps: list[dict]) -> dict:
    """Per-user rank averaged over seeds (used to pair arms across seeds)."""
    users = set(rank_maps[0])
    for r in rank_maps[1:]:
        if set(r) != users:
            raise ValueError("seed runs cover different users")
    return {u: float(np.mean([r[u] for r in rank_maps])) for u in users}


# -- running -----------------------------------------------------------------


@dataclass
class RunRecord:
    arm: str
    seed: int
    status: str
    metrics: dict
    best_epoch: int = 0
    epochs_run: int = 0
    warmup_epochs: int = 0
    best_valid_ndcg10: float = float("nan")
    n_false: int = 0
    mining: dict = field(default_factory=dict)
    seconds: float = 0.0
    history: list = field(default_factory=list)
    ranks: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


@dataclass
class PresetResult:
    preset: ExperimentPreset
    runs: list
    out_dir: Path | None
    failed: bool = False

    def arm_runs(self, arm: str) -> list:
        return [r for r in self.runs if r.arm == arm and r.status == "ok"]

    def summary(self, metric: str = "NDCG@10") -> dict:
        """``arm -> (mean, standard error, n)`` over successful seeds."""
        out = {}
        for arm in self.preset.arms:
            vals = [r.metrics[metric] for r in self.arm_runs(arm.name)]
            if vals:
                se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                out[arm.name] = (float(np.mean(vals)), se, len(vals))
        return out

    def compare(self, arm_a: str, arm_b: str) -> dict:
        a = self.arm_runs(arm_a)
        b = self.arm_runs(arm_b)
        if not a or not b:
            raise ValueError(f"missing runs for {arm_a} or {arm_b}")
        out = compare_runs(mean_ranks([r.ranks for r in a]), mean_ranks([r.ranks for r in b]))
        # metrics of averaged ranks are not averaged metrics; report the latter
        for m in METRICS:
            out[f"delta_{m}"] = float(np.mean([r.metrics[m] for r in a]) - np.mean([r.metrics[m] for r in b]))
        d = out["delta_NDCG@10"]
        out["direction"] = int(np.sign(d))
        return out


def _run_one(preset, arm, seed, ds, split, cands, corpus, out_dir, log):
    cfg = preset.arm_config(arm, seed)
    run_dir = out_dir / "runs" / f"{_slug(arm.name)}_s{seed}" if out_dir else None
    start = time.perf_counter()
    result = fit(cfg, ds, split, out_dir=run_dir, eval_candidates=cands, log=log)
    mining = {}
    if corpus is not None and cfg.method == "ufnrec" and cfg.mining != "none":
        mining = score_mining(corpus, result.ledger)
    return RunRecord(
        arm=arm.name,
        seed=seed,
        status="ok",
        metrics=result.test_report.as_dict(),
        best_epoch=result.best_epoch,
        epochs_run=len(result.history),
        warmup_epochs=result.warmup_epochs,
        best_valid_ndcg10=result.best_valid_ndcg10,
        n_false=result.ledger.n_false,
        mining=mining,
        seconds=time.perf_counter() - start,
        history=[{"epoch": h.epoch, "phase": h.phase, "valid_ndcg10": h.valid_ndcg10, "valid_hr10": h.valid_hr10,
                  "L_basic": h.L_basic, "n_false": h.n_false} for h in result.history],
        ranks=dict(result.test_report.per_user_rank),
        config=cfg.to_dict(),
    )


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_") or "arm"


def run_preset(
    preset,
    data="synth",
    out_dir=None,
    seeds=None,
    subsample: float | None = None,
    arms=None,
    base_overrides: dict | None = None,
    synth_overrides: dict | None = None,
    log=None,
) -> PresetResult:
    """Train every arm x seed and write tables, plots and a manifest.

    A failing run is recorded and the remaining runs continue; the written
    outputs then hold the partial results and the call raises at the end.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    if seeds is not None or base_overrides or arms:
        preset = ExperimentPreset(**{
            **preset.__dict__,
            "seeds": tuple(seeds) if seeds is not None else preset.seeds,
            "base": {**preset.base, **(base_overrides or {})},
            "arms": [a for a in preset.arms if not arms or a.name in arms],
        })
    preset.validate()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    ds, corpus, source = load_source(preset, data, subsample, synth_overrides)
    split = split_leave_one_out(ds)
    eval_seed = preset.arm_config(preset.arms[0], preset.seeds[0]).eval_seed
    neg_mode = preset.arm_config(preset.arms[0], preset.seeds[0]).eval_neg_mode
    cands = {s: build_eval_candidates(ds, split, s, eval_seed, neg_mode) for s in ("valid", "test")}
    manifest = _manifest(preset, source, ds)
    if corpus is not None and out:
        corpus.save(out / "corpus")

    result = PresetResult(preset, [], out)
    for arm in preset.arms:
        for seed in preset.seeds:
            logger.info("preset %s: arm %s seed %d", preset.name, arm.name, seed)
            try:
                rec = _run_one(preset, arm, seed, ds, split, cands, corpus, out, log)
            except Exception as exc:  # keep going; the preset reports failure at the end
                logger.error("arm %s seed %d failed: %s", arm.name, seed, exc)
                rec = RunRecord(arm.name, seed, f"failed: {exc}", {}, config=preset.arm_config(arm, seed).to_dict())
                rec.history = [{"traceback": traceback.format_exc()}]
                result.failed = True
            result.runs.append(rec)
            if out:
                write_outputs(result, manifest)
    if out:
        write_outputs(result, manifest, plots=True)
    if result.failed:
        from .validation import TrainingError

        bad = [f"{r.arm}/s{r.seed}" for r in result.runs if r.status != "ok"]
        raise TrainingError(f"preset {preset.name}: runs failed: {', '.join(bad)} (partial results kept)")
    return result


def _manifest(preset, source, ds) -> dict:
    import torch

    from . import __version__

    try:
        commit = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5
        ).stdout.strip() or None
    except Exception:
        commit = None
    return {
        "preset": preset.name,
        "description": preset.description,
        "kind": preset.kind,
        "seeds": list(preset.seeds),
        "base": preset.base,
        "arms": {a.name: a.deltas for a in preset.arms},
        "data": source,
        "dataset": {"users": ds.user_count, "items": ds.item_count, "actions": ds.n_actions},
        "versions": {
            "ufnrec": __version__,
            "git_commit": commit,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


# -- outputs -----------------------------------------------------------------


def write_outputs(result: PresetResult, manifest: dict, plots: bool = False) -> None:
    out = result.out_dir
    cols = ["arm", "seed", "status", *METRICS, "best_epoch", "epochs_run", "warmup_epochs", "best_valid_ndcg10",
            "n_false", "mining_precision", "mining_recall", "mining_lift", "seconds"]
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in result.runs:
            w.writerow([r.arm, r.seed, r.status, *[r.metrics.get(m, "") for m in METRICS], r.best_epoch, r.epochs_run,
                        r.warmup_epochs, r.best_valid_ndcg10, r.n_false, r.mining.get("precision", ""),
                        r.mining.get("recall", ""), r.mining.get("lift", ""), round(r.seconds, 2)])
    (out / "results.md").write_text(markdown_table(result))
    runs = [{k: v for k, v in asdict(r).items() if k != "ranks"} for r in result.runs]
    (out / "manifest.json").write_text(json.dumps({**manifest, "runs": runs, "failed": result.failed}, indent=2, default=str))
    if plots:
        make_plots(result)


def markdown_table(result: PresetResult) -> str:
    lines = [f"# {result.preset.name}", "", result.preset.description, ""]
    lines.append("| arm | " + " | ".join(METRICS) + " | seeds |")
    lines.append("|---" * (len(METRICS) + 2) + "|")
    for arm in result.preset.arms:
        runs = result.arm_runs(arm.name)
        if not runs:
            lines.append(f"| {arm.name} | " + " | ".join("-" for _ in METRICS) + " | 0 |")
            continue
        cells = []
        for m in METRICS:
            v = np.array([r.metrics[m] for r in runs])
            se = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
            cells.append(f"{v.mean():.4f} ± {se:.4f}")
        lines.append(f"| {arm.name} | " + " | ".join(cells) + f" | {len(runs)} |")
    ref = result.preset.arms[0].name
    others = [a.name for a in result.preset.arms[1:] if result.arm_runs(a.name)]
    if result.arm_runs(ref) and others:
        lines += ["", f"Paired sign test against `{ref}` (per-user test rank averaged over seeds):", ""]
        lines.append("| arm | better | worse | ties | p-value | ΔNDCG@10 |")
        lines.append("|---|---|---|---|---|---|")
        for name in others:
            c = result.compare(name, ref)
            lines.append(f"| {name} | {c['a_better']} | {c['b_better']} | {c['ties']} | {c['p_value']:.3g} | {c['delta_NDCG@10']:+.4f} |")
    failed = [r for r in result.runs if r.status != "ok"]
    if failed:
        lines += ["", "Failed runs:", ""] + [f"- {r.arm} seed {r.seed}: {r.status}" for r in failed]
    return "\n".join(lines) + "\n"


def make_plots(result: PresetResult) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out, paths = result.out_dir, []
    preset = result.preset
    summary = {m: result.summary(m) for m in ("HR@10", "NDCG@10")}

    if preset.kind == "sweep":
        params = [preset.sweep_param] if preset.sweep_param else list(SWEEPS)
        for param in params:
            xs, ys = [], {m: [] for m in summary}
            for arm in preset.arms:
                if param in arm.deltas and arm.name in summary["NDCG@10"]:
                    xs.append(arm.deltas[param])
                    for m in summary:
                        ys[m].append(summary[m][arm.name][0])
            if not xs:
                continue
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
            for ax, m in zip(axes, summary):
                ax.plot(range(len(xs)), ys[m], marker="o", label="+UFN")
                base = summary[m].get(preset.arms[0].name)
                if base:
                    ax.axhline(base[0], color="grey", ls="--", label=preset.arms[0].name)
                ax.set_xticks(range(len(xs)), [str(x) for x in xs])
                ax.set_xlabel(param)
                ax.set_ylabel(m)
                ax.legend()
            fig.tight_layout()
            paths.append(out / f"sweep_{param}.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)
    else:
        names = [a.name for a in preset.arms if a.name in summary["NDCG@10"]]
        if names:
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
            for ax, m in zip(axes, summary):
                means = [summary[m][n][0] for n in names]
                ses = [summary[m][n][1] for n in names]
                ax.bar(range(len(names)), means, yerr=ses, capsize=3)
                ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
                ax.set_ylabel(m)
            fig.tight_layout()
            paths.append(out / "metrics.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for arm in preset.arms:
        for r in result.arm_runs(arm.name):
            ep = [h["epoch"] for h in r.history]
            ax.plot(ep, [h["valid_ndcg10"] for h in r.history], label=f"{arm.name} s{r.seed}", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation NDCG@10")
    if len(preset.arms) * len(preset.seeds) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(out / "curves.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    return paths


def curve_stats(record: RunRecord, last: int = 10) -> dict:
    """Best validation NDCG@10 and its variance over the last ``last`` epochs."""
    vals = np.array([h["valid_ndcg10"] for h in record.history])
    return {"best": float(vals.max()), "last_var": float(np.var(vals[-last:]))}
