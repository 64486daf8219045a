import json

import numpy as np
import pytest

from ufnrec.dataio import InteractionDataset
from ufnrec.experiments import (
    PRESETS,
    SWEEPS,
    Arm,
    ExperimentPreset,
    compare_runs,
    curve_stats,
    get_preset,
    run_preset,
    subsample_users,
)
from ufnrec.trainer import TrainConfig
from ufnrec.validation import ConfigError, TrainingError

TINY = {"max_epochs": 3, "warmup": "fixed", "warmup_epochs": 1, "d_model": 16, "n_heads": 1, "n_layers": 1, "m": 1}
TINY_SYNTH = {"n_users": 80, "n_items": 220}


def test_ablation_arms():
    arms = {a.name: a.deltas for a in get_preset("table3_ablation").arms}
    assert arms == {"backbone": {"method": "backbone"}, "+FMR": {"alpha": 0.0}, "+FCR": {"fn_action": "keep"}, "+UFN": {}}


def test_removal_table_arms():
    names = [a.name for a in get_preset("table4_removal_vs_util").arms]
    assert names == ["SASRec", "SASRec^R", "+SRNS^R", "+SRNS", "+UFN_srns^R", "+UFN_srns", "+UFN"]


def test_sweep_values():
    assert SWEEPS["alpha"] == (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    assert SWEEPS["m"] == (1, 2, 3, 4, 6, 8, 10)
    assert SWEEPS["decay"] == (0.9, 0.99, 0.995, 0.999)
    assert SWEEPS["batch_size"] == (32, 64, 128, 256, 512)
    vals = [a.deltas["alpha"] for a in get_preset("fig4_sweep_alpha").arms if "alpha" in a.deltas]
    assert tuple(vals) == SWEEPS["alpha"]


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_valid_and_arms_are_deltas(name):
    p = PRESETS[name].validate()
    base = TrainConfig.from_dict({**TrainConfig().to_dict(), **p.base}).to_dict()
    for arm in p.arms:
        cfg = p.arm_config(arm, 7).to_dict()
        assert cfg["seed"] == 7
        changed = {k for k in cfg if cfg[k] != base[k]} - {"seed"}
        assert changed <= set(arm.deltas)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg))).to_dict() == cfg


def test_invalid_presets():
    with pytest.raises(ConfigError):
        ExperimentPreset("x", "", [Arm("a", {"nope": 1})]).validate()
    with pytest.raises(ConfigError):
        ExperimentPreset("x", "", [Arm("a"), Arm("a")]).validate()
    with pytest.raises(ConfigError):
        get_preset("table9")


def test_compare_self_and_mismatch():
    ranks = {0: 1, 1: 5, 2: 30}
    out = compare_runs(ranks, ranks)
    assert out["p_value"] == 1.0 and out["direction"] == 0
    with pytest.raises(ValueError):
        compare_runs({"ranks": ranks, "candidates_digest": "a"}, {"ranks": ranks, "candidates_digest": "b"})
    with pytest.raises(ValueError):
        compare_runs(ranks, {0: 1})


def test_subsample_users():
    ds = InteractionDataset(10, 30, [[i + 1, i + 2, i + 3] for i in range(10)])
    sub = subsample_users(ds, 0.5, seed=1)
    assert sub.user_count == 5
    used = sorted({i for s in sub.sequences for i in s})
    assert used == list(range(1, sub.item_count + 1))
    assert subsample_users(ds, 1.0) is ds


def test_run_preset_end_to_end(tmp_path):
    res = run_preset("table3_ablation", "synth", tmp_path, seeds=[0, 1], base_overrides=TINY, synth_overrides=TINY_SYNTH)
    for f in ("results.csv", "results.md", "manifest.json", "metrics.png", "curves.png"):
        assert (tmp_path / f).exists(), f
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seeds"] == [0, 1] and man["versions"]["ufnrec"] and len(man["runs"]) == 8
    for run in man["runs"]:
        TrainConfig.from_dict(run["config"])
    s = res.summary()
    assert set(s) == {"backbone", "+FMR", "+FCR", "+UFN"} and all(n == 2 for _, _, n in s.values())
    fcr = [r for r in res.runs if r.arm == "+FCR"]
    assert all(r.mining["n_mined"] > 0 for r in fcr)
    c = res.compare("+UFN", "backbone")
    assert 0 <= c["p_value"] <= 1
    assert "| +UFN |" in (tmp_path / "results.md").read_text()
    st = curve_stats(res.runs[0])
    assert st["best"] >= 0 and st["last_var"] >= 0


def test_sweep_preset_plots(tmp_path):
    run_preset("fig4_sweep_d", "synth", tmp_path, base_overrides=TINY, synth_overrides=TINY_SYNTH,
               arms=["backbone", "+UFN d=0.9", "+UFN d=0.999"])
    assert (tmp_path / "sweep_decay.png").exists()


def test_failed_arm_keeps_partial_results(tmp_path):
    bad = ExperimentPreset("bad", "one arm cannot run", [Arm("ok", {"method": "backbone"}), Arm("broken", {"n_negatives": 500})],
                           seeds=(0,), base=TINY, synth=TINY_SYNTH)
    with pytest.raises(TrainingError, match="broken"):
        run_preset(bad, "synth", tmp_path)
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 3 and ",ok," in rows[1] and "failed" in rows[2]


def test_dataset_path_source(tmp_path, small_corpus):
    small_corpus.save(tmp_path / "c")
    res = run_preset("fig5_curves", tmp_path / "c" / "dataset.txt", tmp_path / "o", base_overrides=TINY)
    assert len(res.runs) == 2
