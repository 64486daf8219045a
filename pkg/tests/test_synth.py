import numpy as np
import pytest

from ufnrec.dataio import load_dataset
from ufnrec.synth import SynthConfig, generate, score_mining
from ufnrec.validation import ConfigError

SMALL = dict(n_users=60, n_items=200, seq_len_range=(8, 16))


def test_no_planting():
    c = generate(SynthConfig(plant_rate=0.0, **SMALL))
    assert all(not s for s in c.planted.values())


def test_deterministic_per_seed():
    a, b = generate(SynthConfig(seed=4, **SMALL)), generate(SynthConfig(seed=4, **SMALL))
    assert a.dataset == b.dataset and a.planted == b.planted
    assert generate(SynthConfig(seed=5, **SMALL)).dataset != a.dataset


def test_planted_disjoint_and_counted():
    cfg = SynthConfig(plant_rate=0.25, **SMALL)
    c = generate(cfg)
    for u, seq in enumerate(c.dataset.sequences):
        p = c.planted[u]
        assert not p & set(seq)
        total = len(seq) + len(p)
        assert len(p) == int(np.floor(0.25 * total + 0.5))
        assert len(set(seq)) == len(seq)


def test_planted_at_or_above_median_affinity():
    c = generate(SynthConfig(plant_rate=0.3, **SMALL))
    aff = c.affinity()
    for u, seq in enumerate(c.dataset.sequences):
        drawn = list(seq) + sorted(c.planted[u])
        med = np.median(aff[u, drawn])
        assert all(aff[u, i] >= med for i in c.planted[u])


def test_low_temperature_picks_top_affinity():
    cfg = SynthConfig(noise_temp=1e-6, plant_rate=0.0, **SMALL)
    c = generate(cfg)
    aff = c.affinity()
    for u, seq in enumerate(c.dataset.sequences):
        top = set(np.argsort(-aff[u, 1:])[: len(seq)] + 1)
        assert set(seq) == top


def test_validation_errors():
    with pytest.raises(ConfigError):
        generate(SynthConfig(n_items=100))
    with pytest.raises(ConfigError):
        generate(SynthConfig(seq_len_range=(3, 10), plant_rate=0.5))
    with pytest.raises(ConfigError):
        generate(SynthConfig(plant_rate=1.0))


def test_save_files(tmp_path):
    c = generate(SynthConfig(**SMALL))
    c.save(tmp_path)
    assert load_dataset(tmp_path / "dataset.txt") == c.dataset
    lines = (tmp_path / "planted.tsv").read_text().splitlines()
    assert len(lines) == sum(len(s) for s in c.planted.values())
    u, i = lines[0].split("\t")
    assert int(i) in c.planted[int(u)]


def test_perfect_and_empty_mining_scores():
    c = generate(SynthConfig(**SMALL))
    perfect = score_mining(c, {(u, 1): s for u, s in c.planted.items()})
    assert perfect["precision"] == 1.0 and perfect["recall"] == 1.0
    assert score_mining(c, {})["recall"] == 0.0


def test_random_baseline_matches_monte_carlo():
    c = generate(SynthConfig(**SMALL))
    rng = np.random.default_rng(0)
    V = c.dataset.item_count
    mined = {}
    for u, seq in enumerate(c.dataset.sequences[:40]):
        pool = np.setdiff1d(np.arange(1, V + 1), seq)
        mined[(u, 1)] = set(rng.choice(pool, 5, replace=False).tolist())
    expected = score_mining(c, mined)["random_precision"]
    hits = []
    for _ in range(400):
        sim = {}
        for (u, t), _ in mined.items():
            pool = np.setdiff1d(np.arange(1, V + 1), c.dataset.sequences[u])
            sim[(u, t)] = set(rng.choice(pool, 5, replace=False).tolist())
        hits.append(score_mining(c, sim)["precision"])
    se = np.std(hits) / np.sqrt(len(hits))
    assert abs(np.mean(hits) - expected) < 4 * se
