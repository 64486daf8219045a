"""Latent-factor synthetic corpora with planted (withheld) positives.

Each user draws a set of distinct items from a softmax over affinities
``<p_u, q_i> / sqrt(dim)`` at temperature ``noise_temp`` (Gumbel top-k).
A ``plant_rate`` fraction of the drawn items, picked among those at or
above the user's median drawn affinity, is withheld from the visible log.
Those withheld items are the ground-truth false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import InteractionDataset, save_dataset
from .validation import ConfigError, check_interval, check_positive_int


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    latent_dim: int = 16
    seq_len_range: tuple = (8, 24)
    plant_rate: float = 0.2
    noise_temp: float = 0.3
    seed: int = 0

    def validate(self) -> "SynthConfig":
        check_positive_int(self.n_users, "n_users")
        check_positive_int(self.n_items, "n_items")
        check_positive_int(self.latent_dim, "latent_dim")
        check_interval(self.plant_rate, "plant_rate", 0.0, 1.0, closed_high=False)
        lo, hi = self.seq_len_range
        if self.n_items < 200:
            raise ConfigError("n_items must be >= 200")
        if lo > hi or hi > self.n_items:
            raise ConfigError(f"bad seq_len_range {self.seq_len_range}")
        if lo - _n_planted(lo, self.plant_rate) < 3:
            raise ConfigError(f"seq_len_range min {lo} leaves fewer than 3 visible items")
        if not self.noise_temp > 0:
            raise ConfigError("noise_temp must be > 0")
        return self


def _n_planted(length: int, rate: float) -> int:
    return int(np.floor(rate * length + 0.5))


@dataclass
class SynthCorpus:
    dataset: InteractionDataset
    planted: dict[int, set[int]]
    user_factors: np.ndarray
    item_factors: np.ndarray
    config: SynthConfig = field(default=None)

    def affinity(self) -> np.ndarray:
        """Users x (items + 1) affinity matrix; column 0 is padding (-inf)."""
        a = self.user_factors @ self.item_factors.T / np.sqrt(self.user_factors.shape[1])
        return np.hstack([np.full((a.shape[0], 1), -np.inf), a])

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(self.dataset, out / "dataset.txt")
        with (out / "planted.tsv").open("w") as fh:
            for u in sorted(self.planted):
                for i in sorted(self.planted[u]):
                    fh.write(f"{u}\t{i}\n")


def generate(cfg: SynthConfig | None = None) -> SynthCorpus:
    cfg = (cfg or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    users = rng.standard_normal((cfg.n_users, cfg.latent_dim))
    items = rng.standard_normal((cfg.n_items, cfg.latent_dim))
    affinity = users @ items.T / np.sqrt(cfg.latent_dim)
    lo, hi = cfg.seq_len_range
    lengths = rng.integers(lo, hi + 1, size=cfg.n_users)

    sequences, planted = [], {}
    for u in range(cfg.n_users):
        keys = affinity[u] / cfg.noise_temp + rng.gumbel(size=cfg.n_items)
        drawn = np.argsort(-keys, kind="stable")[: lengths[u]]
        k = _n_planted(len(drawn), cfg.plant_rate)
        chosen = np.array([], dtype=np.int64)
        if k:
            a = affinity[u, drawn]
            eligible = drawn[a >= np.median(a)]
            chosen = rng.choice(eligible, size=min(k, len(eligible)), replace=False)
        visible = np.setdiff1d(drawn, chosen)
        visible = visible[rng.permutation(len(visible))]
        sequences.append([int(i) + 1 for i in visible])
        planted[u] = {int(i) + 1 for i in chosen}

    ds = InteractionDataset(
        user_count=cfg.n_users,
        item_count=cfg.n_items,
        sequences=sequences,
        user_keys=[str(u) for u in range(cfg.n_users)],
        item_keys=["<pad>"] + [str(i) for i in range(1, cfg.n_items + 1)],
    )
    return SynthCorpus(ds, planted, users, items, cfg)


def _mined_pairs(mined) -> set[tuple[int, int]]:
    if hasattr(mined, "mined_pairs"):
        return mined.mined_pairs()
    pairs = set()
    for key, items in mined.items():
        user = key[0] if isinstance(key, tuple) else key
        pairs.update((int(user), int(i)) for i in items)
    return pairs


def score_mining(corpus: SynthCorpus, mined) -> dict:
    """Precision/recall of mined ``(user, item)`` pairs against the planted sets.

    ``mined`` is a ledger or a mapping from ``(user, t)`` (or ``user``) to
    item sets; an item mined at several steps counts once per user.  The
    random baseline is the precision expected from picking, for each mined
    pair, a uniform item outside that user's visible history.
    """
    pairs = _mined_pairs(mined)
    n_planted = sum(len(s) for s in corpus.planted.values())
    ds = corpus.dataset
    if not pairs:
        return {"n_mined": 0, "precision": None, "recall": 0.0, "random_precision": None, "lift": None}
    hits = sum(1 for u, i in pairs if i in corpus.planted.get(u, ()))
    per_user = {}
    for u, _ in pairs:
        per_user[u] = per_user.get(u, 0) + 1
    expected = sum(
        c * len(corpus.planted.get(u, ())) / (ds.item_count - len(set(ds.sequences[u])))
        for u, c in per_user.items()
    )
    precision = hits / len(pairs)
    random_precision = expected / len(pairs)
    return {
        "n_mined": len(pairs),
        "hits": hits,
        "precision": precision,
        "recall": hits / n_planted if n_planted else 0.0,
        "random_precision": random_precision,
        "lift": precision / random_precision if random_precision > 0 else None,
    }
