"""Training negative sampling and false-negative bookkeeping.

A ledger entry is keyed by the training context ``(user, t)`` and the
negative item.  Items move through three disjoint states per context:
the uniform pool, the recorded set (negatives that outscored the positive
in the latest epoch and are replayed as negatives next epoch) and the
false-negative set (recorded often enough to be treated as mined).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .validation import ConfigError, check_choice, check_interval, check_positive_int, check_threshold

logger = logging.getLogger(__name__)

MINING_KINDS = ("ufnrec", "variance", "none")
FN_ACTIONS = ("reverse", "remove", "keep")
COUNT_MODES = ("cumulative", "consecutive")


class Observation(NamedTuple):
    user: int
    t: int
    item: int
    neg_score: float
    pos_score: float
    positive: int | None = None


@dataclass
class TrainingInstance:
    user: int
    t: int
    positive: int
    negatives: list[int] = field(default_factory=list)
    reversed: bool = False

    def __post_init__(self):
        if self.positive in self.negatives:
            raise ValueError(f"({self.user}, {self.t}): positive {self.positive} among negatives")
        if 0 in self.negatives:
            raise ValueError(f"({self.user}, {self.t}): padding index among negatives")


@dataclass
class MiningStrategy:
    kind: str = "ufnrec"
    m: float = 3
    count_mode: str = "cumulative"
    window: int = 5
    mean_quantile: float = 0.9
    var_quantile: float = 0.1
    use_rec: bool = True
    memory: int = 5

    def __post_init__(self):
        check_choice(self.kind, "mining", MINING_KINDS)
        check_choice(self.count_mode, "count_mode", COUNT_MODES)
        self.m = check_threshold(self.m)
        if self.window < 2:
            raise ConfigError("variance window must be >= 2")
        check_interval(self.mean_quantile, "mean_quantile", 0.0, 1.0)
        check_interval(self.var_quantile, "var_quantile", 0.0, 1.0)
        check_positive_int(self.memory, "memory")


class RecordLedger:
    """Per-context hit counters plus the recorded and false-negative sets."""

    def __init__(self, m=3, count_mode: str = "cumulative"):
        self.m = check_threshold(m)
        self.count_mode = check_choice(count_mode, "count_mode", COUNT_MODES)
        self.counts: dict[tuple[int, int, int], int] = {}
        self.rec: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.false: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.epochs_recorded = 0

    # -- queries -----------------------------------------------------------
    def rec_members(self, user: int, t: int, limit: int | None = None) -> list[int]:
        """Recorded items for a context, highest count first then by item index."""
        items = self.rec.get((user, t))
        if not items:
            return []
        ordered = sorted(items, key=lambda i: (-self.counts.get((user, t, i), 0), i))
        return ordered if limit is None else ordered[:limit]

    def false_members(self, user: int, t: int) -> list[int]:
        return sorted(self.false.get((user, t), ()))

    def state(self, user: int, t: int, item: int) -> str:
        if item in self.false.get((user, t), ()):
            return "FALSE"
        if item in self.rec.get((user, t), ()):
            return "REC"
        return "POOL"

    @property
    def n_rec(self) -> int:
        return sum(len(s) for s in self.rec.values())

    @property
    def n_false(self) -> int:
        return sum(len(s) for s in self.false.values())

    def mined_pairs(self) -> set[tuple[int, int]]:
        """Distinct ``(user, item)`` pairs in any false-negative set."""
        return {(u, i) for (u, _), items in self.false.items() for i in items}

    # -- mutation ----------------------------------------------------------
    def record_epoch(self, observations: Iterable) -> "RecordLedger":
        """Apply one epoch of (negative, positive) score comparisons.

        Observations are processed in sorted key order so the result does not
        depend on how per-batch buffers were concatenated.
        """
        obs = sorted((Observation(*o) for o in observations), key=lambda o: (o.user, o.t, o.item))
        for a, b in zip(obs, obs[1:]):
            if (a.user, a.t, a.item) == (b.user, b.t, b.item):
                raise ValueError(f"duplicate observation for {(a.user, a.t, a.item)} in one epoch")
        for o in obs:
            ctx, key = (o.user, o.t), (o.user, o.t, o.item)
            if o.positive is not None and o.item == o.positive:
                raise ValueError(f"observation item {o.item} equals the positive at {ctx}")
            if o.item in self.false.get(ctx, ()):
                raise ValueError(f"item {o.item} already a false negative at {ctx}")
            if o.neg_score > o.pos_score:
                count = self.counts.get(key, 0) + 1
                self.counts[key] = count
                if count >= self.m:
                    self.rec[ctx].discard(o.item)
                    self.false[ctx].add(o.item)
                else:
                    self.rec[ctx].add(o.item)
            else:
                if ctx in self.rec:
                    self.rec[ctx].discard(o.item)
                if self.count_mode == "consecutive" and key in self.counts:
                    self.counts[key] = 0
        for ctx in [c for c, s in self.rec.items() if not s]:
            del self.rec[ctx]
        self.epochs_recorded += 1
        return self

    def mark_false(self, user: int, t: int, items: Iterable[int]) -> None:
        """Move items into the false set directly (used by the variance miner)."""
        ctx = (user, t)
        for i in items:
            self.rec.get(ctx, set()).discard(i)
            self.false[ctx].add(int(i))

    def dump(self, fh) -> None:
        """Write ``user<TAB>t<TAB>item<TAB>count<TAB>state`` lines, sorted."""
        rows = []
        for (u, t), items in self.rec.items():
            rows += [(u, t, i, self.counts.get((u, t, i), 0), "REC") for i in items]
        for (u, t), items in self.false.items():
            rows += [(u, t, i, self.counts.get((u, t, i), 0), "FALSE") for i in items]
        for row in sorted(rows):
            fh.write("\t".join(map(str, row)) + "\n")


# --------------------------------------------------------------------------
# sampling


def uniform_fill(rng: np.random.Generator, k: int, vocab: int, excluded) -> list[int]:
    """``k`` distinct uniform draws from ``[1, vocab]`` avoiding ``excluded``."""
    if k <= 0:
        return []
    n_excluded = sum(1 for i in excluded if 1 <= i <= vocab)
    available = vocab - n_excluded
    if available < k:
        raise ConfigError(f"cannot draw {k} negatives: only {available} of {vocab} items available")
    if n_excluded * 2 > vocab:
        pool = np.setdiff1d(np.arange(1, vocab + 1), np.fromiter(excluded, dtype=np.int64))
        return [int(i) for i in rng.choice(pool, size=k, replace=False)]
    out: list[int] = []
    while len(out) < k:
        for i in rng.integers(1, vocab + 1, size=k - len(out)):
            i = int(i)
            if i not in excluded and i not in out:
                out.append(i)
    return out


def draw_negatives(
    ledger: RecordLedger | None,
    user: int,
    t: int,
    n: int,
    vocab: int,
    exclusions,
    rng: np.random.Generator,
    use_rec: bool = True,
) -> list[int]:
    """Recorded items for ``(user, t)`` first (at most ``n``), then uniform fill."""
    rec = []
    if ledger is not None and use_rec:
        rec = [i for i in ledger.rec_members(user, t, limit=n) if i not in exclusions]
    if ledger is not None:
        false = ledger.false.get((user, t))
        if false:
            exclusions = set(exclusions) | false
    if rec:
        exclusions = set(exclusions) | set(rec)
    return rec + uniform_fill(rng, n - len(rec), vocab, exclusions)


def reverse_labels(ledger: RecordLedger, instance: TrainingInstance) -> list[TrainingInstance]:
    """The instance followed by one positive-labelled term per false negative."""
    out = [instance]
    for f in ledger.false_members(instance.user, instance.t):
        if f == instance.positive:
            raise ValueError(f"false negative {f} equals the positive at ({instance.user}, {instance.t})")
        out.append(TrainingInstance(instance.user, instance.t, f, [], reversed=True))
    return out


def removal_filter(
    mined,
    instance: TrainingInstance,
    vocab: int,
    rng: np.random.Generator,
    exclusions=(),
) -> TrainingInstance:
    """Replace any negative found in ``mined`` by a fresh uniform draw.

    ``mined`` is either a set of items or a ledger (its false set for the
    instance's context is used).  Mined items are never added as positives.
    """
    if isinstance(mined, RecordLedger):
        mined = mined.false.get((instance.user, instance.t), set())
    mined = set(mined)
    keep = [i for i in instance.negatives if i not in mined]
    if len(keep) == len(instance.negatives):
        return instance
    excluded = set(exclusions) | mined | set(keep) | {instance.positive}
    fresh = uniform_fill(rng, len(instance.negatives) - len(keep), vocab, excluded)
    return TrainingInstance(instance.user, instance.t, instance.positive, keep + fresh)


# --------------------------------------------------------------------------
# variance-based miner (simplified high-mean / low-variance heuristic)


def mine_variance_based(score_history: dict, mean_quantile: float = 0.9, var_quantile: float = 0.1):
    """Flag candidates whose mean score is high and whose score variance is low.

    ``score_history`` maps ``(user, t, item)`` to a sequence of recent sigmoid
    scores.  A candidate is flagged when its mean is strictly above the
    ``mean_quantile`` of all candidate means and its variance is strictly
    below the ``var_quantile`` of all candidate variances.  Candidates with
    fewer than two scores are ignored.
    """
    keys = [k for k, h in score_history.items() if len(h) >= 2]
    if not keys:
        if score_history:
            logger.warning("variance miner: no candidate has >= 2 scores of history")
        return set()
    hist = [np.asarray(score_history[k], dtype=np.float64) for k in keys]
    means = np.array([h.mean() for h in hist])
    variances = np.array([h.var() for h in hist])
    mean_cut = np.quantile(means, mean_quantile)
    var_cut = np.quantile(variances, var_quantile)
    hit = (means > mean_cut) & (variances < var_cut)
    return {keys[j] for j in np.flatnonzero(hit)}


class VarianceTracker:
    """Keeps the last ``window`` scores of each tracked candidate.

    With ``use_rec`` the candidates are items that ever outscored the positive
    (ledger count >= 1).  Otherwise each context keeps a memory of its
    ``memory`` most recently drawn negatives.
    """

    def __init__(self, strategy: MiningStrategy):
        self.strategy = strategy
        self.history: dict[tuple[int, int, int], deque] = {}
        self.memory: dict[tuple[int, int], deque] = defaultdict(lambda: deque(maxlen=strategy.memory))

    def tracked(self, ledger: RecordLedger, user: int, t: int) -> list[int]:
        ctx = (user, t)
        false = ledger.false.get(ctx, ())
        if self.strategy.use_rec:
            items = [i for (u, tt, i), c in self._ledger_index(ledger).get(ctx, ()) if c > 0]
        else:
            items = list(self.memory.get(ctx, ()))
        return [i for i in items if i not in false]

    def _ledger_index(self, ledger):
        # rebuilt lazily once per epoch; counts change only at epoch boundaries
        if getattr(self, "_index_epoch", None) != ledger.epochs_recorded:
            index = defaultdict(list)
            for (u, t, i), c in ledger.counts.items():
                index[(u, t)].append(((u, t, i), c))
            self._index = index
            self._index_epoch = ledger.epochs_recorded
        return self._index

    def remember_draws(self, user: int, t: int, items: Iterable[int]) -> None:
        mem = self.memory[(user, t)]
        for i in items:
            if i in mem:
                mem.remove(i)
            mem.append(i)

    def observe(self, user: int, t: int, item: int, score: float) -> None:
        key = (user, t, item)
        h = self.history.get(key)
        if h is None:
            h = self.history[key] = deque(maxlen=self.strategy.window)
        h.append(float(score))

    def mine(self, ledger: RecordLedger) -> int:
        """Run the miner over current histories and move hits to the false set."""
        live = {k: h for k, h in self.history.items() if k[2] not in ledger.false.get(k[:2], ())}
        mined = mine_variance_based(live, self.strategy.mean_quantile, self.strategy.var_quantile)
        for (u, t, i) in sorted(mined):
            ledger.mark_false(u, t, [i])
            self.history.pop((u, t, i), None)
        return len(mined)
