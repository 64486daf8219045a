"""Interaction log ingestion, dense id mapping, leave-one-out splits and
evaluation candidate sampling."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import DataError, ConfigError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
N_EVAL_NEGATIVES = 100

# Column layouts for the built-in presets (name -> (delimiter, columns, header)).
_PRESETS = {
    "csv": (",", ("user", "item", "timestamp"), None),
    "tsv": ("\t", ("user", "item", "timestamp"), None),
    "amazon-ratings": (",", ("user", "item", "rating", "timestamp"), False),
}


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences over dense 1-based item ids.

    ``sequences[u]`` is the list of item indices of dense user ``u``; index 0
    is reserved for padding.  ``user_keys``/``item_keys`` map dense indices
    back to external keys (``item_keys[0]`` is the padding placeholder).
    """

    user_count: int
    item_count: int
    sequences: list[list[int]]
    user_keys: list[str] = field(default_factory=list)
    item_keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.sequences) != self.user_count:
            raise DataError(
                f"user_count={self.user_count} but {len(self.sequences)} sequences"
            )
        for u, seq in enumerate(self.sequences):
            for i in seq:
                if not 1 <= i <= self.item_count:
                    raise DataError(f"user {u}: item index {i} outside [1, {self.item_count}]")

    @property
    def n_actions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (
            self.user_count == other.user_count
            and self.item_count == other.item_count
            and self.sequences == other.sequences
        )


@dataclass
class SplitDataset:
    train: list[list[int]]
    valid_target: list[int]
    test_target: list[int]

    @property
    def user_count(self) -> int:
        return len(self.train)

    def history(self, user: int, stage: str) -> list[int]:
        """Input prefix used to score candidates at ``stage``."""
        if stage == "valid":
            return self.train[user]
        if stage == "test":
            return self.train[user] + [self.valid_target[user]]
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, user: int, stage: str) -> int:
        if stage == "valid":
            return self.valid_target[user]
        if stage == "test":
            return self.test_target[user]
        raise ValueError(f"unknown stage {stage!r}")


@dataclass(frozen=True)
class EvalCandidateSet:
    user: int
    positive: int
    negatives: tuple[int, ...]

    @property
    def items(self) -> np.ndarray:
        """Positive first, then the negatives."""
        return np.asarray((self.positive,) + self.negatives, dtype=np.int64)


def load_interactions(
    path,
    format: str = "csv",
    columns: dict | None = None,
    header: bool | None = None,
    max_malformed_frac: float = 0.01,
) -> list[Interaction]:
    """Parse a delimiter-separated interaction log.

    ``columns`` maps the logical fields ``user``, ``item`` and ``timestamp``
    to either a column name (header files) or a 0-based column position,
    overriding the preset layout.  With ``header=None`` a header row is
    detected when its timestamp cell is not an integer.
    """
    if format not in _PRESETS:
        raise ConfigError(f"unknown format {format!r}; expected one of {sorted(_PRESETS)}")
    delimiter, layout, preset_header = _PRESETS[format]
    if header is None:
        header = preset_header
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no interactions")

    positions = {name: k for k, name in enumerate(layout)}
    names = None
    if header is None:
        ts_col = positions["timestamp"]
        header = len(rows[0]) <= ts_col or not _is_int(rows[0][ts_col])
    if header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        positions = {
            k: names.index(k) if k in names else v for k, v in positions.items()
        }
    for key, col in (columns or {}).items():
        if key not in ("user", "item", "timestamp"):
            raise ConfigError(f"unknown column role {key!r}")
        if isinstance(col, str):
            if names is None or col not in names:
                raise ConfigError(f"column {col!r} not found in header of {path}")
            col = names.index(col)
        positions[key] = int(col)

    out: list[Interaction] = []
    bad = 0
    ucol, icol, tcol = positions["user"], positions["item"], positions["timestamp"]
    for row in rows:
        try:
            ts = float(row[tcol].strip())
            user, item = row[ucol].strip(), row[icol].strip()
        except (IndexError, ValueError):
            bad += 1
            continue
        if not user or not item or not np.isfinite(ts):
            bad += 1
            continue
        out.append(Interaction(user, item, int(ts)))
    if not out:
        raise DataError(f"{path}: no interactions ({bad} malformed rows)")
    if bad:
        logger.warning("%s: skipped %d malformed rows of %d", path, bad, len(rows))
        if bad > max_malformed_frac * len(rows):
            raise DataError(
                f"{path}: {bad} of {len(rows)} rows malformed "
                f"(limit {max_malformed_frac:.0%})"
            )
    return out


def _is_int(s: str) -> bool:
    try:
        int(float(s))
    except ValueError:
        return False
    return True


def build_dataset(
    interactions: list[Interaction], min_seq_len: int = 3, k_core: int = 0
) -> InteractionDataset:
    """Group interactions per user in time order and assign dense ids.

    Ties in timestamp keep input order.  With ``k_core > 0`` users and items
    with fewer than ``k_core`` interactions are removed repeatedly until
    nothing changes; the ``min_seq_len`` user filter is applied in the same
    fixed-point loop.
    """
    if min_seq_len < 3:
        raise ConfigError("min_seq_len must be >= 3 (train, valid and test need a target)")
    if k_core < 0:
        raise ConfigError("k_core must be >= 0")

    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, it in enumerate(interactions):
        per_user[it.user_id].append((it.timestamp, order, it.item_id))
    seqs = {u: [item for _, _, item in sorted(rows)] for u, rows in per_user.items()}

    while True:
        changed = False
        user_min = max(min_seq_len, k_core)
        for u in [u for u, s in seqs.items() if len(s) < user_min]:
            del seqs[u]
            changed = True
        if k_core > 0:
            counts = Counter(i for s in seqs.values() for i in s)
            rare = {i for i, c in counts.items() if c < k_core}
            if rare:
                changed = True
                seqs = {u: [i for i in s if i not in rare] for u, s in seqs.items()}
        if not changed:
            break
    if not seqs:
        raise DataError("dataset is empty after filtering")

    user_keys = sorted(seqs)
    item_keys = sorted({i for s in seqs.values() for i in s})
    item_index = {k: n + 1 for n, k in enumerate(item_keys)}
    sequences = [[item_index[i] for i in seqs[u]] for u in user_keys]
    return InteractionDataset(
        user_count=len(user_keys),
        item_count=len(item_keys),
        sequences=sequences,
        user_keys=user_keys,
        item_keys=["<pad>"] + item_keys,
    )


def split_leave_one_out(ds: InteractionDataset) -> SplitDataset:
    """Last item -> test, second-to-last -> validation, the rest -> train."""
    train, valid, test = [], [], []
    for seq in ds.sequences:
        train.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    return SplitDataset(train, valid, test)


def sample_eval_candidates(
    ds: InteractionDataset,
    split: SplitDataset,
    user: int,
    stage: str,
    rng_seed: int,
    neg_mode: str = "exclude-history",
) -> EvalCandidateSet:
    """Draw the 100 ranking negatives for one user at one stage.

    The draw depends only on ``(rng_seed, user, stage)`` so candidate sets are
    reproducible and shared between runs that use the same seed.
    """
    if ds.item_count < N_EVAL_NEGATIVES + 1:
        raise ConfigError(
            f"item_count={ds.item_count}; at least {N_EVAL_NEGATIVES + 1} items needed"
        )
    positive = split.target(user, stage)
    if neg_mode == "exclude-history":
        excluded = set(ds.sequences[user])
    elif neg_mode == "exclude-positive-only":
        excluded = set()
    else:
        raise ConfigError(f"unknown eval negative mode {neg_mode!r}")
    excluded.add(positive)
    pool = np.setdiff1d(np.arange(1, ds.item_count + 1), np.fromiter(excluded, dtype=np.int64))
    if len(pool) < N_EVAL_NEGATIVES:
        raise ConfigError(
            f"user {user}: only {len(pool)} items available for {N_EVAL_NEGATIVES} negatives"
        )
    rng = np.random.default_rng([rng_seed, user, 0 if stage == "valid" else 1])
    negatives = rng.choice(pool, size=N_EVAL_NEGATIVES, replace=False)
    return EvalCandidateSet(user, positive, tuple(int(i) for i in negatives))


def build_eval_candidates(
    ds: InteractionDataset,
    split: SplitDataset,
    stage: str,
    rng_seed: int,
    neg_mode: str = "exclude-history",
    users=None,
) -> list[EvalCandidateSet]:
    users = range(ds.user_count) if users is None else users
    return [sample_eval_candidates(ds, split, u, stage, rng_seed, neg_mode) for u in users]


def save_dataset(ds: InteractionDataset, path) -> None:
    """Write the canonical line format: ``#version 1`` then one user per line."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#version {FORMAT_VERSION}\n")
        fh.write(f"#items {ds.item_count}\n")
        for u, seq in enumerate(ds.sequences):
            fh.write(f"{u}\t{' '.join(map(str, seq))}\n")


def load_dataset(path) -> InteractionDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"#version {FORMAT_VERSION}":
        raise DataError(f"{path}: missing '#version {FORMAT_VERSION}' header")
    item_count = None
    sequences: list[list[int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#items "):
            item_count = int(line.split()[1])
            continue
        if line.startswith("#"):
            continue
        try:
            u, items = line.split("\t")
            seq = [int(i) for i in items.split()]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed line") from exc
        if int(u) != len(sequences):
            raise DataError(f"{path}:{lineno}: expected user {len(sequences)}, got {u}")
        sequences.append(seq)
    if item_count is None:
        item_count = max((max(s) for s in sequences if s), default=0)
    return InteractionDataset(
        user_count=len(sequences),
        item_count=item_count,
        sequences=sequences,
        user_keys=[str(u) for u in range(len(sequences))],
        item_keys=["<pad>"] + [str(i) for i in range(1, item_count + 1)],
    )
