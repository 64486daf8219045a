"""Leave-one-out ranking evaluation over sampled candidate sets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import binomtest

from .dataio import EvalCandidateSet, SplitDataset
from .encoder import pad_sequences

DEFAULT_KS = (1, 5, 10)


@dataclass
class RankingReport:
    per_user_rank: dict[int, int]
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    candidates_digest: str | None = None

    def as_dict(self) -> dict:
        out = {f"HR@{k}": v for k, v in self.hr.items()}
        out.update({f"NDCG@{k}": v for k, v in self.ndcg.items()})
        return out

    def to_text(self, with_ranks: bool = False) -> str:
        lines = ["metric\tvalue"]
        lines += [f"{k}\t{v:.6f}" for k, v in self.as_dict().items()]
        if with_ranks:
            lines += ["", "user\trank"]
            lines += [f"{u}\t{r}" for u, r in sorted(self.per_user_rank.items())]
        return "\n".join(lines) + "\n"


def rank_from_scores(pos_score: float, neg_scores) -> int:
    """1 + number of negatives scoring at least as high as the positive."""
    return 1 + int(np.count_nonzero(np.asarray(neg_scores) >= pos_score))


def rank_candidates(model, user_seq_prefix, candidates: EvalCandidateSet) -> int:
    """Rank of the positive among the 101 candidates (ties count against it)."""
    return int(batch_ranks(model, [user_seq_prefix], [candidates])[0])


@torch.no_grad()
def batch_ranks(model, prefixes, candidate_sets, batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    ranks = np.empty(len(prefixes), dtype=np.int64)
    try:
        for lo in range(0, len(prefixes), batch_size):
            chunk = slice(lo, lo + batch_size)
            seqs = pad_sequences(prefixes[chunk], model.cfg.max_len)
            items = np.stack([c.items for c in candidate_sets[chunk]])
            rep = model.last_representation(torch.as_tensor(seqs))
            logits = model.score_items(rep, torch.as_tensor(items)).cpu().numpy()
            ranks[chunk] = 1 + np.count_nonzero(logits[:, 1:] >= logits[:, :1], axis=1)
    finally:
        model.train(was_training)
    return ranks


def compute_metrics(ranks, ks=DEFAULT_KS, users=None) -> RankingReport:
    """HR@k and NDCG@k from 1-based ranks of a single relevant item."""
    ranks = np.asarray(list(ranks.values()) if isinstance(ranks, dict) else ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no ranks to evaluate")
    if users is None:
        users = range(len(ranks))
    gains = 1.0 / np.log2(ranks + 1.0)
    hr = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, gains, 0.0))) for k in ks}
    return RankingReport(dict(zip(users, ranks.tolist())), hr, ndcg)


def evaluate(model, split: SplitDataset, candidates: list[EvalCandidateSet], stage: str, ks=DEFAULT_KS):
    users = [c.user for c in candidates]
    prefixes = [split.history(u, stage) for u in users]
    ranks = batch_ranks(model, prefixes, candidates)
    report = compute_metrics(ranks, ks, users)
    report.candidates_digest = candidates_digest(candidates)
    return report


def candidates_digest(candidates: list[EvalCandidateSet]) -> str:
    h = hashlib.sha1()
    for c in candidates:
        h.update(np.asarray((c.user, c.positive) + c.negatives, dtype=np.int64).tobytes())
    return h.hexdigest()


def sign_test(ranks_a: dict, ranks_b: dict) -> dict:
    """Paired sign test over users: does run A rank the positive better than B?

    Returns counts of users where A wins (lower rank), B wins, ties, and the
    two-sided exact binomial p-value over the non-tied pairs.
    """
    if set(ranks_a) != set(ranks_b):
        raise ValueError("runs were evaluated on different users")
    a = np.array([ranks_a[u] for u in sorted(ranks_a)], dtype=np.float64)
    b = np.array([ranks_b[u] for u in sorted(ranks_a)], dtype=np.float64)
    wins, losses = int(np.sum(a < b)), int(np.sum(a > b))
    n = wins + losses
    p = 1.0 if n == 0 else float(binomtest(wins, n, 0.5).pvalue)
    return {"a_better": wins, "b_better": losses, "ties": int(len(a) - n), "p_value": p}
