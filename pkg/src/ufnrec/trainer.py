"""Training loop: warmup on uniform negatives, then mining, label reversal,
EMA teacher updates and the consistency-regularized objective."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataio import InteractionDataset, SplitDataset, build_eval_candidates
from .distill import EMATeacher, soft_labels
from .encoder import EncoderConfig, SequenceEncoder, bce_with_logits, save_checkpoint
from .evaluation import RankingReport, evaluate
from .negatives import (
    FN_ACTIONS,
    MINING_KINDS,
    MiningStrategy,
    Observation,
    RecordLedger,
    VarianceTracker,
    draw_negatives,
    uniform_fill,
)
from .validation import ConfigError, TrainingError, check_choice, check_interval, check_positive_int

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1


@dataclass
class TrainConfig:
    # encoder
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout_rate: float = 0.2
    encoder_kind: str = "self_attention"
    share_embeddings: bool = True
    dtype: str = "float32"
    # optimisation
    method: str = "ufnrec"
    learning_rate: float = 0.001
    batch_size: int = 128
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    max_epochs: int = 200
    early_stop_patience: int = 10
    seed: int = 0
    # warmup
    warmup: str = "relative"
    warmup_epochs: int = 10
    warmup_rel_tol: float = 0.01
    warmup_window: int = 2
    warmup_cap: int = 50
    # negatives and mining
    n_negatives: int = 1
    train_neg_exclude_history: bool = True
    mining: str = "ufnrec"
    m: float | None = 3
    count_mode: str = "cumulative"
    fn_action: str = "reverse"
    variance_window: int = 5
    variance_mean_quantile: float = 0.9
    variance_var_quantile: float = 0.1
    variance_use_rec: bool = True
    variance_memory: int = 5
    # distillation
    alpha: float = 0.2
    decay: float = 0.999
    eval_with: str = "student"
    # evaluation
    eval_seed: int = 2024
    eval_neg_mode: str = "exclude-history"
    track_test: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        if isinstance(d["m"], float) and math.isinf(d["m"]):
            d["m"] = None
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_len=self.max_len,
            dropout_rate=self.dropout_rate,
            encoder_kind=self.encoder_kind,
            share_embeddings=self.share_embeddings,
            dtype=self.dtype,
        ).validate()

    def strategy(self) -> MiningStrategy:
        return MiningStrategy(
            kind=self.mining,
            m=self.m,
            count_mode=self.count_mode,
            window=self.variance_window,
            mean_quantile=self.variance_mean_quantile,
            var_quantile=self.variance_var_quantile,
            use_rec=self.variance_use_rec if self.mining == "variance" else True,
            memory=self.variance_memory,
        )

    def validate(self) -> "TrainConfig":
        self.encoder_config()
        self.strategy()
        check_choice(self.method, "method", ("ufnrec", "backbone"))
        check_choice(self.optimizer, "optimizer", ("adam", "sgd"))
        check_choice(self.warmup, "warmup", ("relative", "fixed"))
        check_choice(self.mining, "mining", MINING_KINDS)
        check_choice(self.fn_action, "fn_action", FN_ACTIONS)
        check_choice(self.eval_with, "eval_with", ("student", "teacher"))
        check_choice(self.eval_neg_mode, "eval_neg_mode", ("exclude-history", "exclude-positive-only"))
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.max_epochs, "max_epochs")
        check_positive_int(self.early_stop_patience, "early_stop_patience")
        check_positive_int(self.warmup_epochs, "warmup_epochs", allow_zero=True)
        check_positive_int(self.warmup_window, "warmup_window")
        check_positive_int(self.warmup_cap, "warmup_cap", allow_zero=True)
        check_positive_int(self.n_negatives, "n_negatives")
        check_interval(self.decay, "decay", 0.0, 1.0)
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        return self


@dataclass
class EpochReport:
    epoch: int
    phase: str
    L_basic: float
    L_con: float
    L_final: float
    n_rec: int
    n_false: int
    valid_hr10: float
    valid_ndcg10: float
    wall_time: float
    test_hr10: float | None = None
    test_ndcg10: float | None = None
    n_reversed_terms: int = 0
    n_consistency_terms: int = 0
    n_negative_terms: int = 0

    def to_json(self) -> str:
        return json.dumps({"schema": REPORT_SCHEMA, **asdict(self)}, sort_keys=True)


class TrainingData:
    """Padded per-user training views built once from a split.

    Each user contributes the contexts ``t = 1 .. len(train) - 1``: the
    prefix ``train[:t]`` must predict ``train[t]``.  Only the last
    ``max_len`` contexts of a long sequence are used.
    """

    def __init__(self, ds: InteractionDataset, split: SplitDataset, max_len: int, exclude_history: bool = True):
        self.item_count = ds.item_count
        self.inputs, self.targets, self.t_index, self.exclusions = [], [], [], []
        for seq in split.train:
            n = min(len(seq) - 1, max_len)
            if n <= 0:
                self.inputs.append([]), self.targets.append([]), self.t_index.append([])
            else:
                self.inputs.append(seq[-n - 1:-1])
                self.targets.append(seq[-n:])
                self.t_index.append(list(range(len(seq) - n, len(seq))))
            self.exclusions.append(frozenset(seq) if exclude_history else frozenset())
        self.users = np.array([u for u, s in enumerate(self.inputs) if s], dtype=np.int64)
        self.n_instances = sum(len(s) for s in self.targets)
        if self.n_instances == 0:
            raise ConfigError("no training instances: every train prefix has length < 2")

    def batches(self, rng: np.random.Generator, batch_size: int):
        order = self.users[rng.permutation(len(self.users))]
        for lo in range(0, len(order), batch_size):
            users = order[lo:lo + batch_size]
            width = max(len(self.inputs[u]) for u in users)
            seqs = np.zeros((len(users), width), dtype=np.int64)
            pos = np.zeros_like(seqs)
            tks = np.full_like(seqs, -1)
            for r, u in enumerate(users):
                k = len(self.inputs[u])
                seqs[r, width - k:] = self.inputs[u]
                pos[r, width - k:] = self.targets[u]
                tks[r, width - k:] = self.t_index[u]
            yield users, seqs, pos, tks


def _instances(users, tks):
    rows, cols = np.nonzero(tks >= 0)
    return [(r, c, int(users[r]), int(tks[r, c])) for r, c in zip(rows, cols)]


def _basic_terms(model, seqs, pos, neg):
    reps, valid = model(torch.as_tensor(seqs))
    validf = valid.to(reps.dtype)
    pos_logits = model.score_items(reps, torch.as_tensor(pos))
    neg_logits = model.score_items(reps, torch.as_tensor(neg))
    per_instance = (bce_with_logits(pos_logits, 1.0) + bce_with_logits(neg_logits, 0.0).sum(-1)) * validf
    return reps, validf, pos_logits, neg_logits, per_instance


@dataclass
class BatchObjective:
    basic: torch.Tensor
    consistency: torch.Tensor | None
    final: torch.Tensor
    n_instances: torch.Tensor
    reps: torch.Tensor
    pos_logits: torch.Tensor
    neg_logits: torch.Tensor


def batch_objective(model, seqs, pos, neg, fn=None, fmask=None, fn_label=1.0, y_hat=None, alpha=0.0) -> BatchObjective:
    """Mean over valid contexts of ``L_basic + alpha * L_con``.

    ``fn``/``fmask`` hold the mined items per context (shape ``seqs.shape +
    (k,)``).  They enter the basic loss with label ``fn_label`` (1 for
    reversed labels, 0 when kept as negatives, ``None`` to skip) and, when
    ``y_hat`` is given, the consistency loss against those soft labels.
    """
    reps, validf, pos_logits, neg_logits, per_instance = _basic_terms(model, seqs, pos, neg)
    n_inst = validf.sum()
    basic = per_instance
    con = None
    if fn is not None:
        fn_t = torch.as_tensor(fn)
        fmask_t = torch.as_tensor(fmask).to(reps.dtype)
        fn_logits = model.score_items(reps, fn_t)
        if fn_label is not None:
            basic = basic + (bce_with_logits(fn_logits, fn_label) * fmask_t).sum(-1)
        if y_hat is not None:
            y_hat = torch.as_tensor(y_hat, dtype=reps.dtype)
            con = (bce_with_logits(fn_logits, y_hat) * fmask_t).sum(-1).sum() / n_inst
    L_basic = basic.sum() / n_inst
    final = L_basic if con is None else L_basic + alpha * con
    return BatchObjective(L_basic, con, final, n_inst, reps, pos_logits, neg_logits)


def make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)


def _step(model, optimizer, loss, cfg):
    optimizer.zero_grad(set_to_none=True)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)}")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    if cfg.max_grad_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
    optimizer.step()
    model.zero_padding_rows()


def backbone_epoch(model, optimizer, data: TrainingData, cfg: TrainConfig, rng) -> dict:
    """One epoch of the plain objective with uniformly drawn negatives."""
    model.train()
    total, count = 0.0, 0
    n = cfg.n_negatives
    for users, seqs, pos, tks in data.batches(rng, cfg.batch_size):
        neg = np.zeros(seqs.shape + (n,), dtype=np.int64)
        for r, c, u, t in _instances(users, tks):
            neg[r, c] = uniform_fill(rng, n, data.item_count, data.exclusions[u] | {int(pos[r, c])})
        _, validf, _, _, per_instance = _basic_terms(model, seqs, pos, neg)
        n_inst = validf.sum()
        loss = per_instance.sum() / n_inst
        _step(model, optimizer, loss, cfg)
        total += float(loss.detach()) * float(n_inst)
        count += int(n_inst)
    mean = total / count
    return {"L_basic": mean, "L_con": 0.0, "L_final": mean, "n_negative_terms": count * n}


def train_epoch(model, teacher, ledger, data: TrainingData, cfg: TrainConfig, rng, optimizer, tracker=None) -> dict:
    """One post-warmup epoch.

    Negatives come from the recorded set first, then uniform draws.  Mined
    items are excluded from every pool; depending on ``fn_action`` they are
    trained as positives (``reverse``), kept as negative-labelled terms
    (``keep``) or dropped (``remove``).  Score comparisons are buffered and
    applied to the ledger at the end of the epoch.
    """
    model.train()
    n = cfg.n_negatives
    strategy = cfg.strategy()
    use_rec = strategy.kind != "none" and strategy.use_rec
    fn_label = {"reverse": 1.0, "keep": 0.0}.get(cfg.fn_action)
    observations: list[Observation] = []
    sums = {"basic": 0.0, "con": 0.0, "final": 0.0}
    counts = {"inst": 0, "rev": 0, "con": 0, "neg": 0}

    for users, seqs, pos, tks in data.batches(rng, cfg.batch_size):
        inst = _instances(users, tks)
        neg = np.zeros(seqs.shape + (n,), dtype=np.int64)
        fn_lists = {}
        for r, c, u, t in inst:
            p = int(pos[r, c])
            neg[r, c] = draw_negatives(ledger, u, t, n, data.item_count, data.exclusions[u] | {p}, rng, use_rec=use_rec)
            if tracker is not None and not strategy.use_rec:
                tracker.remember_draws(u, t, neg[r, c].tolist())
            if fn_label is not None:
                f = ledger.false_members(u, t)
                if f:
                    fn_lists[(r, c)] = f

        fn = fmask = y_hat = None
        if fn_lists:
            width = max(len(v) for v in fn_lists.values())
            fn = np.zeros(seqs.shape + (width,), dtype=np.int64)
            fmask = np.zeros(fn.shape, dtype=bool)
            for (r, c), f in fn_lists.items():
                fn[r, c, :len(f)] = f
                fmask[r, c, :len(f)] = True
            n_terms = int(fmask.sum())
            counts["rev" if fn_label == 1.0 else "neg"] += n_terms
            if cfg.alpha > 0 and teacher is not None:
                y_hat = soft_labels(teacher.model, torch.as_tensor(seqs), torch.as_tensor(fn))
                counts["con"] += n_terms
        obj = batch_objective(model, seqs, pos, neg, fn, fmask, fn_label, y_hat, cfg.alpha)
        loss, L_basic, n_inst = obj.final, obj.basic, obj.n_instances
        if obj.consistency is not None:
            sums["con"] += float(obj.consistency.detach()) * float(n_inst)
        pos_logits, neg_logits, reps = obj.pos_logits, obj.neg_logits, obj.reps

        if strategy.kind != "none":
            with torch.no_grad():
                ps = torch.sigmoid(pos_logits).cpu().numpy()
                ns = torch.sigmoid(neg_logits).cpu().numpy()
            for r, c, u, t in inst:
                p, pscore = int(pos[r, c]), float(ps[r, c])
                for j in range(n):
                    observations.append(Observation(u, t, int(neg[r, c, j]), float(ns[r, c, j]), pscore, p))
            if tracker is not None:
                _track_scores(model, reps, inst, ledger, tracker)

        _step(model, optimizer, loss, cfg)
        if teacher is not None:
            teacher.update(model)
        sums["basic"] += float(L_basic.detach()) * float(n_inst)
        sums["final"] += float(loss.detach()) * float(n_inst)
        counts["inst"] += int(n_inst)
        counts["neg"] += int(n_inst) * n

    if strategy.kind == "ufnrec":
        ledger.record_epoch(observations)
    elif strategy.kind == "variance":
        if strategy.use_rec:
            ledger.record_epoch(observations)
        tracker.mine(ledger)

    k = counts["inst"]
    return {
        "L_basic": sums["basic"] / k,
        "L_con": sums["con"] / k,
        "L_final": sums["final"] / k,
        "n_reversed_terms": counts["rev"],
        "n_consistency_terms": counts["con"],
        "n_negative_terms": counts["neg"],
    }


@torch.no_grad()
def _track_scores(model, reps, inst, ledger, tracker):
    for r, c, u, t in inst:
        items = tracker.tracked(ledger, u, t)
        if not items:
            continue
        logits = model.score_items(reps[r, c].detach(), torch.as_tensor(items))
        for i, s in zip(items, torch.sigmoid(logits).tolist()):
            tracker.observe(u, t, i, s)


class WarmupPolicy:
    """Decides when the uniform-negative warmup phase ends."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.losses: list[float] = []

    def done(self) -> bool:
        cfg = self.cfg
        e = len(self.losses)
        if cfg.warmup == "fixed":
            return e >= cfg.warmup_epochs
        if e >= cfg.warmup_cap:
            return True
        p = cfg.warmup_window
        if e < p + 1:
            return False
        before, now = self.losses[-p - 1], self.losses[-1]
        return (before - now) / abs(before) < cfg.warmup_rel_tol

    def update(self, loss: float) -> bool:
        self.losses.append(loss)
        return self.done()


def warmup(model, data: TrainingData, cfg: TrainConfig, rng=None, optimizer=None) -> list[float]:
    """Train on uniform negatives until the warmup policy fires; returns epoch losses."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    policy = WarmupPolicy(cfg)
    while not policy.done():
        stats = backbone_epoch(model, optimizer, data, cfg, rng)
        if not math.isfinite(stats["L_basic"]):
            raise TrainingError(f"warmup loss diverged at epoch {len(policy.losses) + 1}")
        policy.update(stats["L_basic"])
    return policy.losses


@dataclass
class FitResult:
    config: TrainConfig
    model: SequenceEncoder
    teacher: EMATeacher | None
    ledger: RecordLedger
    history: list[EpochReport]
    best_epoch: int
    best_valid_ndcg10: float
    warmup_epochs: int
    valid_report: RankingReport
    test_report: RankingReport
    final_state: dict = field(default=None, repr=False)

    def history_dicts(self) -> list[dict]:
        return [asdict(h) for h in self.history]


def fit(cfg: TrainConfig, ds: InteractionDataset, split: SplitDataset, out_dir=None, eval_candidates=None, log=None) -> FitResult:
    """Warmup, then train until ``max_epochs`` or early stopping on validation NDCG@10.

    ``method='backbone'`` trains the plain objective for every epoch.  The
    best-by-validation weights are restored before the final test
    evaluation.  With ``out_dir`` the best checkpoint and a JSON-lines epoch
    report stream are written there.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SequenceEncoder(ds.item_count, cfg.encoder_config(), seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    data = TrainingData(ds, split, cfg.max_len, cfg.train_neg_exclude_history)
    strategy = cfg.strategy()
    # under the variance miner the recorded set only supplies candidates
    ledger = RecordLedger(math.inf if strategy.kind == "variance" else strategy.m, strategy.count_mode)
    tracker = VarianceTracker(strategy) if strategy.kind == "variance" else None
    if eval_candidates is None:
        eval_candidates = {
            stage: build_eval_candidates(ds, split, stage, cfg.eval_seed, cfg.eval_neg_mode)
            for stage in ("valid", "test")
        }

    out = Path(out_dir) if out_dir else None
    stream = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        stream = (out / "epochs.jsonl").open("w")

    policy = WarmupPolicy(cfg)
    in_warmup = cfg.method == "ufnrec" and not policy.done()
    warmup_end = 0 if cfg.method == "ufnrec" and not in_warmup else None
    teacher = None
    history: list[EpochReport] = []
    best = (-1.0, 0, None)
    last_improvement = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            start = time.perf_counter()
            if cfg.method == "backbone" or in_warmup:
                phase = "backbone" if cfg.method == "backbone" else "warmup"
                stats = backbone_epoch(model, optimizer, data, cfg, rng)
                if in_warmup and policy.update(stats["L_basic"]):
                    in_warmup, warmup_end = False, epoch
            else:
                phase = "main"
                if teacher is None:
                    teacher = EMATeacher(model, cfg.decay)
                stats = train_epoch(model, teacher, ledger, data, cfg, rng, optimizer, tracker)
            for key in ("L_basic", "L_final"):
                if not math.isfinite(stats[key]):
                    raise TrainingError(f"epoch {epoch}: {key} is {stats[key]}")

            eval_model = teacher.model if (cfg.eval_with == "teacher" and teacher is not None) else model
            valid = evaluate(eval_model, split, eval_candidates["valid"], "valid")
            test = evaluate(eval_model, split, eval_candidates["test"], "test") if cfg.track_test else None
            report = EpochReport(
                epoch=epoch,
                phase=phase,
                L_basic=stats["L_basic"],
                L_con=stats["L_con"],
                L_final=stats["L_final"],
                n_rec=ledger.n_rec,
                n_false=ledger.n_false,
                valid_hr10=valid.hr[10],
                valid_ndcg10=valid.ndcg[10],
                wall_time=time.perf_counter() - start,
                test_hr10=test.hr[10] if test else None,
                test_ndcg10=test.ndcg[10] if test else None,
                n_reversed_terms=stats.get("n_reversed_terms", 0),
                n_consistency_terms=stats.get("n_consistency_terms", 0),
                n_negative_terms=stats.get("n_negative_terms", 0),
            )
            history.append(report)
            if stream:
                stream.write(report.to_json() + "\n")
                stream.flush()
            if log:
                log(report)

            if report.valid_ndcg10 > best[0]:
                best = (report.valid_ndcg10, epoch, _snapshot(model, teacher))
                last_improvement = epoch
                if out:
                    save_checkpoint(out / "best.npz", model, teacher.model if teacher else None, {"epoch": epoch})
            # patience counts only once mining is active
            anchor = last_improvement if warmup_end is None else max(last_improvement, warmup_end)
            if cfg.method == "ufnrec" and warmup_end is None:
                continue
            if epoch - anchor >= cfg.early_stop_patience:
                break
    finally:
        if stream:
            stream.close()

    final_state = _snapshot(model, teacher)
    _restore(model, teacher, best[2])
    eval_model = teacher.model if (cfg.eval_with == "teacher" and teacher is not None) else model
    valid = evaluate(eval_model, split, eval_candidates["valid"], "valid")
    test = evaluate(eval_model, split, eval_candidates["test"], "test")
    if out:
        (out / "test_report.tsv").write_text(test.to_text(with_ranks=True))
        with (out / "ledger.tsv").open("w") as fh:
            ledger.dump(fh)
    return FitResult(
        config=cfg,
        model=model,
        teacher=teacher,
        ledger=ledger,
        history=history,
        best_epoch=best[1],
        best_valid_ndcg10=best[0],
        warmup_epochs=warmup_end if warmup_end is not None else 0,
        valid_report=valid,
        test_report=test,
        final_state=final_state,
    )


def _snapshot(model, teacher):
    return (
        copy.deepcopy(model.state_dict()),
        copy.deepcopy(teacher.model.state_dict()) if teacher is not None else None,
    )


def _restore(model, teacher, snap):
    if snap is None:
        return
    model.load_state_dict(snap[0])
    if teacher is not None and snap[1] is not None:
        teacher.model.load_state_dict(snap[1])
