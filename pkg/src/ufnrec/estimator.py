"""scikit-learn style wrapper around :func:`ufnrec.trainer.fit`."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dataio import InteractionDataset, build_eval_candidates, split_leave_one_out
from .encoder import pad_sequences
from .evaluation import evaluate
from .trainer import TrainConfig, fit
from .validation import DataError, check_sequences


def as_dataset(X, item_count: int | None = None) -> InteractionDataset:
    """Accept a dataset or a list of item-index sequences."""
    if isinstance(X, InteractionDataset):
        return X
    seqs = [list(map(int, s)) for s in X]
    if not seqs:
        raise DataError("no sequences given")
    n = item_count or max(max(s) for s in seqs if s)
    check_sequences(seqs, n)
    return InteractionDataset(len(seqs), n, seqs)


class UFNRecommender(BaseEstimator):
    """Sequential recommender trained with false-negative mining.

    Hyperparameters mirror :class:`TrainConfig`.  ``fit`` takes a dataset or
    a list of sequences, holds out the last two items of each for
    validation and test, and keeps the best-by-validation weights.
    """

    def __init__(
        self,
        d_model=64,
        n_layers=2,
        n_heads=2,
        max_len=50,
        dropout_rate=0.2,
        encoder_kind="self_attention",
        share_embeddings=True,
        dtype="float32",
        method="ufnrec",
        learning_rate=0.001,
        batch_size=128,
        optimizer="adam",
        adam_betas=(0.9, 0.999),
        adam_eps=1e-8,
        max_grad_norm=None,
        max_epochs=200,
        early_stop_patience=10,
        seed=0,
        warmup="relative",
        warmup_epochs=10,
        warmup_rel_tol=0.01,
        warmup_window=2,
        warmup_cap=50,
        n_negatives=1,
        train_neg_exclude_history=True,
        mining="ufnrec",
        m=3,
        count_mode="cumulative",
        fn_action="reverse",
        variance_window=5,
        variance_mean_quantile=0.9,
        variance_var_quantile=0.1,
        variance_use_rec=True,
        variance_memory=5,
        alpha=0.2,
        decay=0.999,
        eval_with="student",
        eval_seed=2024,
        eval_neg_mode="exclude-history",
        track_test=True,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.dropout_rate = dropout_rate
        self.encoder_kind = encoder_kind
        self.share_embeddings = share_embeddings
        self.dtype = dtype
        self.method = method
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.adam_betas = adam_betas
        self.adam_eps = adam_eps
        self.max_grad_norm = max_grad_norm
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.seed = seed
        self.warmup = warmup
        self.warmup_epochs = warmup_epochs
        self.warmup_rel_tol = warmup_rel_tol
        self.warmup_window = warmup_window
        self.warmup_cap = warmup_cap
        self.n_negatives = n_negatives
        self.train_neg_exclude_history = train_neg_exclude_history
        self.mining = mining
        self.m = m
        self.count_mode = count_mode
        self.fn_action = fn_action
        self.variance_window = variance_window
        self.variance_mean_quantile = variance_mean_quantile
        self.variance_var_quantile = variance_var_quantile
        self.variance_use_rec = variance_use_rec
        self.variance_memory = variance_memory
        self.alpha = alpha
        self.decay = decay
        self.eval_with = eval_with
        self.eval_seed = eval_seed
        self.eval_neg_mode = eval_neg_mode
        self.track_test = track_test

    def to_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.get_params())

    def fit(self, X, y=None, out_dir=None, log=None):
        ds = as_dataset(X)
        split = split_leave_one_out(ds)
        result = fit(self.to_config(), ds, split, out_dir=out_dir, log=log)
        self.result_ = result
        self.model_ = result.model
        self.item_count_ = ds.item_count
        self.history_ = result.history
        self.ledger_ = result.ledger
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")

    def _model(self):
        if self.eval_with == "teacher" and self.result_.teacher is not None:
            return self.result_.teacher.model
        return self.model_

    @torch.no_grad()
    def predict_scores(self, sequences) -> np.ndarray:
        """Logits over all items (column 0 is padding, set to -inf)."""
        self._check_fitted()
        seqs = check_sequences([list(map(int, s)) for s in sequences], self.item_count_)
        model = self._model()
        was = model.training
        model.eval()
        try:
            rep = model.last_representation(torch.as_tensor(pad_sequences(seqs, model.cfg.max_len)))
            scores = (rep @ model.output_table().T).double().numpy()
        finally:
            model.train(was)
        scores[:, 0] = -np.inf
        return scores

    def recommend(self, sequences, k: int = 10, exclude_seen: bool = True) -> np.ndarray:
        scores = self.predict_scores(sequences)
        if exclude_seen:
            for r, s in enumerate(sequences):
                scores[r, list(s)] = -np.inf
        return np.argsort(-scores, axis=1, kind="stable")[:, :k]

    def predict(self, sequences) -> np.ndarray:
        return self.recommend(sequences, k=1)[:, 0]

    def score(self, X, y=None) -> float:
        """Test NDCG@10 under leave-one-out on ``X``."""
        self._check_fitted()
        ds = as_dataset(X, self.item_count_)
        split = split_leave_one_out(ds)
        cands = build_eval_candidates(ds, split, "test", self.eval_seed, self.eval_neg_mode)
        return evaluate(self._model(), split, cands, "test").ndcg[10]
