import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from ufnrec.encoder import load_checkpoint
from ufnrec.trainer import EpochReport, REPORT_SCHEMA, TrainConfig, TrainingData, WarmupPolicy, fit, warmup
from ufnrec.encoder import SequenceEncoder
from ufnrec.validation import ConfigError


def test_config_round_trip_and_unknown_keys():
    cfg = TrainConfig(m=None, alpha=0.3)
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict() and math.isinf(back.strategy().m)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"alhpa": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(fn_action="flip").validate()


@pytest.mark.parametrize("p", [1, 2, 4])
def test_relative_rule_constant_loss_stops_after_p_plus_one(p):
    pol = WarmupPolicy(TrainConfig(warmup_window=p))
    epochs = 0
    while not pol.done():
        pol.update(1.0)
        epochs += 1
    assert epochs == p + 1


def test_relative_rule_keeps_going_while_descending():
    pol = WarmupPolicy(TrainConfig(warmup_window=2, warmup_cap=50))
    for k in range(20):
        assert not pol.update(0.9 ** k)


def test_fixed_and_capped_policies():
    pol = WarmupPolicy(TrainConfig(warmup="fixed", warmup_epochs=4))
    assert [pol.update(1.0 / (k + 1)) for k in range(4)] == [False, False, False, True]
    pol = WarmupPolicy(TrainConfig(warmup_cap=3))
    assert [pol.update(0.5 ** k) for k in range(3)] == [False, False, True]
    assert WarmupPolicy(TrainConfig(warmup="fixed", warmup_epochs=0)).done()


def test_warmup_on_mean_pool_converges(small_corpus, small_split):
    cfg = tiny_config(encoder_kind="mean_pool", warmup="relative", warmup_window=2, warmup_cap=60,
                      dropout_rate=0.0, learning_rate=0.01)
    model = SequenceEncoder(small_corpus.dataset.item_count, cfg.encoder_config(), seed=0)
    data = TrainingData(small_corpus.dataset, small_split, cfg.max_len)
    losses = warmup(model, data, cfg)
    assert len(losses) < 60 and losses[-1] < losses[0]


def test_training_data_contexts(small_corpus, small_split):
    data = TrainingData(small_corpus.dataset, small_split, max_len=5)
    for u in range(10):
        train = small_split.train[u]
        n = min(len(train) - 1, 5)
        assert data.targets[u] == train[-n:]
        assert data.inputs[u] == train[-n - 1:-1]
        assert [train[t] for t in data.t_index[u]] == data.targets[u]


def test_fit_deterministic(small_corpus, small_split):
    cfg = tiny_config(max_epochs=4, m=1)
    a = fit(cfg, small_corpus.dataset, small_split)
    b = fit(cfg, small_corpus.dataset, small_split)
    strip = lambda h: [{k: v for k, v in d.items() if k != "wall_time"} for d in h]
    assert strip(a.history_dicts()) == strip(b.history_dicts())
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_mining_finds_false_negatives_soon_after_warmup(small_corpus, small_split):
    cfg = tiny_config(max_epochs=6, warmup_epochs=2, m=3)
    res = fit(cfg, small_corpus.dataset, small_split)
    by_epoch = {h.epoch: h for h in res.history}
    assert res.warmup_epochs == 2
    assert by_epoch[2 + 4].n_false > 0
    assert all(h.n_false == 0 and h.n_rec == 0 for h in res.history if h.phase == "warmup")


@pytest.mark.parametrize(
    "action, reversed_terms, consistency_terms",
    [("reverse", True, True), ("keep", False, True), ("remove", False, False)],
)
def test_fn_action_term_counters(small_corpus, small_split, action, reversed_terms, consistency_terms):
    cfg = tiny_config(max_epochs=6, m=1, fn_action=action, alpha=0.2)
    res = fit(cfg, small_corpus.dataset, small_split)
    main = [h for h in res.history if h.phase == "main"]
    assert res.ledger.n_false > 0
    assert (sum(h.n_reversed_terms for h in main) > 0) == reversed_terms
    assert (sum(h.n_consistency_terms for h in main) > 0) == consistency_terms


def test_fmr_has_no_consistency_terms(small_corpus, small_split):
    res = fit(tiny_config(max_epochs=5, m=1, alpha=0.0), small_corpus.dataset, small_split)
    assert sum(h.n_consistency_terms for h in res.history) == 0
    assert sum(h.n_reversed_terms for h in res.history) > 0


def test_variance_mining_runs(small_corpus, small_split):
    for use_rec in (True, False):
        cfg = tiny_config(max_epochs=6, mining="variance", variance_use_rec=use_rec, variance_memory=3)
        res = fit(cfg, small_corpus.dataset, small_split)
        assert len(res.history) == 6


def test_outputs_written(tmp_path, small_corpus, small_split):
    res = fit(tiny_config(max_epochs=4, m=1), small_corpus.dataset, small_split, out_dir=tmp_path)
    lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert rec["schema"] == REPORT_SCHEMA and set(rec) - {"schema"} == set(EpochReport.__dataclass_fields__)
    student, teacher, header = load_checkpoint(tmp_path / "best.npz")
    assert header["meta"]["epoch"] == res.best_epoch
    text = (tmp_path / "ledger.tsv").read_text().splitlines()
    assert len(text) == len(res.ledger.counts)
    assert all(line.split("\t")[4] in ("REC", "FALSE") for line in text)
    assert (tmp_path / "test_report.tsv").read_text().startswith("metric\tvalue")


def test_best_checkpoint_restored(small_corpus, small_split):
    res = fit(tiny_config(max_epochs=5, method="backbone"), small_corpus.dataset, small_split)
    assert res.valid_report.ndcg[10] == pytest.approx(res.best_valid_ndcg10, abs=1e-12)


def test_early_stopping_waits_for_warmup(small_corpus, small_split):
    cfg = tiny_config(max_epochs=12, warmup_epochs=6, early_stop_patience=1, learning_rate=1e-7)
    res = fit(cfg, small_corpus.dataset, small_split)
    assert len(res.history) >= 7


def test_teacher_evaluation_option(small_corpus, small_split):
    res = fit(tiny_config(max_epochs=4, eval_with="teacher"), small_corpus.dataset, small_split)
    assert res.teacher is not None


def test_sgd_optimizer(small_corpus, small_split):
    res = fit(tiny_config(max_epochs=3, optimizer="sgd", learning_rate=0.05), small_corpus.dataset, small_split)
    assert all(np.isfinite(h.L_basic) for h in res.history)
