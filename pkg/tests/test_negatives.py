import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufnrec.negatives import (
    MiningStrategy,
    Observation,
    RecordLedger,
    TrainingInstance,
    VarianceTracker,
    draw_negatives,
    mine_variance_based,
    removal_filter,
    reverse_labels,
    uniform_fill,
)
from ufnrec.validation import ConfigError

pytestmark = pytest.mark.oracle


def obs(item, neg, pos, user=0, t=1, positive=99):
    return Observation(user, t, item, neg, pos, positive)


def replay_oracle(outcomes, m, consecutive=False):
    """Epoch at which an item becomes a false negative, from its win/lose history."""
    count = 0
    for epoch, won in enumerate(outcomes, start=1):
        if won:
            count += 1
            if count >= m:
                return epoch
        elif consecutive:
            count = 0
    return None


# -- record_epoch ------------------------------------------------------------


def test_three_consecutive_wins_with_m3():
    led = RecordLedger(m=3)
    for epoch in range(1, 4):
        led.record_epoch([obs(7, 0.9, 0.4)])
        assert led.state(0, 1, 7) == ("FALSE" if epoch == 3 else "REC")
    assert led.false_members(0, 1) == [7]


def test_tie_is_not_recorded():
    led = RecordLedger(m=1)
    led.record_epoch([obs(7, 0.5, 0.5)])
    assert led.state(0, 1, 7) == "POOL" and led.counts.get((0, 1, 7), 0) == 0


def test_cumulative_counting_example():
    led = RecordLedger(m=3)
    pattern = [True, True, False, True]
    states = []
    for won in pattern:
        led.record_epoch([obs(7, 0.8 if won else 0.2, 0.5)])
        states.append(led.state(0, 1, 7))
    assert states == ["REC", "REC", "POOL", "FALSE"]
    assert replay_oracle(pattern, 3) == 4


def test_consecutive_mode_resets():
    led = RecordLedger(m=3, count_mode="consecutive")
    for won in [True, True, False, True]:
        led.record_epoch([obs(7, 0.8 if won else 0.2, 0.5)])
    assert led.state(0, 1, 7) == "REC" and led.counts[(0, 1, 7)] == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=15), st.integers(1, 6), st.booleans())
def test_ledger_matches_replay_oracle(outcomes, m, consecutive):
    led = RecordLedger(m=m, count_mode="consecutive" if consecutive else "cumulative")
    became = None
    for epoch, won in enumerate(outcomes, start=1):
        if led.state(0, 1, 5) == "FALSE":
            break
        led.record_epoch([obs(5, 0.7 if won else 0.3, 0.5)])
        if became is None and led.state(0, 1, 5) == "FALSE":
            became = epoch
    assert became == replay_oracle(outcomes, m, consecutive)


def test_positive_collision_is_fatal():
    with pytest.raises(ValueError, match="positive"):
        RecordLedger().record_epoch([obs(99, 0.9, 0.1, positive=99)])


def test_observing_false_negative_is_fatal():
    led = RecordLedger(m=1)
    led.record_epoch([obs(4, 0.9, 0.1)])
    with pytest.raises(ValueError):
        led.record_epoch([obs(4, 0.9, 0.1)])


observation_streams = st.lists(
    st.lists(
        st.tuples(st.integers(0, 2), st.integers(1, 3), st.integers(1, 12), st.floats(0.01, 0.99), st.floats(0.01, 0.99)),
        max_size=25,
    ),
    max_size=8,
)


def run_stream(stream, m=2):
    led = RecordLedger(m=m)
    for epoch in stream:
        seen, batch = set(), []
        for u, t, i, ns, ps in epoch:
            if (u, t, i) in seen or i in led.false.get((u, t), ()):
                continue
            seen.add((u, t, i))
            batch.append(Observation(u, t, i, ns, ps, 0))
        led.record_epoch(batch)
        yield led


@settings(max_examples=150, deadline=None)
@given(observation_streams)
def test_ledger_invariants(stream):
    previous = {}
    for led in run_stream(stream):
        for key, c in led.counts.items():
            assert c >= previous.get(key, 0)  # monotone counts
        previous = dict(led.counts)
        for ctx, items in led.false.items():
            assert not items & led.rec.get(ctx, set())  # exclusivity
            for i in items:
                assert led.counts[ctx + (i,)] >= led.m


@settings(max_examples=100, deadline=None)
@given(observation_streams)
def test_replay_determinism(stream):
    a = list(run_stream(stream))
    b = list(run_stream(stream))
    if a:
        assert a[-1].counts == b[-1].counts
        assert dict(a[-1].rec) == dict(b[-1].rec) and dict(a[-1].false) == dict(b[-1].false)


def test_order_independent_merge():
    data = [obs(i, 0.9 if i % 2 else 0.1, 0.5, user=i % 3) for i in range(1, 20)]
    a = RecordLedger().record_epoch(data)
    b = RecordLedger().record_epoch(list(reversed(data)))
    assert a.counts == b.counts and dict(a.rec) == dict(b.rec)


def test_false_negatives_never_return():
    led = RecordLedger(m=1)
    led.record_epoch([obs(12, 0.9, 0.1)])
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        assert 12 not in draw_negatives(led, 0, 1, 1, 15, {99}, rng)


# -- draw_negatives ----------------------------------------------------------


def test_empty_rec_is_uniform_draw():
    excl = {1, 2}
    a = draw_negatives(RecordLedger(), 0, 1, 1, 20, excl, np.random.default_rng(5))
    b = uniform_fill(np.random.default_rng(5), 1, 20, excl)
    assert a == b and a[0] not in excl


def test_rec_member_first_then_fill():
    led = RecordLedger(m=10)
    led.record_epoch([obs(7, 0.9, 0.2)])
    got = draw_negatives(led, 0, 1, 2, 50, {99}, np.random.default_rng(0))
    assert got[0] == 7 and len(set(got)) == 2 and got[1] != 7


def test_rec_capped_by_count_then_index():
    led = RecordLedger(m=10)
    led.record_epoch([obs(9, 0.9, 0.2), obs(3, 0.9, 0.2)])
    led.record_epoch([obs(9, 0.9, 0.2), obs(3, 0.9, 0.2), obs(5, 0.9, 0.2)])
    assert led.rec_members(0, 1) == [3, 9, 5]
    assert draw_negatives(led, 0, 1, 1, 50, set(), np.random.default_rng(0)) == [3]


def test_rec_always_present_and_fill_uniform():
    led = RecordLedger(m=10)
    led.record_epoch([obs(7, 0.9, 0.2)])
    rng = np.random.default_rng(1)
    counts = np.zeros(31)
    reps = 10_000
    for _ in range(reps):
        got = draw_negatives(led, 0, 1, 2, 30, {1}, rng)
        assert got[0] == 7
        counts[got[1]] += 1
    fill = counts[[i for i in range(2, 31) if i != 7]]
    p = 1 / len(fill)
    sd = math.sqrt(reps * p * (1 - p))
    assert np.all(np.abs(fill - reps * p) < 3.5 * sd)
    assert counts[1] == 0 and counts[7] == 0


def test_insufficient_vocabulary():
    with pytest.raises(ConfigError):
        uniform_fill(np.random.default_rng(0), 3, 5, {1, 2, 3})


def test_dense_exclusions_use_pool_path():
    rng = np.random.default_rng(0)
    got = uniform_fill(rng, 2, 10, set(range(1, 8)))
    assert sorted(got) in ([8, 9], [8, 10], [9, 10])


def test_no_mining_reduces_to_plain_sampler():
    led = RecordLedger(m=None)
    for _ in range(3):
        led.record_epoch([obs(i, 0.9, 0.1, t=i) for i in range(1, 6)])
    assert led.n_false == 0
    a = [draw_negatives(led, 0, t, 1, 40, {99}, np.random.default_rng(t), use_rec=False) for t in range(1, 6)]
    b = [uniform_fill(np.random.default_rng(t), 1, 40, {99}) for t in range(1, 6)]
    assert a == b


# -- reversal / removal ------------------------------------------------------


def test_reverse_no_false_is_noop():
    inst = TrainingInstance(0, 1, 99, [4])
    assert reverse_labels(RecordLedger(), inst) == [inst]


def test_reverse_adds_positive_term():
    led = RecordLedger(m=1)
    led.record_epoch([obs(12, 0.9, 0.1)])
    out = reverse_labels(led, TrainingInstance(0, 1, 99, [4]))
    assert len(out) == 2 and out[0].positive == 99
    assert out[1].positive == 12 and out[1].reversed and out[1].negatives == []


def test_training_instance_invariants():
    with pytest.raises(ValueError):
        TrainingInstance(0, 1, 5, [5])
    with pytest.raises(ValueError):
        TrainingInstance(0, 1, 5, [0])


def test_removal_identity_and_resample():
    inst = TrainingInstance(0, 1, 2, [5])
    rng = np.random.default_rng(0)
    assert removal_filter(set(), inst, 10, rng) is inst
    for _ in range(200):
        out = removal_filter({5}, inst, 10, rng)
        assert out.negatives[0] not in (5, 2) and out.positive == 2


def test_removal_from_ledger():
    led = RecordLedger(m=1)
    led.record_epoch([obs(5, 0.9, 0.1, positive=2)])
    out = removal_filter(led, TrainingInstance(0, 1, 2, [5]), 10, np.random.default_rng(0))
    assert out.negatives[0] not in (5, 2)


def test_strategy_validation():
    with pytest.raises(ConfigError):
        MiningStrategy(kind="magic")
    assert MiningStrategy(m=None).m == math.inf


# -- variance miner ----------------------------------------------------------


def test_variance_flags_constant_high_scorer():
    rng = np.random.default_rng(0)
    hist = {(0, 1, i): list(rng.uniform(0.05, 0.6, 5)) for i in range(1, 20)}
    hist[(0, 1, 42)] = [0.9] * 5
    assert mine_variance_based(hist, 0.9, 0.1) == {(0, 1, 42)}


def test_variance_identical_histories_empty():
    hist = {(0, 1, i): [0.4, 0.6, 0.5] for i in range(1, 10)}
    assert mine_variance_based(hist) == set()


def test_variance_insufficient_history(caplog):
    assert mine_variance_based({(0, 1, 3): [0.9]}) == set()
    assert "history" in caplog.text


def test_variance_tracker_mines_into_ledger():
    strat = MiningStrategy(kind="variance", use_rec=False, memory=3)
    tracker = VarianceTracker(strat)
    led = RecordLedger(m=math.inf)
    rng = np.random.default_rng(0)
    tracker.remember_draws(0, 1, [3, 4, 5])
    assert tracker.tracked(led, 0, 1) == [3, 4, 5]
    for _ in range(5):
        for i in range(1, 30):
            tracker.observe(0, 1, i, 0.95 if i == 17 else float(rng.uniform(0, 0.7)))
    assert tracker.mine(led) == 1
    assert led.false_members(0, 1) == [17]


def test_ledger_dump_format():
    import io

    led = RecordLedger(m=2)
    led.record_epoch([obs(3, 0.9, 0.1), obs(4, 0.9, 0.1)])
    led.record_epoch([obs(3, 0.9, 0.1)])
    buf = io.StringIO()
    led.dump(buf)
    assert buf.getvalue() == "0\t1\t3\t2\tFALSE\n0\t1\t4\t1\tREC\n"
