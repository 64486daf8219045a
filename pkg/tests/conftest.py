import sys
import pytest

from ufnrec.dataio import split_leave_one_out
from ufnrec.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SynthConfig(n_users=150, n_items=300, seq_len_range=(8, 14), noise_temp=0.3, seed=1))


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split_leave_one_out(small_corpus.dataset)


def tiny_config(**kw):
    from ufnrec.trainer import TrainConfig

    base = dict(d_model=16, n_heads=1, n_layers=1, max_epochs=6, warmup="fixed", warmup_epochs=2,
                early_stop_patience=50, batch_size=64, track_test=False)
    base.update(kw)
    return TrainConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
