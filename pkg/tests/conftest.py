import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sgem import acoustic, corpus
from sgem import lm as lm_module
from sgem.core import Vocabulary


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary(("<b>", "a", "b"))


# short utterances keep the tiny models fast; fixed here so the fixtures do not follow the library default
FIXTURE_EMISSION = corpus.EmissionParams(frames_per_token=(2, 4), sigma_clean=1.0)


@pytest.fixture(scope="session")
def clean_utterances(vocab):
    return corpus.generate_utterances(vocab, 24, (3, 8), FIXTURE_EMISSION, seed=5, prefix="fx")


@pytest.fixture(scope="session")
def small_lm(vocab, clean_utterances):
    return lm_module.fit([u.reference for u in clean_utterances], vocab, n=3)


@pytest.fixture
def tiny_ctc(vocab):
    """Untrained narrow CTC model; cheap enough for per-test construction."""
    return acoustic.build_model("ctc", vocab, 16, seed=3, channels=8, hidden=8)


@pytest.fixture
def tiny_ar(vocab):
    return acoustic.build_model("ar", vocab, 16, seed=4, channels=8, hidden=8, dec_hidden=8, embed=4, attn=8)


@pytest.fixture(scope="session")
def trained_tiny_ctc(vocab, clean_utterances):
    """A narrow CTC model trained briefly so its outputs are peaked, not uniform."""
    model = acoustic.build_model("ctc", vocab, 16, seed=0, channels=16, hidden=16)
    model, _ = acoustic.train_source(model, clean_utterances, acoustic.TrainingConfig(epochs=15, batch_size=8))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


# -- acceptance reporting: one pass/fail line per criterion ---------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    failed = report.failed or report.skipped  # a skipped criterion is not a pass
    number, title = marker
    previous = _CRITERIA.get(number, (title, True))
    if report.when == "call" or failed:
        _CRITERIA[number] = (title, previous[1] and not failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
