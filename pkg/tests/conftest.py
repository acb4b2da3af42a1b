import sys

import numpy as np
import pytest

from spkadapt.corpus import load_corpus, synth_toy_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """4 speakers x 5 utterances, shared read-only across the session."""
    out = tmp_path_factory.mktemp("toy")
    synth_toy_corpus(out, 4, 5, seed=1)
    return out


@pytest.fixture(scope="session")
def toy_data(toy_dir):
    return load_corpus(toy_dir / "manifest.txt")


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
