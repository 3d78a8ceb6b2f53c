import numpy as np
import pytest

from icl_ser.corpus import CorpusSpec, generate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(n_train_speakers=4, n_valid_speakers=2, n_test_speakers=2, utterances_per_emotion=3,
                      min_frames=5, max_frames=9, seed=3)
    return generate_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_REPORT: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; all lines are printed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    _REPORT[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(_REPORT):
            terminalreporter.write_line(_REPORT[criterion])
