import numpy as np
import pytest

from tipatch.evalkit import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """8 synthetic 64x64 training images and 8 validation images."""
    return synth_dataset(8, 64, 64, seed=21), synth_dataset(8, 64, 64, seed=22)


ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line; printed in the terminal summary."""
    def _record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
