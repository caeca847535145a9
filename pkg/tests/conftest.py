import numpy as np
import pytest

from fisheye_supcon.synthgen import GeneratorConfig, generate_patch_pool


@pytest.fixture(scope="session")
def small_pool():
    """A few hundred synthetic patches shared by slower tests."""
    pool, tally = generate_patch_pool(GeneratorConfig(seed=7, num_images=50))
    return pool, tally


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember (and print) one acceptance verdict, then fail loudly if needed."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
