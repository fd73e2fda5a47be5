import numpy as np
import pytest

from vct.data import Batch
from vct.encoder import EncoderConfig


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(patch_len=5, dim=8, depth=2, heads=2)


def make_batch(rng, n=4, n_patches=4, patch_len=5, ecg_present=None, ppg_present=None):
    """Random standardized-looking batch with planted labels."""
    w = n_patches * patch_len
    e = np.ones(n, bool) if ecg_present is None else np.asarray(ecg_present, bool)
    p = np.ones(n, bool) if ppg_present is None else np.asarray(ppg_present, bool)
    return Batch(
        rng.standard_normal((n, w)) * e[:, None],
        rng.standard_normal((n, w)) * p[:, None],
        e,
        p,
        rng.normal(90, 3, n),
        rng.integers(0, 2, n),
    )


# (criterion number, line) pairs recorded by test_acceptance.py
ACCEPTANCE: list[tuple[int, str]] = []


def record_criterion(number: int, ok: bool, title: str, detail: str) -> None:
    line = f"C{number} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
