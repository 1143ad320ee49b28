import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_random(rng, shape, sigma=1.5, scale=1.0):
    noise = rng.standard_normal(shape)
    if len(shape) == 4:
        return np.stack([gaussian_filter(noise[..., c], sigma) for c in range(shape[-1])],
                        axis=-1) * scale
    return gaussian_filter(noise, sigma) * scale


# acceptance verdicts, printed as one line per criterion after the run
ACCEPTANCE = {}


def record(cid, ok, detail):
    ACCEPTANCE[cid] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {detail}")
