import numpy as np
import pytest
import torch

from cardiac_uda.phantom import make_splits

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_split():
    """Tiny 32x32 dataset: enough for wiring tests, far too small to learn anything."""
    from cardiac_uda.phantom import PhantomSpec
    return make_splits(6, 5, 3, seed=11, spec=PhantomSpec(image_size=32,
                                                          lv_radius_range=(0.1, 0.12),
                                                          myo_thickness_range=(0.05, 0.06),
                                                          rv_scale_range=(1.0, 1.1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the run even when output is captured
ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
