import numpy as np
import pytest

from owczsl.backbone import BackboneConfig
from owczsl.data import CompositionSpace
from owczsl.numerics import gradient_errors

FD_STEP = 1e-5
FD_TOL = 1e-4


def assert_gradients(loss_fn, params, tol=FD_TOL, step=FD_STEP):
    errors = gradient_errors(loss_fn, params, step)
    worst = max(errors.values()) if errors else 0.0
    assert worst < tol, f"finite-difference mismatch {worst:.3e} (per-param: {errors})"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_space():
    # 3 x 3 with two unseen pairs, every primitive covered by a seen pair
    return CompositionSpace(("red", "blue", "striped"), ("disc", "square", "triangle"), frozenset({0, 1, 4, 5, 6, 8}), frozenset({2, 7}))


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=2, mlp_ratio=2, k=2)


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, name, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
