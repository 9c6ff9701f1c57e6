import numpy as np
import pytest

from milseg import functional as F
from milseg.tensor import Tensor


def numeric_grad(loss_fn, tensor: Tensor, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``tensor.data`` at flat ``indices``."""
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[k] = (up - down) / (2 * h)
    return out


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(y * weights)``: a scalar loss with a non-uniform upstream gradient."""
    return F.sum(F.mul(y, Tensor(weights, dtype=y.dtype)))


def check_gradient(loss_fn, leaves, rng, tol=1e-4, samples=30):
    """Compare backward() against central differences on random entries of every leaf."""
    for leaf in leaves:
        leaf.grad = None
    loss_fn().backward()
    worst = 0.0
    for leaf in leaves:
        idx = rng.choice(leaf.size, size=min(samples, leaf.size), replace=False)
        num = numeric_grad(loss_fn, leaf, idx)
        err = rel_error(leaf.grad.reshape(-1)[idx], num)
        worst = max(worst, float(err.max()))
        assert err.max() < tol, (leaf.name, err.max())
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        previous = _CRITERIA.get(number, (title, "PASS"))[1]
        _CRITERIA[number] = (title, "PASS" if report.passed and previous == "PASS" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title}")
