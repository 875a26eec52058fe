import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chart2dsl.numerics import backward

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def check_grads(build, tensors, rtol=1e-4, atol=1e-7, h=1e-5):
    """``build()`` returns a scalar Tensor over ``tensors``; compare backward to FD."""
    for t in tensors:
        t.grad = None
    grads = backward(build(), tensors)
    for t in tensors:
        num = numeric_grad(lambda: build().item(), t.data, h)
        assert_grad_close(grads[t], num, rtol, atol)


@pytest.fixture
def rng():
    from chart2dsl.numerics import stream
    return stream(1234, "tests")


# One line per acceptance criterion, echoed after the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
