import sys

import numpy as np
import pytest

from dr2n import diffcore as dc


def check_grads(loss_fn, tensors, tol=1e-6, eps=1e-5):
    """Analytic vs central-difference gradients for every tensor; returns worst rel. error."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad
        numeric = dc.numeric_grad(loss_fn, t, eps=eps)
        err = dc.rel_error(analytic, numeric)
        assert err < tol, f"{t.name or t.shape}: rel. error {err:.2e} >= {tol}"
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
