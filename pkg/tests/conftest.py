import numpy as np
import pytest

from ltpll.nncore import MlpModel, ModelSpec, forward


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def assert_grad_close(analytic, numeric, rel=1e-4, abs_=1e-8):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        ok = err <= np.maximum(abs_, rel * np.maximum(np.abs(a), np.abs(n)))
        assert ok.all(), f"max err {err.max():.3e}"


def random_model(rng, in_dim, hidden, C, activation="tanh"):
    m = MlpModel.create(ModelSpec(in_dim, tuple(hidden), C, activation=activation), rng)
    # nonzero biases so their gradients are exercised
    for b in m.biases:
        b += rng.normal(scale=0.3, size=b.shape)
    return m


def logits_of(model, x):
    return forward(model, x).logits


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list[str] = []


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
