import numpy as np
import pytest

from edenn import tensor as tn


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (modified in place, then restored)."""
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


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def check_grads(build, params: list[tn.Tensor], tol: float = 1e-4) -> float:
    """Compare analytic gradients of ``build()`` (a scalar Tensor) with finite differences."""
    for p in params:
        p.zero_grad()
    build().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(lambda: build().item(), p.data)
        worst = max(worst, max_rel_err(analytic, numeric))
    assert worst < tol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed at the end of the run."""
    line = f"acceptance {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
