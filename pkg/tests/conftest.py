import numpy as np
import pytest

from softcontrast.tensor import Tensor, backward, mul, tsum


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_gradient(op, inputs: list[np.ndarray], seed: int, step: float = 1e-5) -> float:
    """Largest relative gradient error of ``sum(op(*inputs) * R)`` for a random weighting R."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = op(*leaves)
    weights = np.random.default_rng([seed, 99]).normal(size=out.shape)
    backward(tsum(mul(out, Tensor(weights))))
    worst = 0.0
    for leaf in leaves:
        def f():
            return float(np.sum(op(*[Tensor(l.data) for l in leaves]).data * weights))
        worst = max(worst, rel_error(leaf.grad, numeric_grad(f, leaf.data, step)))
    return worst


def unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    x = rng.normal(size=(rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
