import numpy as np
import pytest

from metagrad.mdp import TabularMdp, generate_random_mdp


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(f, x, h):
    """Central differences of f at x; the result is stacked along a new first axis."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        cols.append((np.asarray(f((flat + e).reshape(x.shape)))
                     - np.asarray(f((flat - e).reshape(x.shape)))) / (2 * h))
    return np.stack(cols)


def random_mdp(seed, n_states=5, n_actions=3, horizon=6, discount=0.9, density=1.0):
    return generate_random_mdp(seed, n_states, n_actions, density, horizon, discount)


def tiny_mdp(seed, n_states=2, n_actions=2, horizon=2, discount=0.9):
    """Dense small MDP with a non-uniform start distribution, for enumeration."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(-1, keepdims=True)
    R = rng.uniform(-1, 1, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    rho /= rho.sum()
    return TabularMdp(P, R, discount, horizon, rho)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register here and are summarized at the end of the run
ACCEPTANCE = []


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE.append((number, title, bool(passed), detail))
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}" + (f": {detail}" if detail else ""))
