import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partflow import ipalm
from partflow.ipalm import BlockState, StepFailure, ipalm_step, run


class Quadratic:
    """H(z) = 1/2 z^T A z - b^T z split into two blocks; F = 0."""

    def __init__(self, A, b, sizes=(3, 2), lower=None):
        self.A, self.b = A, b
        self.blocks = ("x", "y")
        self.split = sizes[0]
        self.lower = lower  # optional box constraint on x, handled by the prox

    def _z(self, z):
        return np.concatenate([z["x"], z["y"]])

    def grad_full(self, z):
        return self.A @ self._z(z) - self.b

    def smooth(self, z, block):
        v = self._z(z)
        g = self.A @ v - self.b
        g = g[: self.split] if block == "x" else g[self.split:]
        return 0.5 * v @ self.A @ v - self.b @ v, g

    def smooth_value(self, z, block):
        v = self._z(z)
        return 0.5 * v @ self.A @ v - self.b @ v

    def prox(self, block, v, L):
        if block == "x" and self.lower is not None:
            return np.maximum(v, self.lower)
        return v

    def nonsmooth(self, z):
        return 0.0


def spd(rng, n, cond=20.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def test_quadratic_converges_to_gradient_below_1e8():
    rng = np.random.default_rng(3)
    A, b = spd(rng, 5), rng.normal(size=5)
    prob = Quadratic(A, b)
    state = BlockState({"x": np.zeros(3), "y": np.zeros(2)})
    state, report = run(state, prob, max_iters=200, tol=0.0, check=True)
    assert np.linalg.norm(prob.grad_full(state.z)) < 1e-8
    np.testing.assert_allclose(np.concatenate([state.z["x"], state.z["y"]]),
                               np.linalg.solve(A, b), atol=1e-8)


def test_every_accepted_step_satisfies_descent_test():
    rng = np.random.default_rng(4)
    prob = Quadratic(spd(rng, 5, 100.0), rng.normal(size=5), lower=0.0)
    state = BlockState({"x": rng.normal(size=3), "y": rng.normal(size=2)}, L={"x": 1e-3, "y": 1e-3})
    _, report = run(state, prob, max_iters=50, tol=0.0, check=True)
    assert len(report.audit) == 2 * report.iterations
    assert sum(r.backtracks for r in report.audit) > 0  # tiny initial L forces backtracking
    for r in report.audit:
        assert r.lhs <= r.rhs


def test_L_halves_after_clean_step():
    prob = Quadratic(np.eye(2) * 0.1, np.zeros(2), sizes=(1, 1))
    state = BlockState({"x": np.ones(1), "y": np.ones(1)}, L={"x": 1.0, "y": 1.0})
    ipalm_step(state, prob)
    assert state.L == {"x": 0.5, "y": 0.5}


def test_energy_monotone_without_inertia():
    rng = np.random.default_rng(5)
    prob = Quadratic(spd(rng, 5), rng.normal(size=5))
    state = BlockState({"x": np.zeros(3), "y": np.zeros(2)}, tau=0.0)
    _, report = run(state, prob, max_iters=60, tol=0.0)
    assert np.all(np.diff(report.energies) <= 1e-12)


class Broken(Quadratic):
    def smooth(self, z, block):
        H, g = super().smooth(z, block)
        return H, -g  # wrong sign: no step size can satisfy the test


def test_wrong_gradient_raises_step_failure():
    rng = np.random.default_rng(6)
    prob = Broken(1e3 * spd(rng, 5), rng.normal(size=5))
    state = BlockState({"x": np.ones(3), "y": np.ones(2)})
    with pytest.raises(StepFailure):
        ipalm_step(state, prob)


def test_tolerance_stops_early_and_report_csv():
    rng = np.random.default_rng(7)
    prob = Quadratic(spd(rng, 5, 5.0), rng.normal(size=5))
    state = BlockState({"x": np.zeros(3), "y": np.zeros(2)})
    _, report = run(state, prob, max_iters=500, tol=1e-10)
    assert report.converged and report.iterations < 500
    lines = report.to_csv().splitlines()
    assert lines[0] == "iteration,energy,L_x,L_y,backtracks"
    assert len(lines) == report.iterations + 1


def test_run_rejects_zero_iterations():
    prob = Quadratic(np.eye(5), np.zeros(5))
    with pytest.raises(ValueError):
        run(BlockState({"x": np.zeros(3), "y": np.zeros(2)}), prob, max_iters=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 1e3))
def test_audit_holds_for_random_quadratics(seed, cond):
    rng = np.random.default_rng(seed)
    prob = Quadratic(spd(rng, 5, cond), rng.normal(size=5), lower=-0.2)
    state = BlockState({"x": rng.normal(size=3), "y": rng.normal(size=2)},
                       L={"x": float(rng.uniform(1e-3, 1e3)), "y": float(rng.uniform(1e-3, 1e3))})
    _, report = run(state, prob, max_iters=20, tol=0.0, check=True)
    assert all(r.lhs <= r.rhs for r in report.audit)
    assert ipalm.INERTIA == pytest.approx(2 ** -0.5)
