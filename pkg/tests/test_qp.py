import numpy as np
import pytest
import scipy.sparse as sp

from dercoord.qp import INFEASIBLE, OPTIMAL, QpError, QuadraticProgram, kkt_residuals, solve_qp

from helpers import active_set_kkt_objective, planted_qp


def test_clipped_minimum():
    # (x - 1)^2 on [0, 0.5]
    qp = QuadraticProgram(Q=[[2.0]], c=[-2.0], const=1.0, lower=[0.0], upper=[0.5])
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(0.5, abs=1e-6)
    assert sol.objective == pytest.approx(0.25, abs=1e-6)


def test_symmetric_equality():
    qp = QuadraticProgram(Q=2 * np.eye(2), c=np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0])
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-6)
    assert sol.objective == pytest.approx(2.0, abs=1e-6)


def test_one_dimensional_grid_oracle():
    # x^2 - 4x on [-1, 1] written with one inequality and one bound
    qp = QuadraticProgram(Q=[[2.0]], c=[-4.0], A_in=[[1.0]], b_in=[1.0], lower=[-1.0])
    sol = solve_qp(qp)
    grid = np.linspace(-1.0, 1.0, 20001)
    vals = grid ** 2 - 4 * grid
    k = int(np.argmin(vals))
    assert grid[k] == pytest.approx(1.0)
    assert vals[k] == pytest.approx(-3.0)
    assert sol.x[0] == pytest.approx(grid[k], abs=1e-4)
    assert sol.objective == pytest.approx(vals[k], abs=1e-6)


@pytest.mark.parametrize("seed", range(40))
def test_planted_qp_matches_kkt_direct_solve(seed):
    rng = np.random.default_rng(seed)
    qp, x, structure = planted_qp(rng)
    ref, _ = active_set_kkt_objective(qp, x, structure)
    assert qp.objective(x) == pytest.approx(ref, abs=1e-8)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    assert sol.kkt_residual <= 1e-6
    assert abs(sol.objective - ref) <= 1e-6


def independent_residual(qp, x, y_eq, y_in, z):
    """KKT residual from dense matrices, written without the library helper."""
    Q, Ae, Ai = qp.Q.toarray(), qp.A_eq.toarray(), qp.A_in.toarray()
    parts = [0.0]
    if len(qp.b_eq):
        parts.append(np.max(np.abs(Ae.dot(x) - qp.b_eq)))
    s = qp.b_in - Ai.dot(x)
    if len(s):
        parts.append(np.max(np.clip(-s, 0, None)))
    parts.append(np.max(np.clip(qp.lower - x, 0, None)))
    parts.append(np.max(np.clip(x - qp.upper, 0, None)))
    prim = max(parts)
    stat = np.max(np.abs(Q.dot(x) + qp.c + Ae.T.dot(y_eq) + Ai.T.dot(y_in) + z))
    comp = [0.0]
    if len(s):
        comp += [np.max(np.abs(y_in * s)), np.max(np.clip(-y_in, 0, None))]
    up = np.isfinite(qp.upper)
    lo = np.isfinite(qp.lower)
    if up.any():
        comp.append(np.max(np.abs(np.clip(z, 0, None)[up] * (qp.upper - x)[up])))
    if lo.any():
        comp.append(np.max(np.abs(np.clip(-z, 0, None)[lo] * (x - qp.lower)[lo])))
    return max(prim, stat, max(comp))


@pytest.mark.parametrize("seed", range(20))
def test_reported_residual_recomputes(seed):
    qp, _, _ = planted_qp(np.random.default_rng(100 + seed))
    sol = solve_qp(qp)
    again = independent_residual(qp, sol.x, sol.y_eq, sol.y_in, sol.z)
    assert abs(again - sol.kkt_residual) <= 1e-9
    assert max(kkt_residuals(qp, sol.x, sol.y_eq, sol.y_in, sol.z)) == pytest.approx(sol.kkt_residual, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_interior_coordinates_are_stationary(seed):
    # d/dx_k of the Lagrangian by central differences vanishes where x_k is off its bounds
    qp, _, _ = planted_qp(np.random.default_rng(200 + seed), n_max=15)
    sol = solve_qp(qp, tol=1e-8)
    x = sol.x

    def lagrangian(v):
        return qp.objective(v) + sol.y_eq @ (qp.A_eq @ v - qp.b_eq) + sol.y_in @ (qp.A_in @ v - qp.b_in)

    h = 1e-4
    grad = qp.Q @ x + qp.c
    interior = np.flatnonzero((x > qp.lower + 1e-3) & (x < qp.upper - 1e-3))
    for k in interior:
        e = np.zeros(qp.n)
        e[k] = h
        fd = (lagrangian(x + e) - lagrangian(x - e)) / (2 * h)
        assert abs(fd) <= 1e-4 * max(1.0, abs(grad[k]))


def test_infeasible_status():
    # x >= 1 from the bound, x <= 0 from the inequality
    qp = QuadraticProgram(Q=[[1.0]], c=[0.0], A_in=[[1.0]], b_in=[0.0], lower=[1.0], upper=[2.0])
    sol = solve_qp(qp, max_iter=20_000)
    assert sol.status == INFEASIBLE


def test_budget_exhausted_returns_best_iterate():
    qp, _, _ = planted_qp(np.random.default_rng(7))
    sol = solve_qp(qp, max_iter=0)
    assert sol.status in ("max_iter", OPTIMAL)
    assert sol.x.shape == (qp.n,)


def test_construction_errors():
    with pytest.raises(QpError):
        QuadraticProgram(Q=[[1.0, 2.0], [0.0, 1.0]], c=[0.0, 0.0])
    with pytest.raises(QpError):
        QuadraticProgram(Q=np.eye(2), c=[0.0, 0.0], lower=[1.0, 0.0], upper=[0.0, 1.0])
    with pytest.raises(QpError):
        QuadraticProgram(Q=np.eye(2), c=[0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[1.0, 2.0])
    with pytest.raises(QpError):
        solve_qp(QuadraticProgram(Q=sp.eye(1), c=[0.0]), tol=0.0)
