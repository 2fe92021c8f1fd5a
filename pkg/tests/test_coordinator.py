import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dercoord import fixedpoint as fx
from dercoord.coordinator import (
    ACCEPTED,
    REJECTED_DUPLICATE,
    REJECTED_INVALID,
    REJECTED_STALE,
    InMemoryContract,
    initial_state,
    residuals,
    run_admm,
    sct_update,
    settlement,
    trades_tensor,
)
from dercoord.model import AdmmSettings, ModelError, Scenario, ShiftableSpec, TimeGrid, check_feasibility

from helpers import env, profile, random_scenario


def zero_diag(a):
    a = np.array(a, dtype=float)
    idx = np.arange(a.shape[0])
    a[idx, idx] = 0.0
    return a


def tensors(N_max=4, T_max=3):
    dims = st.tuples(st.integers(1, N_max), st.integers(1, T_max))
    vals = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
    return dims.flatmap(lambda d: st.tuples(
        arrays(float, (d[0], d[0], d[1]), elements=vals).map(zero_diag),
        arrays(float, (d[0], d[0], d[1]), elements=vals).map(zero_diag),
    ))


def with_lambda(lam):
    s = initial_state(lam.shape[0], lam.shape[2])
    s.lam = lam
    return s


# closed-form update -----------------------------------------------------------

def test_cleared_trades_are_a_fixed_point():
    p = np.zeros((2, 2, 1))
    p[0, 1], p[1, 0] = 1.0, -1.0
    s = sct_update(initial_state(2, 1), p, 1.0)
    np.testing.assert_array_equal(s.p_hat, p)
    np.testing.assert_array_equal(s.lam, 0.0)
    assert s.iteration == 1


def test_one_sided_offer_splits():
    p = np.zeros((2, 2, 1))
    p[0, 1] = 1.0
    s = sct_update(initial_state(2, 1), p, 1.0)
    assert s.p_hat[0, 1, 0] == 0.5 and s.p_hat[1, 0, 0] == -0.5
    assert s.lam[0, 1, 0] == -0.5 and s.lam[1, 0, 0] == -0.5
    assert (s.r_primal, s.r_dual) == (0.5, 0.5)


def test_update_errors():
    with pytest.raises(ModelError):
        sct_update(initial_state(2, 1), np.zeros((2, 2, 1)), 0.0)
    with pytest.raises(ModelError):
        sct_update(initial_state(2, 1), np.zeros((3, 3, 1)), 1.0)
    with pytest.raises(ModelError):
        sct_update(initial_state(2, 1), np.ones((2, 2, 1)), 1.0)


@settings(max_examples=200, deadline=None)
@given(tensors(), st.floats(0.01, 100))
def test_p_hat_exactly_antisymmetric(data, rho):
    p, lam = data
    s = sct_update(with_lambda(lam), p, rho)
    assert (s.p_hat + s.p_hat.transpose(1, 0, 2) == 0).all()


@settings(max_examples=200, deadline=None)
@given(tensors(), st.floats(0.01, 100))
def test_agreeing_trades_leave_state_unchanged(data, rho):
    p, lam = data
    p = p - p.transpose(1, 0, 2)  # already cleared
    lam = lam + lam.transpose(1, 0, 2)  # symmetric prices
    s0 = with_lambda(lam)
    s0.p_hat = p.copy()
    s = sct_update(s0, p, rho)
    np.testing.assert_allclose(s.p_hat, p, atol=1e-12)
    np.testing.assert_allclose(s.lam, lam, atol=1e-12)
    assert s.r_primal <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_prices_stay_symmetric(N, T, rounds, seed):
    rng = np.random.default_rng(seed)
    s = initial_state(N, T)
    for _ in range(rounds):
        s = sct_update(s, zero_diag(rng.normal(0, 3, (N, N, T))), 0.7)
        np.testing.assert_allclose(s.lam, s.lam.transpose(1, 0, 2), atol=1e-12)


def test_matches_hand_evaluation():
    rng = np.random.default_rng(0)
    for _ in range(200):
        N, T = rng.integers(1, 5), rng.integers(1, 4)
        p, lam = zero_diag(rng.normal(0, 5, (N, N, T))), zero_diag(rng.normal(0, 5, (N, N, T)))
        rho = float(rng.uniform(0.1, 10))
        s = sct_update(with_lambda(lam), p, rho)
        for i in range(N):
            for j in range(N):
                for t in range(T):
                    ph = (rho * (p[i, j, t] - p[j, i, t]) - (lam[i, j, t] - lam[j, i, t])) / (2 * rho)
                    assert s.p_hat[i, j, t] == pytest.approx(ph, abs=1e-12)
                    assert s.lam[i, j, t] == pytest.approx(lam[i, j, t] + rho * (ph - p[i, j, t]), abs=1e-12)


# residuals ----------------------------------------------------------------------

def test_residual_examples():
    s = initial_state(2, 2)
    assert residuals(s, 1.0) == (0.0, 0.0)
    s.last_trades[0, 1, 1] = 0.3
    assert residuals(s, 1.0)[0] == pytest.approx(0.3)
    s.p_hat[1, 0, 0] = 0.25
    s.p_hat_prev = s.p_hat.copy()
    assert residuals(s, 2.0)[1] == 0.0
    s.p_hat_prev[1, 0, 0] = 0.0
    assert residuals(s, 2.0)[1] == pytest.approx(0.5)


# fixed-point contract stub --------------------------------------------------------

def test_stub_statuses():
    c = InMemoryContract(2, 1, 1.0)
    m = np.array([[0.0, 1.0]])
    assert c.submit_trades(0, 1, m) == REJECTED_STALE
    assert c.submit_trades(0, 0, np.array([[1.0, 1.0]])) == REJECTED_INVALID
    assert c.submit_trades(0, 0, np.array([[0.0, np.nan]])) == REJECTED_INVALID
    assert c.submit_trades(0, 0, m) == ACCEPTED
    assert c.submit_trades(0, 0, m) == REJECTED_DUPLICATE
    assert c.iteration == 0
    assert c.submit_trades(1, 0, np.zeros((1, 2))) == ACCEPTED
    assert c.iteration == 1
    lam, ph, k = c.read_state(1)
    assert k == 1 and lam[0, 0] == -0.5 and ph[0, 0] == -0.5


@pytest.mark.parametrize("seed", range(5))
def test_fixed_point_tracks_float_update(seed):
    rng = np.random.default_rng(seed)
    N, T = 3, 4
    a, b = InMemoryContract(N, T, 1.3), InMemoryContract(N, T, 1.3, fixed_point=False)
    for k in range(10):
        for i in range(N):
            m = rng.normal(0, 2, (T, N))
            m[:, i] = 0.0
            a.submit_trades(i, k, m)
            b.submit_trades(i, k, m)
        sa, sb = a.snapshot(), b.snapshot()
        assert (sa.p_hat + sa.p_hat.transpose(1, 0, 2) == 0).all()
        np.testing.assert_allclose(sa.p_hat, sb.p_hat, atol=1e-7)
        np.testing.assert_allclose(sa.lam, sb.lam, atol=1e-7)
        np.testing.assert_allclose(a.residuals(), b.residuals(), atol=1e-7)


def test_fixed_point_rounding():
    np.testing.assert_array_equal(fx.encode([1e-9, -2.5e-9, 0.5e-9, 1.5e-9]), [1, -2, 0, 2])
    np.testing.assert_array_equal(fx.div_round(np.array([5, 7, -5, 3]), 2), [2, 4, -2, 2])
    with pytest.raises(fx.FixedPointOverflow):
        fx.encode([1e12])


# full loop --------------------------------------------------------------------------

def fleet(prosumers, e, **admm):
    return Scenario(TimeGrid(e.T), e, tuple(prosumers), AdmmSettings(**admm))


def test_single_prosumer_converges_immediately():
    T = 3
    rep = run_admm(fleet([profile(T, gen=np.ones(T), fit=np.full(T, 0.1))], env(T)))
    assert rep.converged and rep.iterations == 1
    assert rep.history == [(0.0, 0.0)]


def mirror_pair(T=4):
    # one has midday sun and no load, the other the same load without sun
    gen = np.array([0.0, 3.0, 3.0, 0.0])[:T]
    shift = ShiftableSpec(window=[1, 2], preferred=np.array([0.0, 1.0, 1.0, 0.0])[:T], omega_S=0.5)
    a = profile(T, 0, gen=gen, fit=np.full(T, 0.1), pi_D=0.5)
    b = profile(T, 1, shift=shift, pi_D=0.5)
    return fleet([a, b], env(T))


def test_complementary_pair_trades():
    scen = mirror_pair()
    rep = run_admm(scen)
    assert rep.converged
    r_p, r_d = rep.history[-1]
    assert r_p <= 1e-3 and r_d <= 1e-3
    trades = trades_tensor(rep.schedules)
    np.testing.assert_allclose(trades, -trades.transpose(1, 0, 2), atol=2e-3)
    assert trades[0, 1].sum() > 1.5  # the sunny one sells
    for p, s in zip(scen.prosumers, rep.schedules):
        assert check_feasibility(p, scen.env, s, tol=1e-5) == []
    pay = settlement(rep.state.lam, trades)
    np.testing.assert_allclose(pay, rep.settlement)
    assert pay[0, 1] == pytest.approx(np.sum(rep.state.lam[0, 1] * trades[0, 1]))


def test_runs_are_reproducible():
    scen = random_scenario(np.random.default_rng(4), 3, 4)
    a, b = run_admm(scen), run_admm(scen)
    assert a.history == b.history
    assert a.total_cost == b.total_cost


def test_workers_do_not_change_result():
    scen = random_scenario(np.random.default_rng(6), 3, 4)
    assert run_admm(scen).history == run_admm(scen, workers=3).history


def test_iteration_budget_flagged():
    scen = random_scenario(np.random.default_rng(9), 3, 6, max_iterations=2, eps_primal=1e-9, eps_dual=1e-9)
    rep = run_admm(scen)
    assert rep.status == "max_iter" and rep.iterations == 2


def test_callback_sees_each_iteration():
    seen = []
    rep = run_admm(mirror_pair(), callback=lambda k, p, d: seen.append((k, p, d)))
    assert [k for k, _, _ in seen] == list(range(1, rep.iterations + 1))
    assert [(p, d) for _, p, d in seen] == rep.history
