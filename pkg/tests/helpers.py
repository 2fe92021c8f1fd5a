"""Scenario builders and independent oracles shared by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from dercoord.model import (
    AdmmSettings,
    EnvironmentProfile,
    GridTariff,
    HvacParams,
    ProsumerProfile,
    RenewableProfile,
    Scenario,
    ServiceRates,
    ShiftableSpec,
    StorageParams,
    TimeGrid,
)
from dercoord.qp import QuadraticProgram


def env(T, tau=24.0, slot_hours=1.0):
    tau_out = np.full(T, float(tau)) if np.isscalar(tau) else np.asarray(tau, dtype=float)
    return EnvironmentProfile(tau_out, slot_hours)


def idle_hvac(tau=24.0, **kw):
    """HVAC that has no reason to run when the outdoor temperature equals ``tau``."""
    fields = dict(R=2.0, C=2.0, gamma=-1.0, omega_AC=0.1, tau_ref=tau, tau_min=tau - 5, tau_max=tau + 5,
                  tau_init=tau)
    fields.update(kw)
    return HvacParams(**fields)


def profile(T, pid=0, *, pi_E=1.0, pi_D=0.0, P_G_max=10.0, gen=None, hvac=None, shift=None, storage=None,
            fit=None, dr=None):
    return ProsumerProfile(
        id=pid,
        tariff=GridTariff(pi_E, pi_D, P_G_max),
        hvac=hvac or idle_hvac(),
        shiftable=shift or ShiftableSpec.none(T),
        renewable=RenewableProfile(np.zeros(T) if gen is None else gen),
        storage=storage or StorageParams.none(),
        rates=ServiceRates(np.zeros(T) if fit is None else fit, np.zeros(T) if dr is None else dr),
    )


def random_profile(rng, T, pid, rich):
    """A heterogeneous prosumer with HVAC, a shiftable task, solar and a battery."""
    eps = math.exp(-1.0 / 4.0)
    hvac = HvacParams(R=2.0, C=2.0, gamma=-(1 - eps) * 2.0 * rng.uniform(2.5, 3.0),
                      omega_AC=rng.uniform(0.02, 0.1), tau_ref=23.0, tau_min=20.0, tau_max=26.0,
                      tau_init=24.0, p_AC_max=5.0)
    start = int(rng.integers(0, T - 1))
    pref = np.zeros(T)
    pref[start:start + 2] = rng.uniform(1.0, 2.5, 2)[: T - start]
    win = list(range(max(0, start - 1), min(T, start + 3)))
    shift = ShiftableSpec(window=win, preferred=pref, omega_S=rng.uniform(0.02, 0.1))
    peak = 4.0 if rich else 1.0
    gen = peak * rng.uniform(0.0, 1.0, T)
    cap = 6.0 if rich else 3.0
    storage = StorageParams(E_cap=cap, eta_ch=0.95, eta_dis=0.95, alpha_min=0.1, alpha_max=0.9,
                            P_ch_max=2.0, P_dis_max=2.0, beta=0.025, e_init=0.1 * cap)
    return ProsumerProfile(
        pid, GridTariff(1.0, 2.0, 10.0), hvac, shift, RenewableProfile(gen), storage,
        ServiceRates(np.full(T, 0.3), np.where(rng.random(T) < 0.3, 1.25, 0.0)),
    )


def random_scenario(rng, N, T, **admm):
    tau_out = rng.uniform(28.0, 34.0, T)
    prosumers = [random_profile(rng, T, k, rich=k % 2 == 0) for k in range(N)]
    return Scenario(TimeGrid(T), env(T, tau_out), tuple(prosumers), AdmmSettings(**admm))


# QP oracles -----------------------------------------------------------------

def planted_qp(rng, n_max=30):
    """Random convex QP with a known KKT point ``x``.

    ``Q`` may be singular, some inequalities and bounds are active with
    positive multipliers and the rest slack; ``c`` is chosen so that
    stationarity holds at ``x``. Convexity makes ``x`` a global minimizer.
    """
    n = int(rng.integers(2, n_max + 1))
    r = int(rng.integers(0, n + 1))
    M = rng.standard_normal((r, n))
    Q = M.T @ M
    x = rng.standard_normal(n)
    me = int(rng.integers(0, max(1, n // 3) + 1))
    mi = int(rng.integers(0, n + 1))
    Ae = rng.standard_normal((me, n))
    Ai = rng.standard_normal((mi, n))
    act = rng.random(mi) < 0.4
    bi = Ai @ x + np.where(act, 0.0, rng.uniform(0.1, 2, mi))
    yi = np.where(act, rng.uniform(0, 2, mi), 0.0)
    ye = rng.standard_normal(me)
    lo = x - np.where(rng.random(n) < 0.5, rng.uniform(0.1, 2, n), np.inf)
    up = x + np.where(rng.random(n) < 0.5, rng.uniform(0.1, 2, n), np.inf)
    kind = rng.integers(0, 3, n)  # 0 free, 1 lower bound active, 2 upper bound active
    lo = np.where(kind == 1, x, lo)
    up = np.where(kind == 2, x, up)
    z = np.where(kind == 1, -rng.uniform(0, 2, n), np.where(kind == 2, rng.uniform(0, 2, n), 0.0))
    c = -(Q @ x + Ae.T @ ye + Ai.T @ yi + z)
    qp = QuadraticProgram(Q=Q, c=c, A_eq=Ae, b_eq=Ae @ x, A_in=Ai, b_in=bi, lower=lo, upper=up)
    return qp, x, (Ae, Ai[act], kind)


def active_set_kkt_objective(qp, x_planted, structure):
    """Optimal value from a direct solve of the KKT system restricted to the active set."""
    Ae, Ai_act, kind = structure
    n = qp.n
    Q = qp.Q.toarray()
    E = np.eye(n)
    rows = [Ae, Ai_act, E[kind == 1], E[kind == 2]]
    A = np.vstack([r.reshape(-1, n) for r in rows])
    b = A @ x_planted
    m = A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    rhs = np.concatenate([-qp.c, b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return qp.objective(sol[:n]), sol[:n]


# brute-force schedule oracles ------------------------------------------------

def grid_points(lo, hi, step):
    k = int(round((hi - lo) / step))
    return lo + step * np.arange(k + 1)


def temperature_path(tau_out, tau_init, gamma, eps, p_ac):
    """Indoor temperature recursion evaluated row-wise on a batch of HVAC profiles."""
    p_ac = np.atleast_2d(p_ac)
    out = np.empty_like(p_ac, dtype=float)
    prev = np.full(p_ac.shape[0], float(tau_init))
    for t in range(p_ac.shape[1]):
        prev = tau_out[t] - (tau_out[t] - prev) * eps + gamma * p_ac[:, t]
        out[:, t] = prev
    return out


def settle_grid(need, gen, pi_E, pi_D, pi_FIT):
    """Cheapest grid purchase and feed-in for a batch of per-slot net needs.

    With no demand-response reward the grid covers exactly the shortfall and
    every surplus kW of renewable is fed in (the feed-in price is >= 0).
    Returns the cost, or ``inf`` where the need is negative (nowhere to put
    the energy).
    """
    short = np.maximum(need - gen, 0.0)
    surplus = np.maximum(gen - np.maximum(need, 0.0), 0.0)
    cost = pi_E * short.sum(axis=-1) + pi_D * short.max(axis=-1) - (pi_FIT * surplus).sum(axis=-1)
    return np.where((need < -1e-12).any(axis=-1), np.inf, cost)


def brute_force_hvac(tau_out, hvac, pi_E, pi_D, step=0.05, p_max=None):
    """Exhaustive search over HVAC power on a grid; grid covers the rest."""
    T = len(tau_out)
    p_max = hvac.p_AC_max if p_max is None else p_max
    eps = math.exp(-1.0 / (hvac.R * hvac.C))
    axis = grid_points(0.0, p_max, step)
    P = np.array(list(itertools.product(axis, repeat=T)))
    tau = temperature_path(tau_out, hvac.tau_init, hvac.gamma, eps, P)
    ok = ((tau >= hvac.tau_min - 1e-9) & (tau <= hvac.tau_max + 1e-9)).all(axis=1)
    cost = pi_E * P.sum(axis=1) + pi_D * P.max(axis=1) + hvac.omega_AC * ((tau - hvac.tau_ref) ** 2).sum(axis=1)
    cost = np.where(ok, cost, np.inf)
    k = int(np.argmin(cost))
    return float(cost[k]), P[k]


def brute_force_storage(load, gen, storage, pi_E, pi_D, pi_FIT, step=0.05):
    """Exhaustive search over net battery power ``b = p_CH - p_DIS`` on a grid.

    Simultaneous charging and discharging only adds losses and degradation,
    so one signed variable per slot covers the candidates.
    """
    T = len(load)
    axis = grid_points(-storage.P_dis_max, storage.P_ch_max, step)
    B = np.array(list(itertools.product(axis, repeat=T)))
    ch, dis = np.maximum(B, 0.0), np.maximum(-B, 0.0)
    e = storage.e_init + np.cumsum(storage.eta_ch * ch - dis / storage.eta_dis, axis=1)
    ok = ((e >= storage.alpha_min * storage.E_cap - 1e-9) & (e <= storage.alpha_max * storage.E_cap + 1e-9)).all(axis=1)
    cost = settle_grid(load + B, gen, pi_E, pi_D, pi_FIT) + storage.beta * (ch + dis).sum(axis=1)
    cost = np.where(ok, cost, np.inf)
    k = int(np.argmin(cost))
    return float(cost[k]), B[k]


def brute_force_shiftable(shift, gen, pi_E, pi_D, pi_FIT, step=0.05):
    """Exhaustive search over shiftable profiles on a grid that sum to the routine total."""
    win = list(shift.window)
    total = float(shift.preferred.sum())
    axis = grid_points(0.0, shift.p_S_max, step)
    free = np.array(list(itertools.product(axis, repeat=len(win) - 1)))
    last = total - free.sum(axis=1)
    keep = (last >= -1e-9) & (last <= shift.p_S_max + 1e-9)
    S = np.zeros((int(keep.sum()), len(gen)))
    S[:, win[:-1]] = free[keep]
    S[:, win[-1]] = last[keep]
    cost = settle_grid(S, gen, pi_E, pi_D, pi_FIT) + shift.omega_S * ((S - shift.preferred)[:, win] ** 2).sum(axis=1)
    k = int(np.argmin(cost))
    return float(cost[k]), S[k]
