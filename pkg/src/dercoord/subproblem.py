"""Local prosumer task and the centralized fleet problem as quadratic programs.

Each prosumer contributes one column block::

    p_G | p_AC | p_S | p_CH | p_DIS | p_RE | p_FIT | p_DR | p_ET[j] for j != i | d

where ``d`` is the epigraph variable of the demand charge (``d >= p_G[t]``).
Indoor temperature is not a column: it is the affine map
``tau_in = offset + M @ p_AC`` recorded in ``var_index["tau_in"]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import (
    POWER_FIELDS,
    DecisionSchedule,
    EnvironmentProfile,
    ModelError,
    ProsumerProfile,
    Scenario,
    prosumer_cost,
    temperature_affine,
)
from .qp import OPTIMAL, QpSolution, QpSolver, QuadraticProgram


class SubproblemError(RuntimeError):
    """A QP did not reach ``optimal``; ``solution`` holds the best iterate."""

    def __init__(self, message: str, solution: Optional[QpSolution] = None):
        super().__init__(message)
        self.solution = solution


@dataclass
class _Block:
    n: int
    index: dict
    Q: sp.spmatrix
    c: np.ndarray
    const: float
    A_eq: sp.spmatrix
    b_eq: np.ndarray
    A_in: sp.spmatrix
    b_in: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def _rows(mats, n):
    return sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, n))


def _prosumer_block(profile: ProsumerProfile, env: EnvironmentProfile, N: int) -> _Block:
    T = env.T
    h = env.slot_hours
    profile.validate(T)
    i = profile.id
    if not 0 <= i < N:
        raise ModelError(f"prosumer id {i} outside fleet of size {N}")
    tar, hv, sh, st, rates = profile.tariff, profile.hvac, profile.shiftable, profile.storage, profile.rates
    gen = profile.renewable.gen

    index: dict = {}
    col = 0
    for name in POWER_FIELDS:
        index[name] = slice(col, col + T)
        col += T
    et = {}
    for j in range(N):
        if j != i:
            et[j] = slice(col, col + T)
            col += T
    index["p_ET"] = et
    index["d"] = col
    col += 1
    n = col
    offset, M = temperature_affine(hv, env)
    index["tau_in"] = (offset, M)

    def sel(name, coef=1.0):
        s = index[name]
        return sp.csr_matrix((np.full(T, coef, dtype=float), (np.arange(T), np.arange(s.start, s.stop))), shape=(T, n))

    # objective
    c = np.zeros(n)
    c[index["p_G"]] = tar.pi_E * h
    c[index["d"]] = tar.pi_D
    c[index["p_CH"]] = st.beta * h
    c[index["p_DIS"]] = st.beta * h
    c[index["p_FIT"]] = -rates.pi_FIT * h
    c[index["p_DR"]] = -rates.pi_DR * h
    const = 0.0
    Q = sp.lil_matrix((n, n))
    ac = index["p_AC"]
    dev = offset - hv.tau_ref
    Q[ac, ac] = 2.0 * hv.omega_AC * (M.T @ M)
    c[ac] += 2.0 * hv.omega_AC * (M.T @ dev)
    const += hv.omega_AC * float(dev @ dev)
    mask = sh.mask
    ps = np.arange(index["p_S"].start, index["p_S"].stop)[mask]
    Q[ps, ps] = 2.0 * sh.omega_S
    c[ps] += -2.0 * sh.omega_S * sh.preferred[mask]
    const += sh.omega_S * float(sh.preferred[mask] @ sh.preferred[mask])

    # bounds
    lower = np.zeros(n)
    upper = np.zeros(n)
    upper[index["p_G"]] = tar.P_G_max
    upper[index["p_AC"]] = hv.p_AC_max
    upper[index["p_S"]] = np.where(mask, sh.p_S_max, 0.0)
    upper[index["p_CH"]] = st.P_ch_max
    upper[index["p_DIS"]] = st.P_dis_max
    upper[index["p_RE"]] = gen
    upper[index["p_FIT"]] = gen
    upper[index["p_DR"]] = tar.P_G_max
    for s in et.values():
        lower[s] = -np.inf
        upper[s] = np.inf
    upper[index["d"]] = tar.P_G_max

    # equalities: balance, task completion
    bal = (sel("p_AC") + sel("p_S") + sel("p_CH") - sel("p_RE") - sel("p_G") + sel("p_DR") - sel("p_DIS"))
    for s in et.values():
        bal = bal + sp.csr_matrix((np.ones(T), (np.arange(T), np.arange(s.start, s.stop))), shape=(T, n))
    eq, beq = [bal], [np.zeros(T)]
    if mask.any():
        row = sp.csr_matrix((np.ones(ps.size), (np.zeros(ps.size, dtype=int), ps)), shape=(1, n))
        eq.append(row)
        beq.append(np.array([sh.preferred.sum()]))

    # inequalities
    ones_d = sp.csr_matrix((np.ones(T), (np.arange(T), np.full(T, index["d"]))), shape=(T, n))
    ineq = [sel("p_G") - ones_d, sel("p_DR") - sel("p_G"), sel("p_RE") + sel("p_FIT")]
    bin_ = [np.zeros(T), np.zeros(T), gen]
    if hv.gamma != 0.0:
        Mfull = sp.lil_matrix((T, n))
        Mfull[:, ac] = M
        Mfull = Mfull.tocsr()
        ineq += [Mfull, -Mfull]
        bin_ += [hv.tau_max - offset, offset - hv.tau_min]
    elif np.any(offset > hv.tau_max) or np.any(offset < hv.tau_min):
        # uncontrollable temperature outside the band: keep the infeasibility visible
        ineq.append(sp.csr_matrix((1, n)))
        bin_.append(np.array([-1.0]))
    if st.P_ch_max > 0 or st.P_dis_max > 0:
        L = np.tril(np.ones((T, T)))
        S = sp.lil_matrix((T, n))
        S[:, index["p_CH"]] = st.eta_ch * h * L
        S[:, index["p_DIS"]] = -(h / st.eta_dis) * L
        S = S.tocsr()
        ineq += [S, -S]
        bin_ += [np.full(T, st.alpha_max * st.E_cap - st.e_init), np.full(T, st.e_init - st.alpha_min * st.E_cap)]
        # terminal rule adds nothing here: without storage activity e_B[T] == e_init

    return _Block(
        n=n, index=index, Q=Q.tocsc(), c=c, const=const,
        A_eq=_rows(eq, n), b_eq=np.concatenate(beq),
        A_in=_rows(ineq, n), b_in=np.concatenate(bin_),
        lower=lower, upper=upper,
    )


def _terminal_row(profile: ProsumerProfile, env: EnvironmentProfile, block: _Block):
    st = profile.storage
    if st.terminal_rule != "at_least_initial" or not (st.P_ch_max > 0 or st.P_dis_max > 0):
        return None
    h = env.slot_hours
    row = np.zeros(block.n)
    row[block.index["p_CH"]] = -st.eta_ch * h
    row[block.index["p_DIS"]] = h / st.eta_dis
    return row


def _finish_block(profile, env, block: _Block) -> _Block:
    row = _terminal_row(profile, env, block)
    if row is not None:
        block.A_in = sp.vstack([block.A_in, sp.csr_matrix(row)], format="csr")
        block.b_in = np.append(block.b_in, 0.0)
    return block


def _check_trade_matrix(mat, T, N, i, name):
    m = np.zeros((T, N)) if mat is None else np.array(mat, dtype=float)
    if m.shape != (T, N):
        raise ModelError(f"{name} must have shape {(T, N)}, got {m.shape}")
    if np.any(m[:, i] != 0):
        raise ModelError(f"{name}: column {i} (self-trade) must be zero")
    return m


def assemble_plt(profile: ProsumerProfile, env: EnvironmentProfile, lambda_i, p_hat_i, rho: float,
                 N: Optional[int] = None) -> QuadraticProgram:
    """Prosumer ``i``'s local task at fixed prices ``lambda_i`` and coordinator trades ``p_hat_i``.

    Both matrices are ``T x N`` (row = slot, column = counterparty). ``N`` is
    taken from their width when not given.
    """
    if not rho > 0:
        raise ModelError("rho must be > 0")
    T = env.T
    if N is None:
        N = np.shape(lambda_i)[1] if lambda_i is not None else (np.shape(p_hat_i)[1] if p_hat_i is not None else 1)
    i = profile.id
    lam = _check_trade_matrix(lambda_i, T, N, i, "lambda_i")
    ph = _check_trade_matrix(p_hat_i, T, N, i, "p_hat_i")
    b = _finish_block(profile, env, _prosumer_block(profile, env, N))
    Q = b.Q.tolil()
    c = b.c.copy()
    const = b.const
    for j, s in b.index["p_ET"].items():
        cols = np.arange(s.start, s.stop)
        Q[cols, cols] = rho
        c[s] = -rho * ph[:, j] - lam[:, j]
        const += 0.5 * rho * float(ph[:, j] @ ph[:, j])
    return QuadraticProgram(Q=Q.tocsc(), c=c, A_eq=b.A_eq, b_eq=b.b_eq, A_in=b.A_in, b_in=b.b_in,
                            lower=b.lower, upper=b.upper, const=const,
                            var_index={**b.index, "owner": i, "N": N, "rho": rho})


def plt_linear_term(qp: QuadraticProgram, base_c: np.ndarray, lambda_i, p_hat_i) -> tuple[np.ndarray, float]:
    """Linear term and constant of a PLT for new prices/trades, reusing its structure."""
    rho = qp.var_index["rho"]
    c = base_c.copy()
    const = 0.0
    for j, s in qp.var_index["p_ET"].items():
        c[s] = -rho * p_hat_i[:, j] - lambda_i[:, j]
        const += 0.5 * rho * float(p_hat_i[:, j] @ p_hat_i[:, j])
    return c, const


def assemble_dcm(scenario: Scenario) -> QuadraticProgram:
    """Joint fleet problem with clearing constraints ``p_ij[t] + p_ji[t] = 0``.

    ``var_index["blocks"][i]`` is prosumer ``i``'s block index shifted to its
    global column offset (``var_index["offsets"][i]``).
    """
    N, T, env = scenario.N, scenario.T, scenario.env
    blocks = [_finish_block(p, env, _prosumer_block(p, env, N)) for p in scenario.prosumers]
    offsets = np.cumsum([0] + [b.n for b in blocks])
    n = int(offsets[-1])
    Q = sp.block_diag([b.Q for b in blocks], format="csc")
    c = np.concatenate([b.c for b in blocks])
    const = sum(b.const for b in blocks)
    A_eq = sp.block_diag([b.A_eq for b in blocks], format="csr")
    A_in = sp.block_diag([b.A_in for b in blocks], format="csr")
    b_eq = np.concatenate([b.b_eq for b in blocks])
    b_in = np.concatenate([b.b_in for b in blocks])

    rows, cols, vals = [], [], []
    r = 0
    for i in range(N):
        for j in range(i + 1, N):
            si = blocks[i].index["p_ET"][j]
            sj = blocks[j].index["p_ET"][i]
            for t in range(T):
                rows += [r, r]
                cols += [offsets[i] + si.start + t, offsets[j] + sj.start + t]
                vals += [1.0, 1.0]
                r += 1
    coupling = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
    A_eq = sp.vstack([A_eq, coupling], format="csr")
    b_eq = np.concatenate([b_eq, np.zeros(r)])

    def shift(index, off):
        out = {}
        for k, v in index.items():
            if isinstance(v, slice):
                out[k] = slice(v.start + off, v.stop + off)
            elif k == "p_ET":
                out[k] = {j: slice(s.start + off, s.stop + off) for j, s in v.items()}
            elif k == "d":
                out[k] = v + off
            else:
                out[k] = v
        return out

    var_index = {
        "blocks": [shift(b.index, int(offsets[i])) for i, b in enumerate(blocks)],
        "offsets": [int(o) for o in offsets[:-1]],
        "coupling_rows": r,
        "N": N,
    }
    return QuadraticProgram(Q=Q, c=c, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                            lower=np.concatenate([b.lower for b in blocks]),
                            upper=np.concatenate([b.upper for b in blocks]),
                            const=const, var_index=var_index)


def extract_schedule(profile: ProsumerProfile, env: EnvironmentProfile, x: np.ndarray, index: dict,
                     N: int) -> DecisionSchedule:
    """Read one prosumer's schedule from a solution vector via its column index."""
    T = env.T
    powers = {name: x[index[name]] for name in POWER_FIELDS}
    p_ET = np.zeros((T, N))
    for j, s in index["p_ET"].items():
        p_ET[:, j] = x[s]
    return DecisionSchedule.from_powers(profile, env, p_ET=p_ET, **powers)


def solve_qp_checked(solver: QpSolver, tol: float, max_iter: int, what: str, **kw) -> QpSolution:
    sol = solver.solve(tol=tol, max_iter=max_iter, **kw)
    if sol.status != OPTIMAL:
        raise SubproblemError(f"{what}: solver status {sol.status} (kkt residual {sol.kkt_residual:.3g})", sol)
    return sol


class PltSolver:
    """Prosumer-side solver kept across ADMM iterations.

    The constraint structure and quadratic term of PLT_i do not change
    between iterations, so the QP factorization and the previous primal/dual
    iterate are reused.
    """

    def __init__(self, profile: ProsumerProfile, env: EnvironmentProfile, N: int, rho: float,
                 tol: float = 1e-6, max_iter: int = 50_000):
        self.profile, self.env, self.N = profile, env, N
        self.tol, self.max_iter = tol, max_iter
        T = env.T
        self.qp = assemble_plt(profile, env, np.zeros((T, N)), np.zeros((T, N)), rho, N=N)
        self.base_c = self.qp.c.copy()
        self.base_const = self.qp.const
        for s in self.qp.var_index["p_ET"].values():
            self.base_c[s] = 0.0
        self.solver = QpSolver(self.qp)
        self.last: Optional[QpSolution] = None

    def solve(self, lambda_i, p_hat_i) -> tuple[DecisionSchedule, QpSolution]:
        T, N, i = self.env.T, self.N, self.profile.id
        lam = _check_trade_matrix(lambda_i, T, N, i, "lambda_i")
        ph = _check_trade_matrix(p_hat_i, T, N, i, "p_hat_i")
        c, extra = plt_linear_term(self.qp, self.base_c, lam, ph)
        self.qp = self.solver.qp = self.qp.with_linear(c)
        self.qp.const = self.base_const + extra
        self.solver.qp = self.qp
        warm = None
        if self.last is not None:
            warm = (self.last.x, np.concatenate([self.last.y_eq, self.last.y_in, self.last.z[self.solver.box_rows]]))
        sol = solve_qp_checked(self.solver, self.tol, self.max_iter, f"PLT_{i}", warm_start=warm)
        self.last = sol
        return extract_schedule(self.profile, self.env, sol.x, self.qp.var_index, N), sol


def solve_plt(profile: ProsumerProfile, env: EnvironmentProfile, lambda_i, p_hat_i, rho: float,
              tol: float = 1e-6, N: Optional[int] = None, max_iter: int = 50_000) -> DecisionSchedule:
    qp = assemble_plt(profile, env, lambda_i, p_hat_i, rho, N=N)
    sol = solve_qp_checked(QpSolver(qp), tol, max_iter, f"PLT_{profile.id}")
    return extract_schedule(profile, env, sol.x, qp.var_index, qp.var_index["N"])


@dataclass
class CentralResult:
    schedules: list
    total_cost: float
    prices: np.ndarray  # [i, j, t], symmetric; the clearing price of each pair
    solution: QpSolution


def solve_dcm(scenario: Scenario, tol: float = 1e-6, max_iter: int = 50_000) -> CentralResult:
    """Centralized oracle: all prosumers' data in one QP, plus the pairwise clearing prices."""
    qp = assemble_dcm(scenario)
    sol = solve_qp_checked(QpSolver(qp), tol, max_iter, "DCM")
    x = sol.x.copy()
    # make the clearing exactly antisymmetric (solver leaves ~tol residue)
    N, T = scenario.N, scenario.T
    blocks = qp.var_index["blocks"]
    prices = np.zeros((N, N, T))
    n_couple = qp.var_index["coupling_rows"]
    y = sol.y_eq[sol.y_eq.shape[0] - n_couple:]
    k = 0
    for i in range(N):
        for j in range(i + 1, N):
            a, b = blocks[i]["p_ET"][j], blocks[j]["p_ET"][i]
            avg = 0.5 * (x[a] - x[b])
            x[a], x[b] = avg, -avg
            prices[i, j] = prices[j, i] = -y[k:k + T]
            k += T
    schedules = [extract_schedule(p, scenario.env, x, blocks[p.id], N) for p in scenario.prosumers]
    total = sum(prosumer_cost(p, s) for p, s in zip(scenario.prosumers, schedules))
    return CentralResult(schedules, float(total), prices, sol)


def solve_dcm_central(scenario: Scenario, tol: float = 1e-6, max_iter: int = 50_000
                      ) -> tuple[list[DecisionSchedule], float]:
    """Centralized oracle: all prosumers' data in one QP."""
    res = solve_dcm(scenario, tol, max_iter)
    return res.schedules, res.total_cost


def standalone_schedules(scenario: Scenario, tol: float = 1e-6) -> tuple[list[DecisionSchedule], float]:
    """Every prosumer optimizes alone with trading disabled."""
    out = []
    total = 0.0
    for p in scenario.prosumers:
        solo = ProsumerProfile(0, p.tariff, p.hvac, p.shiftable, p.renewable, p.storage, p.rates)
        s = solve_plt(solo, scenario.env, None, None, 1.0, tol=tol, N=1)
        full = np.zeros((scenario.T, scenario.N))
        sched = DecisionSchedule.from_powers(p, scenario.env, p_ET=full,
                                             **{k: getattr(s, k) for k in POWER_FIELDS})
        out.append(sched)
        total += prosumer_cost(p, sched)
    return out, float(total)
