"""Consensus ADMM over pairwise trades.

Prosumers solve their local tasks at the current prices ``lam`` and
coordinator trades ``p_hat``; the coordinator step projects the submitted
trades onto the antisymmetric (cleared) set and moves the prices. Tensors are
indexed ``[i, j, t]``: ``trades[i, j, t]`` is what ``i`` sells to ``j`` in
slot ``t``.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np

from . import fixedpoint as fx
from .model import AdmmSettings, DecisionSchedule, ModelError, Scenario, prosumer_cost
from .subproblem import PltSolver, SubproblemError

__all__ = [
    "AdmmSettings", "CoordinatorState", "sct_update", "residuals", "initial_state",
    "ContractHandle", "InMemoryContract", "AdmmReport", "AdmmError", "run_admm",
    "trades_tensor", "settlement",
]

ACCEPTED = "accepted"
REJECTED_DUPLICATE = "rejected-duplicate"
REJECTED_STALE = "rejected-stale"
REJECTED_INVALID = "rejected-invalid"


class AdmmError(RuntimeError):
    def __init__(self, message: str, iteration: int, prosumer: Optional[int] = None):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.prosumer = prosumer


@dataclass
class CoordinatorState:
    iteration: int
    lam: np.ndarray
    p_hat: np.ndarray
    last_trades: np.ndarray
    p_hat_prev: np.ndarray
    r_primal: float = 0.0
    r_dual: float = 0.0

    @property
    def N(self) -> int:
        return self.lam.shape[0]

    @property
    def T(self) -> int:
        return self.lam.shape[2]

    def prices_for(self, i: int) -> np.ndarray:
        """``lam[i]`` as a ``T x N`` matrix (row = slot)."""
        return self.lam[i].T.copy()

    def trades_for(self, i: int) -> np.ndarray:
        return self.p_hat[i].T.copy()


def initial_state(N: int, T: int) -> CoordinatorState:
    z = np.zeros((N, N, T))
    return CoordinatorState(0, z.copy(), z.copy(), z.copy(), z.copy())


def _check_tensor(a, N, T, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (N, N, T):
        raise ModelError(f"{name} must have shape {(N, N, T)}, got {a.shape}")
    return a


def residuals(state: CoordinatorState, rho: float) -> tuple[float, float]:
    """Max disagreement between submitted and cleared trades, and rho times the cleared-trade change."""
    r_p = float(np.abs(state.p_hat - state.last_trades).max(initial=0.0))
    r_d = rho * float(np.abs(state.p_hat - state.p_hat_prev).max(initial=0.0))
    return r_p, r_d


def sct_update(state: CoordinatorState, trades, rho: float) -> CoordinatorState:
    """Closed-form auxiliary update with the old prices, then the price update with the new trades."""
    if not rho > 0:
        raise ModelError("rho must be > 0")
    N, T = state.N, state.T
    p = _check_tensor(trades, N, T, "trades")
    if np.any(p[np.arange(N), np.arange(N)] != 0):
        raise ModelError("trades: self-trade entries must be zero")
    lam = state.lam
    p_hat = (rho * (p - p.transpose(1, 0, 2)) - (lam - lam.transpose(1, 0, 2))) / (2 * rho)
    iu = np.triu_indices(N, 1)
    p_hat[iu[1], iu[0]] = -p_hat[iu[0], iu[1]]
    lam_new = lam + rho * (p_hat - p)
    new = CoordinatorState(state.iteration + 1, lam_new, p_hat, p.copy(), state.p_hat.copy())
    new.r_primal, new.r_dual = residuals(new, rho)
    return new


def trades_tensor(schedules) -> np.ndarray:
    """Stack each schedule's ``T x N`` trade matrix into an ``[i, j, t]`` tensor."""
    return np.stack([s.p_ET.T for s in schedules])


def settlement(lam: np.ndarray, trades: np.ndarray) -> np.ndarray:
    """``out[i, j]``: amount ``i`` receives from ``j``, each trade priced at the final dual."""
    return np.einsum("ijt,ijt->ij", lam, trades)


class ContractHandle(Protocol):
    """Coordinator-side view of the contract: submit, read, and commit.

    ``commit`` lets queued submissions take effect; the execute step fires by
    itself once every prosumer has submitted for the current iteration.
    """

    N: int
    T: int

    def submit_trades(self, prosumer: int, iteration: int, trades: np.ndarray) -> str: ...

    def read_state(self, prosumer: int) -> tuple[np.ndarray, np.ndarray, int]: ...

    def commit(self) -> None: ...

    def residuals(self) -> tuple[float, float]: ...

    def snapshot(self) -> CoordinatorState: ...


class InMemoryContract:
    """Contract semantics without a chain.

    With ``fixed_point=True`` (default) prices and trades are held in the same
    1e-9 fixed-point domain the ledger uses, so both paths follow identical
    trajectories. ``fixed_point=False`` runs :func:`sct_update` in floats.
    """

    def __init__(self, N: int, T: int, rho: float, fixed_point: bool = True):
        self.N, self.T, self.rho = N, T, rho
        self.fixed_point = fixed_point
        self.rho_units = fx.encode_scalar(rho)
        z = np.zeros((N, N, T), dtype=np.int64 if fixed_point else float)
        self._lam, self._p_hat, self._prev, self._trades = z.copy(), z.copy(), z.copy(), z.copy()
        self._state = initial_state(N, T)
        self.iteration = 0
        self.received: set[int] = set()
        self._r = (0.0, 0.0)

    def submit_trades(self, prosumer: int, iteration: int, trades: np.ndarray) -> str:
        if iteration != self.iteration:
            return REJECTED_STALE
        if prosumer in self.received:
            return REJECTED_DUPLICATE
        m = np.asarray(trades, dtype=float)
        if m.shape != (self.T, self.N) or np.any(m[:, prosumer] != 0) or not np.all(np.isfinite(m)):
            return REJECTED_INVALID
        row = fx.encode(m.T) if self.fixed_point else m.T
        self._trades[prosumer] = row
        self.received.add(prosumer)
        self.try_execute()
        return ACCEPTED

    def try_execute(self) -> bool:
        if len(self.received) < self.N:
            return False
        if self.fixed_point:
            p_hat, lam = fx.sct_update_fixed(self._lam, self._trades, self.rho_units)
            self._prev, self._p_hat, self._lam = self._p_hat, p_hat, lam
            self._r = fx.residuals_fixed(p_hat, self._trades, self._prev, self.rho_units)
        else:
            self._state = sct_update(self._state, self._trades, self.rho)
            self._r = (self._state.r_primal, self._state.r_dual)
        self.iteration += 1
        self.received = set()
        return True

    def read_state(self, prosumer: int) -> tuple[np.ndarray, np.ndarray, int]:
        if not 0 <= prosumer < self.N:
            raise ModelError(f"unknown prosumer {prosumer}")
        s = self.snapshot()
        return s.prices_for(prosumer), s.trades_for(prosumer), self.iteration

    def commit(self) -> None:
        pass

    def residuals(self) -> tuple[float, float]:
        return self._r

    def snapshot(self) -> CoordinatorState:
        if not self.fixed_point:
            return replace(self._state)
        st = CoordinatorState(self.iteration, fx.decode(self._lam), fx.decode(self._p_hat),
                              fx.decode(self._trades), fx.decode(self._prev))
        st.r_primal, st.r_dual = self._r
        return st


@dataclass
class AdmmReport:
    status: str  # "converged" or "max_iter"
    iterations: int
    history: list  # (r_primal, r_dual) per iteration
    schedules: list
    state: CoordinatorState
    settlement: np.ndarray
    total_cost: float
    wall_seconds: float
    qp_iterations: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def run_admm(scenario: Scenario, contract: Optional[ContractHandle] = None, *, workers: int = 1,
             callback=None) -> AdmmReport:
    """Iterate local solves and coordinator updates until both residuals clear their thresholds.

    ``callback(iteration, r_primal, r_dual)`` is called after every coordinator step.
    """
    cfg = scenario.admm
    N, T, env = scenario.N, scenario.T, scenario.env
    if contract is None:
        contract = InMemoryContract(N, T, cfg.rho)
    if (contract.N, contract.T) != (N, T):
        raise ModelError("contract dimensions do not match the scenario")
    t0 = time.perf_counter()
    solvers = [PltSolver(p, env, N, cfg.rho, tol=cfg.qp_tol) for p in scenario.prosumers]
    history: list[tuple[float, float]] = []
    qp_iters: list[int] = []
    schedules: list[DecisionSchedule] = [None] * N
    status = "max_iter"
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def local(i):
        lam_i, ph_i, k = contract.read_state(i)
        sched, sol = solvers[i].solve(lam_i, ph_i)
        return i, k, sched, sol

    try:
        for it in range(1, cfg.max_iterations + 1):
            try:
                results = list(pool.map(local, range(N))) if pool else [local(i) for i in range(N)]
            except SubproblemError as exc:
                raise AdmmError(str(exc), it) from exc
            for i, k, sched, sol in results:
                verdict = contract.submit_trades(i, k, sched.p_ET)
                if verdict != ACCEPTED:
                    raise AdmmError(f"contract rejected prosumer {i}: {verdict}", it, i)
                schedules[i] = sched
                qp_iters.append(sol.iterations)
            contract.commit()
            r_p, r_d = contract.residuals()
            history.append((r_p, r_d))
            if callback is not None:
                callback(it, r_p, r_d)
            if r_p <= cfg.eps_primal and r_d <= cfg.eps_dual:
                status = "converged"
                break
    finally:
        if pool:
            pool.shutdown()

    state = contract.snapshot()
    trades = trades_tensor(schedules)
    total = float(sum(prosumer_cost(p, s) for p, s in zip(scenario.prosumers, schedules)))
    return AdmmReport(
        status=status, iterations=len(history), history=history, schedules=schedules, state=state,
        settlement=settlement(state.lam, trades), total_cost=total,
        wall_seconds=time.perf_counter() - t0, qp_iterations=qp_iters,
    )
