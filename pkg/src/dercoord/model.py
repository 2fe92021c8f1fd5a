"""Prosumer DER model: parameter records, state recursions, costs and feasibility.

Units are kW for power, kWh for energy and degrees C for temperature. Slots are
0-based in every array; only human-facing outputs (violations, CSV ``slot``
columns) number slots from 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid parameters or inconsistent inputs."""


class DimensionError(ModelError):
    pass


class DomainError(ModelError):
    pass


def _vec(values, name: str, length: Optional[int] = None) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if length is not None and arr.shape[0] != length:
        raise DimensionError(f"{name}: expected length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite entry")
    return arr


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    T: int
    slot_hours: float = 1.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ModelError(f"TimeGrid.T must be a positive integer, got {self.T}")
        if not self.slot_hours > 0:
            raise ModelError("TimeGrid.slot_hours must be > 0")
        _set(self, "T", int(self.T))


@dataclass(frozen=True)
class GridTariff:
    pi_E: float
    pi_D: float
    P_G_max: float

    def __post_init__(self):
        if self.pi_E < 0 or self.pi_D < 0:
            raise ModelError("GridTariff prices must be non-negative")
        if not self.P_G_max > 0:
            raise ModelError("GridTariff.P_G_max must be > 0")


@dataclass(frozen=True)
class HvacParams:
    """First-order RC building model with a signed HVAC efficiency.

    ``gamma`` is the temperature change per kW per slot; negative for cooling.
    """

    R: float
    C: float
    gamma: float
    omega_AC: float
    tau_ref: float
    tau_min: float
    tau_max: float
    tau_init: float
    p_AC_max: float = 5.0

    def __post_init__(self):
        if not (self.R > 0 and self.C > 0):
            raise ModelError("HvacParams: R and C must be > 0")
        if self.omega_AC < 0:
            raise ModelError("HvacParams.omega_AC must be >= 0")
        if not (self.tau_min <= self.tau_ref <= self.tau_max):
            raise ModelError("HvacParams: need tau_min <= tau_ref <= tau_max")
        if self.p_AC_max < 0:
            raise ModelError("HvacParams.p_AC_max must be >= 0")

    def decay(self, slot_hours: float = 1.0) -> float:
        eps = math.exp(-slot_hours / (self.R * self.C))
        if not 0.0 < eps < 1.0:
            raise ModelError(f"HvacParams: decay factor {eps} outside (0, 1)")
        return eps


@dataclass(frozen=True)
class ShiftableSpec:
    """Shiftable task: ``preferred`` is the routine profile, ``window`` the allowed slots.

    ``p_S_max`` defaults to twice the largest preferred slot load.
    """

    window: Sequence[int]
    preferred: np.ndarray
    omega_S: float
    p_S_max: Optional[float] = None

    def __post_init__(self):
        pref = _vec(self.preferred, "ShiftableSpec.preferred")
        window = tuple(sorted({int(t) for t in self.window}))
        T = pref.shape[0]
        if any(t < 0 or t >= T for t in window):
            raise ModelError(f"ShiftableSpec.window must lie in 0..{T - 1}")
        outside = np.ones(T, dtype=bool)
        outside[list(window)] = False
        if np.any(pref[outside] != 0):
            raise ModelError("ShiftableSpec.preferred must be zero outside the window")
        if np.any(pref < 0):
            raise ModelError("ShiftableSpec.preferred must be >= 0")
        if self.omega_S < 0:
            raise ModelError("ShiftableSpec.omega_S must be >= 0")
        cap = 2.0 * float(pref.max(initial=0.0)) if self.p_S_max is None else float(self.p_S_max)
        if np.any(pref > cap + 1e-12):
            raise ModelError("ShiftableSpec.p_S_max below a preferred slot load")
        _set(self, "preferred", pref)
        _set(self, "window", window)
        _set(self, "p_S_max", cap)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.preferred.shape[0], dtype=bool)
        m[list(self.window)] = True
        return m

    @classmethod
    def none(cls, T: int) -> "ShiftableSpec":
        return cls(window=(), preferred=np.zeros(T), omega_S=0.0, p_S_max=0.0)


@dataclass(frozen=True)
class RenewableProfile:
    gen: np.ndarray

    def __post_init__(self):
        gen = _vec(self.gen, "RenewableProfile.gen")
        if np.any(gen < 0):
            raise ModelError("RenewableProfile.gen must be >= 0")
        _set(self, "gen", gen)


TERMINAL_RULES = ("none", "at_least_initial")


@dataclass(frozen=True)
class StorageParams:
    E_cap: float
    eta_ch: float
    eta_dis: float
    alpha_min: float
    alpha_max: float
    P_ch_max: float
    P_dis_max: float
    beta: float
    e_init: Optional[float] = None
    terminal_rule: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.eta_ch <= 1.0:
            raise ModelError("StorageParams.eta_ch must lie in [0, 1]")
        if not 0.0 < self.eta_dis <= 1.0:
            raise ModelError("StorageParams.eta_dis must lie in (0, 1]")
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ModelError("StorageParams: need 0 <= alpha_min <= alpha_max <= 1")
        if min(self.E_cap, self.P_ch_max, self.P_dis_max, self.beta) < 0:
            raise ModelError("StorageParams: capacities and beta must be >= 0")
        if self.terminal_rule not in TERMINAL_RULES:
            raise ModelError(f"StorageParams.terminal_rule must be one of {TERMINAL_RULES}")
        e0 = self.alpha_min * self.E_cap if self.e_init is None else float(self.e_init)
        if not (self.alpha_min * self.E_cap - 1e-12 <= e0 <= self.alpha_max * self.E_cap + 1e-12):
            raise ModelError("StorageParams.e_init outside [alpha_min, alpha_max] * E_cap")
        _set(self, "e_init", e0)

    @classmethod
    def none(cls) -> "StorageParams":
        return cls(E_cap=0.0, eta_ch=1.0, eta_dis=1.0, alpha_min=0.0, alpha_max=1.0,
                   P_ch_max=0.0, P_dis_max=0.0, beta=0.0)


@dataclass(frozen=True)
class ServiceRates:
    pi_FIT: np.ndarray
    pi_DR: np.ndarray

    def __post_init__(self):
        fit = _vec(self.pi_FIT, "ServiceRates.pi_FIT")
        dr = _vec(self.pi_DR, "ServiceRates.pi_DR", fit.shape[0])
        if np.any(fit < 0) or np.any(dr < 0):
            raise ModelError("ServiceRates must be non-negative")
        _set(self, "pi_FIT", fit)
        _set(self, "pi_DR", dr)


@dataclass(frozen=True)
class ProsumerProfile:
    id: int
    tariff: GridTariff
    hvac: HvacParams
    shiftable: ShiftableSpec
    renewable: RenewableProfile
    storage: StorageParams
    rates: ServiceRates

    @property
    def T(self) -> int:
        return self.renewable.gen.shape[0]

    def validate(self, T: int) -> None:
        for name, n in (("renewable.gen", self.renewable.gen.shape[0]),
                        ("shiftable.preferred", self.shiftable.preferred.shape[0]),
                        ("rates.pi_FIT", self.rates.pi_FIT.shape[0])):
            if n != T:
                raise DimensionError(f"prosumer {self.id}: {name} has length {n}, expected {T}")


@dataclass(frozen=True)
class EnvironmentProfile:
    tau_out: np.ndarray
    slot_hours: float = 1.0

    def __post_init__(self):
        _set(self, "tau_out", _vec(self.tau_out, "EnvironmentProfile.tau_out"))
        if not self.slot_hours > 0:
            raise ModelError("EnvironmentProfile.slot_hours must be > 0")

    @property
    def T(self) -> int:
        return self.tau_out.shape[0]


@dataclass(frozen=True)
class AdmmSettings:
    """Penalty and stopping thresholds for the trade-consensus iteration."""

    rho: float = 1.0
    eps_primal: float = 1e-3
    eps_dual: float = 1e-3
    max_iterations: int = 200
    qp_tol: float = 1e-6

    def __post_init__(self):
        if not self.rho > 0:
            raise ModelError("AdmmSettings.rho must be > 0")
        if not (self.eps_primal > 0 and self.eps_dual > 0 and self.qp_tol > 0):
            raise ModelError("AdmmSettings thresholds must be > 0")
        if self.max_iterations < 1:
            raise ModelError("AdmmSettings.max_iterations must be >= 1")


@dataclass(frozen=True)
class Scenario:
    time: TimeGrid
    env: EnvironmentProfile
    prosumers: tuple
    admm: AdmmSettings = field(default_factory=AdmmSettings)

    def __post_init__(self):
        _set(self, "prosumers", tuple(self.prosumers))
        if not self.prosumers:
            raise ModelError("Scenario needs at least one prosumer")
        T = self.time.T
        if self.env.T != T:
            raise DimensionError(f"tau_out has length {self.env.T}, expected {T}")
        if self.env.slot_hours != self.time.slot_hours:
            raise ModelError("EnvironmentProfile.slot_hours disagrees with TimeGrid")
        for k, p in enumerate(self.prosumers):
            if p.id != k:
                raise ModelError(f"prosumer ids must be 0..N-1 in order; position {k} has id {p.id}")
            p.validate(T)
            p.hvac.decay(self.time.slot_hours)

    @property
    def N(self) -> int:
        return len(self.prosumers)

    @property
    def T(self) -> int:
        return self.time.T


# ---------------------------------------------------------------------------
# schedules and recursions
# ---------------------------------------------------------------------------

POWER_FIELDS = ("p_G", "p_AC", "p_S", "p_CH", "p_DIS", "p_RE", "p_FIT", "p_DR")


def simulate_temperature(hvac: HvacParams, env: EnvironmentProfile, p_AC) -> np.ndarray:
    """Indoor temperature at the end of each slot.

    Power drawn during slot ``t`` acts on the temperature reported for slot
    ``t``; the recursion starts from ``hvac.tau_init``.
    """
    p = _vec(p_AC, "p_AC", env.T)
    eps = hvac.decay(env.slot_hours)
    tau = np.empty_like(p)
    prev = hvac.tau_init
    for t in range(p.shape[0]):
        prev = env.tau_out[t] - (env.tau_out[t] - prev) * eps + hvac.gamma * p[t]
        tau[t] = prev
    return tau


def temperature_affine(hvac: HvacParams, env: EnvironmentProfile) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(offset, M)`` with ``simulate_temperature(p) == offset + M @ p``."""
    T = env.T
    eps = hvac.decay(env.slot_hours)
    offset = simulate_temperature(hvac, env, np.zeros(T))
    k = np.arange(T)
    lag = k[:, None] - k[None, :]
    M = np.where(lag >= 0, hvac.gamma * eps ** np.maximum(lag, 0), 0.0)
    return offset, M


def simulate_storage(storage: StorageParams, p_CH, p_DIS, slot_hours: float = 1.0) -> np.ndarray:
    ch = _vec(p_CH, "p_CH")
    dis = _vec(p_DIS, "p_DIS", ch.shape[0])
    delta = (storage.eta_ch * ch - dis / storage.eta_dis) * slot_hours
    return storage.e_init + np.cumsum(delta)


@dataclass
class DecisionSchedule:
    """One prosumer's decisions over the horizon.

    ``p_ET[t, j]`` is the power prosumer ``owner`` sells to ``j`` in slot ``t``
    (negative when buying); column ``owner`` stays zero.
    """

    owner: int
    p_G: np.ndarray
    p_AC: np.ndarray
    p_S: np.ndarray
    p_CH: np.ndarray
    p_DIS: np.ndarray
    p_RE: np.ndarray
    p_FIT: np.ndarray
    p_DR: np.ndarray
    p_ET: np.ndarray
    tau_in: np.ndarray
    e_B: np.ndarray
    slot_hours: float = 1.0

    def __post_init__(self):
        T = np.asarray(self.p_G).reshape(-1).shape[0]
        for name in POWER_FIELDS + ("tau_in", "e_B"):
            setattr(self, name, _vec(getattr(self, name), name, T))
        et = np.array(self.p_ET, dtype=float)
        if et.ndim != 2 or et.shape[0] != T:
            raise DimensionError(f"p_ET must be a T x N matrix with T={T}, got shape {et.shape}")
        self.p_ET = et

    @property
    def T(self) -> int:
        return self.p_G.shape[0]

    @property
    def net_trade(self) -> np.ndarray:
        """Total power sold to peers per slot (negative = net purchase)."""
        return self.p_ET.sum(axis=1)

    @classmethod
    def from_powers(cls, profile: ProsumerProfile, env: EnvironmentProfile, p_ET, **powers) -> "DecisionSchedule":
        """Build a schedule whose derived states follow the recursions exactly.

        Missing power vectors default to zero.
        """
        T = env.T
        vals = {name: _vec(powers.get(name, np.zeros(T)), name, T) for name in POWER_FIELDS}
        unknown = set(powers) - set(POWER_FIELDS)
        if unknown:
            raise ModelError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(
            owner=profile.id,
            p_ET=p_ET,
            tau_in=simulate_temperature(profile.hvac, env, vals["p_AC"]),
            e_B=simulate_storage(profile.storage, vals["p_CH"], vals["p_DIS"], env.slot_hours),
            slot_hours=env.slot_hours,
            **vals,
        )


# ---------------------------------------------------------------------------
# costs and revenues
# ---------------------------------------------------------------------------


def grid_cost(tariff: GridTariff, p_G, slot_hours: float = 1.0) -> float:
    """Energy charge plus demand charge on the peak purchase."""
    p = _vec(p_G, "p_G")
    if np.any(p < 0):
        raise DomainError("grid_cost: negative grid purchase")
    if p.size == 0:
        return 0.0
    return float(tariff.pi_E * slot_hours * p.sum() + tariff.pi_D * p.max())


def discomfort_costs(profile: ProsumerProfile, sched: DecisionSchedule) -> tuple[float, float]:
    hvac, shift = profile.hvac, profile.shiftable
    if shift.preferred.shape[0] != sched.T:
        raise DimensionError("discomfort_costs: schedule and profile horizons differ")
    ac = hvac.omega_AC * float(np.sum((sched.tau_in - hvac.tau_ref) ** 2))
    m = shift.mask
    s = shift.omega_S * float(np.sum((sched.p_S[m] - shift.preferred[m]) ** 2))
    return ac, s


def storage_cost(storage: StorageParams, sched: DecisionSchedule) -> float:
    return float(storage.beta * sched.slot_hours * np.sum(sched.p_CH + sched.p_DIS))


def service_revenues(rates: ServiceRates, sched: DecisionSchedule) -> tuple[float, float]:
    if rates.pi_FIT.shape[0] != sched.T:
        raise DimensionError("service_revenues: rate and schedule horizons differ")
    h = sched.slot_hours
    return float(h * rates.pi_FIT @ sched.p_FIT), float(h * rates.pi_DR @ sched.p_DR)


def prosumer_cost(profile: ProsumerProfile, sched: DecisionSchedule) -> float:
    """Net cost entering the fleet objective; peer-trade payments are excluded."""
    c_g = grid_cost(profile.tariff, np.maximum(sched.p_G, 0.0), sched.slot_hours)
    c_ac, c_s = discomfort_costs(profile, sched)
    c_b = storage_cost(profile.storage, sched)
    r_fit, r_dr = service_revenues(profile.rates, sched)
    return c_g + c_ac + c_s + c_b - r_fit - r_dr


def cost_breakdown(profile: ProsumerProfile, sched: DecisionSchedule) -> dict:
    c_ac, c_s = discomfort_costs(profile, sched)
    r_fit, r_dr = service_revenues(profile.rates, sched)
    return {
        "grid": grid_cost(profile.tariff, np.maximum(sched.p_G, 0.0), sched.slot_hours),
        "hvac_discomfort": c_ac,
        "shift_discomfort": c_s,
        "storage": storage_cost(profile.storage, sched),
        "fit_revenue": r_fit,
        "dr_revenue": r_dr,
    }


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

CONSTRAINT_NAMES = {
    "1": "grid purchase bounds",
    "2": "indoor temperature recursion",
    "3": "comfort band",
    "4": "shiftable task completion",
    "5": "renewable self-use bound",
    "6": "storage level recursion",
    "7": "storage level bounds",
    "8": "charge power bounds",
    "9": "discharge power bounds",
    "11": "feed-in bound",
    "13": "demand-response bound",
    "14": "power balance",
    "ac_cap": "HVAC power bounds",
    "s_cap": "shiftable power bounds",
    "terminal": "storage terminal level",
    "diag": "self-trade entry",
}


@dataclass(frozen=True)
class Violation:
    constraint: str
    slot: Optional[int]
    magnitude: float

    @property
    def name(self) -> str:
        return CONSTRAINT_NAMES[self.constraint]

    def __str__(self) -> str:
        where = "" if self.slot is None else f" at slot {self.slot}"
        return f"({self.constraint}) {self.name}{where}: {self.magnitude:.3g}"


def check_feasibility(profile: ProsumerProfile, env: EnvironmentProfile, sched: DecisionSchedule,
                      tol: float = 1e-6) -> list[Violation]:
    """List every constraint breached by more than ``tol`` (absolute).

    Per-slot checks report the 1-based slot; horizon-wide checks report ``None``.
    """
    T = env.T
    if sched.T != T:
        raise DimensionError(f"schedule horizon {sched.T} != environment horizon {T}")
    profile.validate(T)
    if sched.owner >= sched.p_ET.shape[1]:
        raise DimensionError("p_ET has no column for the schedule owner")

    out: list[Violation] = []

    def below(code, value, bound):
        # value >= bound
        gap = np.asarray(bound - value, dtype=float) * np.ones(T)
        for t in np.flatnonzero(gap > tol):
            out.append(Violation(code, int(t) + 1, float(gap[t])))

    def equal(code, lhs, rhs):
        gap = np.abs(np.asarray(lhs - rhs, dtype=float)) * np.ones(T)
        for t in np.flatnonzero(gap > tol):
            out.append(Violation(code, int(t) + 1, float(gap[t])))

    tar, hv, sh, st = profile.tariff, profile.hvac, profile.shiftable, profile.storage
    gen = profile.renewable.gen

    below("1", sched.p_G, 0.0)
    below("1", tar.P_G_max, sched.p_G)
    equal("2", sched.tau_in, simulate_temperature(hv, env, sched.p_AC))
    below("3", sched.tau_in, hv.tau_min)
    below("3", hv.tau_max, sched.tau_in)
    below("ac_cap", sched.p_AC, 0.0)
    below("ac_cap", hv.p_AC_max, sched.p_AC)

    m = sh.mask
    gap = abs(float(sched.p_S[m].sum() - sh.preferred.sum()))
    if gap > tol:
        out.append(Violation("4", None, gap))
    below("s_cap", sched.p_S, 0.0)
    below("s_cap", np.where(m, sh.p_S_max, 0.0), sched.p_S)

    below("5", sched.p_RE, 0.0)
    below("5", gen, sched.p_RE)
    equal("6", sched.e_B, simulate_storage(st, sched.p_CH, sched.p_DIS, env.slot_hours))
    below("7", sched.e_B, st.alpha_min * st.E_cap)
    below("7", st.alpha_max * st.E_cap, sched.e_B)
    below("8", sched.p_CH, 0.0)
    below("8", st.P_ch_max, sched.p_CH)
    below("9", sched.p_DIS, 0.0)
    below("9", st.P_dis_max, sched.p_DIS)
    if st.terminal_rule == "at_least_initial":
        gap = st.e_init - float(sched.e_B[-1])
        if gap > tol:
            out.append(Violation("terminal", T, gap))

    below("11", sched.p_FIT, 0.0)
    below("11", gen - sched.p_RE, sched.p_FIT)
    below("13", sched.p_DR, 0.0)
    below("13", sched.p_G, sched.p_DR)

    demand = sched.p_AC + sched.p_S + sched.p_CH + sched.net_trade
    supply = sched.p_RE + sched.p_G - sched.p_DR + sched.p_DIS
    equal("14", demand, supply)
    equal("diag", sched.p_ET[:, sched.owner], 0.0)
    return out


def clearing_violations(schedules: Sequence[DecisionSchedule], tol: float = 1e-6) -> list[tuple[int, int, int, float]]:
    """Pairs ``(slot, i, j, gap)`` where ``p_ET[i][t, j] + p_ET[j][t, i]`` exceeds ``tol``."""
    trades = np.stack([s.p_ET for s in schedules])  # i, t, j
    gap = np.abs(trades + trades.transpose(2, 1, 0))
    out = []
    for i, t, j in zip(*np.nonzero(gap > tol)):
        if i < j:
            out.append((int(t) + 1, int(i), int(j), float(gap[i, t, j])))
    return out
