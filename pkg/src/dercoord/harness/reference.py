"""Deterministic synthetic fleets standing in for measured household data.

Two archetypes: renewable-rich sellers (A, the first half of the fleet) and
renewable-poor buyers (B, whose solar output is a quarter of A's). Money is
normalized so the grid energy price is 1 (one unit is 20 cents), which puts
the default penalty ``rho = 1`` on the same scale as the prices.
"""
from __future__ import annotations

import math

import numpy as np

from ..model import (
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

ARCHETYPE_RATIO = 4.0
PV_PEAK = 5.0  # kW, archetype A
E_CAP = {True: 10.0, False: 6.0}  # kWh by archetype (rich, poor)
DR_SLOTS = (17, 18, 19, 20)
MONEY = 1.0 / 20.0  # cents to model units


def outdoor_temperature(T: int, lo: float = 20.0, hi: float = 32.0) -> np.ndarray:
    """Daily sinusoid peaking at 15:00, repeated for multi-day horizons."""
    hour = np.arange(T) % 24
    mid, amp = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid + amp * np.cos(2 * math.pi * (hour - 15) / 24)


def solar_bell(T: int, peak: float, centre: float = 12.5, width: float = 3.0) -> np.ndarray:
    hour = np.arange(T) % 24
    gen = peak * np.exp(-0.5 * ((hour - centre) / width) ** 2)
    return np.where((hour >= 6) & (hour <= 19), gen, 0.0).round(6)


def _r(x) -> float:
    """Six decimals, so scenario files reproduce the generated values exactly."""
    return round(float(x), 6)


def _prosumer(k: int, rich: bool, T: int, rng: np.random.Generator, slot_hours: float) -> ProsumerProfile:
    hour = np.arange(T) % 24
    # thermal: cooling, RC in hours
    R = _r(rng.uniform(1.8, 2.2))
    C = _r(rng.uniform(1.8, 2.5))
    eps = math.exp(-slot_hours / (R * C))
    cop = _r(rng.uniform(2.5, 3.2))
    hvac = HvacParams(
        R=R, C=C, gamma=_r(-(1 - eps) * cop * R),
        omega_AC=_r(MONEY * rng.uniform(0.4, 0.8)),
        tau_ref=float(rng.choice([23.0, 23.5, 24.0])), tau_min=20.0, tau_max=26.0,
        tau_init=24.0, p_AC_max=5.0,
    )
    start = int(rng.integers(17, 20))
    duration = 3
    pref = np.zeros(T)
    win = []
    for day in range(T // 24 or 1):
        base = 24 * day
        win += [base + t for t in range(start - 2, min(start + duration + 2, 24))]
        for t in range(start, start + duration):
            if base + t < T:
                pref[base + t] = _r(rng.uniform(0.8, 1.2))
    win = [t for t in win if t < T]
    shift = ShiftableSpec(window=win, preferred=pref, omega_S=_r(MONEY * rng.uniform(0.5, 1.5)))
    peak = PV_PEAK if rich else PV_PEAK / ARCHETYPE_RATIO
    gen = solar_bell(T, peak)
    storage = StorageParams(
        E_cap=E_CAP[rich], eta_ch=0.95, eta_dis=0.95, alpha_min=0.1, alpha_max=0.9,
        P_ch_max=3.0, P_dis_max=3.0, beta=_r(MONEY * 0.5), e_init=0.1 * E_CAP[rich],
    )
    tariff = GridTariff(pi_E=_r(MONEY * 20.0), pi_D=_r(MONEY * 40.0), P_G_max=10.0)
    pi_fit = np.where((hour >= 8) & (hour <= 17), _r(MONEY * 6.0), _r(MONEY * 4.0))
    pi_dr = np.where(np.isin(hour, DR_SLOTS), _r(MONEY * 25.0), 0.0)
    rates = ServiceRates(pi_FIT=pi_fit, pi_DR=pi_dr)
    return ProsumerProfile(k, tariff, hvac, shift, RenewableProfile(gen), storage, rates)


def generate_reference(seed: int = 0, N: int = 10, T: int = 24, slot_hours: float = 1.0,
                       admm: AdmmSettings | None = None) -> Scenario:
    """Reference fleet: prosumers ``0..N/2-1`` are archetype A, the rest archetype B."""
    rng = np.random.default_rng(seed)
    prosumers = [_prosumer(k, k < (N + 1) // 2, T, rng, slot_hours) for k in range(N)]
    env = EnvironmentProfile(outdoor_temperature(T).round(6), slot_hours)
    return Scenario(TimeGrid(T, slot_hours), env, prosumers, admm or AdmmSettings())


def archetype(k: int, N: int) -> str:
    return "A" if k < (N + 1) // 2 else "B"
