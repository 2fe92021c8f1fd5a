"""Signed 64-bit fixed-point numbers with 1e-9 resolution, as used by the contract.

Arithmetic runs on Python integers (object arrays) so intermediate products
cannot overflow; results are checked back into int64 range. Division rounds
half to even.
"""
from __future__ import annotations

import numpy as np

SCALE = 10**9
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1


class FixedPointOverflow(OverflowError):
    pass


def encode(values) -> np.ndarray:
    """Round floats to the nearest 1e-9 (half to even) and return int64."""
    arr = np.asarray(values, dtype=float)
    scaled = np.rint(arr * SCALE)
    if np.any(np.abs(scaled) >= 2.0**63):
        raise FixedPointOverflow("value outside signed 64-bit fixed-point range")
    return scaled.astype(np.int64)


def decode(units) -> np.ndarray:
    return np.asarray(units, dtype=np.int64).astype(float) / SCALE


def encode_scalar(value: float) -> int:
    return int(encode(np.array([value]))[0])


def _obj(a) -> np.ndarray:
    return np.asarray(a).astype(object)


def div_round(num, den: int) -> np.ndarray:
    """Elementwise ``num / den`` for integer arrays, rounded half to even."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    num = _obj(num)
    q = num // den
    r = num - q * den
    twice = 2 * r
    up = (twice > den) | ((twice == den) & (q % 2 == 1))
    return q + np.where(up, 1, 0).astype(object)


def to_int64(a) -> np.ndarray:
    a = _obj(a)
    flat = a.reshape(-1)
    if flat.size and (max(flat) > INT64_MAX or min(flat) < INT64_MIN):
        raise FixedPointOverflow("contract value left the signed 64-bit range")
    return np.array(a.tolist(), dtype=np.int64).reshape(a.shape)


def sct_update_fixed(lam: np.ndarray, trades: np.ndarray, rho_units: int) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary and dual update on fixed-point tensors indexed ``[i, j, t]``.

    Returns ``(p_hat, lam_new)`` as int64. ``p_hat`` uses the incoming ``lam``;
    ``lam_new`` uses the new ``p_hat``.
    """
    P = _obj(trades)
    L = _obj(lam)
    R = int(rho_units)
    num = R * (P - P.transpose(1, 0, 2)) - SCALE * (L - L.transpose(1, 0, 2))
    p_hat = div_round(num, 2 * R)
    # exact antisymmetry: compute the upper triangle and mirror it
    N = p_hat.shape[0]
    iu = np.triu_indices(N, 1)
    p_hat[iu[1], iu[0]] = -p_hat[iu[0], iu[1]]
    idx = np.arange(N)
    p_hat[idx, idx] = 0
    lam_new = L + div_round(R * (p_hat - P), SCALE)
    lam_new[idx, idx] = 0
    return to_int64(p_hat), to_int64(lam_new)


def residuals_fixed(p_hat: np.ndarray, trades: np.ndarray, p_hat_prev: np.ndarray, rho_units: int) -> tuple[float, float]:
    """Primal and dual residuals of a fixed-point state, returned as floats."""
    r_p = int(np.abs(p_hat - trades).max(initial=0)) / SCALE
    r_d = int(rho_units) * int(np.abs(p_hat - p_hat_prev).max(initial=0)) / SCALE**2
    return r_p, r_d
