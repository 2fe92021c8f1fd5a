"""Convex QP container and an operator-splitting solver with KKT-residual termination.

Problems have the form::

    minimize    1/2 x'Qx + c'x + const
    subject to  A_eq x = b_eq,  A_in x <= b_in,  lower <= x <= upper

The solver runs ADMM on the equivalent ``l <= Ax <= u`` form (Ruiz-equilibrated,
over-relaxed, adaptive penalty) and then polishes on the guessed active set
with a direct KKT solve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

# problems below this size get more active-set refinement rounds
SMALL_N = 200
DENSE_N = 700


class QpError(ValueError):
    pass


def _csr(A, n: int) -> sp.csr_matrix:
    if A is None:
        return sp.csr_matrix((0, n))
    return sp.csr_matrix(A, dtype=float)


@dataclass
class QuadraticProgram:
    Q: sp.spmatrix
    c: np.ndarray
    A_eq: Optional[sp.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[sp.spmatrix] = None
    b_in: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    const: float = 0.0
    var_index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.shape[0]
        self.Q = sp.csc_matrix(self.Q, dtype=float)
        self.A_eq = _csr(self.A_eq, n)
        self.A_in = _csr(self.A_in, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).reshape(-1)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1)
        if self.Q.shape != (n, n):
            raise QpError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.A_eq.shape[1] != n or self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise QpError("A_eq / b_eq dimensions inconsistent")
        if self.A_in.shape[1] != n or self.A_in.shape[0] != self.b_in.shape[0]:
            raise QpError("A_in / b_in dimensions inconsistent")
        if self.lower.shape[0] != n or self.upper.shape[0] != n:
            raise QpError("bound vectors have wrong length")
        if np.any(self.lower > self.upper):
            raise QpError("lower > upper for some variable")
        asym = abs(self.Q - self.Q.T)
        if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(self.Q).max()):
            raise QpError("Q is not symmetric")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.const)

    def with_linear(self, c) -> "QuadraticProgram":
        return QuadraticProgram(self.Q, c, self.A_eq, self.b_eq, self.A_in, self.b_in,
                                self.lower, self.upper, self.const, self.var_index)


@dataclass
class QpSolution:
    """Solver output. Duals follow ``Qx + c + A_eq'y_eq + A_in'y_in + z = 0``.

    ``z`` holds box multipliers: positive where the upper bound binds,
    negative where the lower bound binds.
    """

    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str
    y_eq: np.ndarray
    y_in: np.ndarray
    z: np.ndarray
    primal_residual: float = math.nan
    stationarity: float = math.nan
    complementarity: float = math.nan
    polished: bool = False


def kkt_residuals(qp: QuadraticProgram, x, y_eq, y_in, z) -> tuple[float, float, float]:
    """(primal feasibility, stationarity, complementarity) in the infinity norm."""
    x = np.asarray(x, dtype=float)
    y_eq, y_in, z = (np.asarray(v, dtype=float) for v in (y_eq, y_in, z))
    prim = 0.0
    if qp.b_eq.size:
        prim = max(prim, float(np.abs(qp.A_eq @ x - qp.b_eq).max()))
    slack = qp.b_in - qp.A_in @ x
    if slack.size:
        prim = max(prim, float(np.maximum(-slack, 0).max()))
    prim = max(prim, float(np.maximum(qp.lower - x, 0).max(initial=0.0)),
               float(np.maximum(x - qp.upper, 0).max(initial=0.0)))

    grad = qp.Q @ x + qp.c + qp.A_eq.T @ y_eq + qp.A_in.T @ y_in + z
    stat = float(np.abs(grad).max(initial=0.0))

    comp = 0.0
    if slack.size:
        comp = max(comp, float(np.abs(y_in * slack).max()), float(np.maximum(-y_in, 0).max()))
    zu, zl = np.maximum(z, 0), np.maximum(-z, 0)
    gap_u = np.where(np.isfinite(qp.upper), qp.upper - x, 1.0)
    gap_l = np.where(np.isfinite(qp.lower), x - qp.lower, 1.0)
    comp = max(comp, float(np.abs(zu * gap_u).max(initial=0.0)), float(np.abs(zl * gap_l).max(initial=0.0)))
    return prim, stat, comp


def _inf(v) -> float:
    return float(np.abs(v).max(initial=0.0))


class QpSolver:
    """Reusable solver for one constraint structure.

    The linear term may change between :meth:`solve` calls; the scaling,
    penalty and factorization carry over, which is what makes repeated
    warm-started solves cheap.
    """

    def __init__(self, qp: QuadraticProgram, *, sigma: float = 1e-6, alpha: float = 1.6,
                 rho: float = 0.1, reg: float = 1e-9, scaling_iters: int = 15,
                 check_every: int = 25, adaptive_rho: bool = True):
        self.qp = qp
        self.sigma = sigma
        self.alpha = alpha
        self.reg = reg
        self.check_every = check_every
        self.adaptive_rho = adaptive_rho
        n = qp.n
        self.n = n

        box_rows = np.flatnonzero(np.isfinite(qp.lower) | np.isfinite(qp.upper))
        self.box_rows = box_rows
        E_box = sp.csr_matrix((np.ones(box_rows.size), (np.arange(box_rows.size), box_rows)),
                              shape=(box_rows.size, n))
        self.m_eq, self.m_in = qp.A_eq.shape[0], qp.A_in.shape[0]
        A = sp.vstack([qp.A_eq, qp.A_in, E_box], format="csc")
        l = np.concatenate([qp.b_eq, np.full(self.m_in, -np.inf), qp.lower[box_rows]])
        u = np.concatenate([qp.b_eq, qp.b_in, qp.upper[box_rows]])
        self.m = A.shape[0]
        P = (qp.Q + 2.0 * reg * sp.identity(n, format="csc")).tocsc()

        D, E = self._ruiz(P, A, scaling_iters)
        self.D, self.E = D, E
        Dm, Em = sp.diags(D), sp.diags(E)
        self.P = (Dm @ P @ Dm).tocsc()
        self.A = (Em @ A @ Dm).tocsc()
        self.AT = self.A.T.tocsc()
        self.l = E * l
        self.u = E * u
        self.is_eq = (l == u)
        self.is_free = ~np.isfinite(l) & ~np.isfinite(u)

        pn = sp.linalg.norm(self.P, np.inf, axis=0) if n else np.zeros(0)
        scale = max(float(np.mean(pn)) if n else 0.0, _inf(D * qp.c))
        self.cost_scale = 1.0 / min(max(scale, 1e-4), 1e4) if scale > 0 else 1.0
        self.P = (self.cost_scale * self.P).tocsc()

        self.rho = rho
        self._factor = None
        self._factor_rho = None
        self.x = np.zeros(n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)

    # -- setup -----------------------------------------------------------

    @staticmethod
    def _ruiz(P, A, iters):
        n, m = P.shape[0], A.shape[0]
        D, E = np.ones(n), np.ones(m)
        Pk, Ak = P.copy(), A.copy()
        for _ in range(iters):
            cn = np.maximum(sp.linalg.norm(Pk, np.inf, axis=0) if n else np.zeros(0),
                            sp.linalg.norm(Ak, np.inf, axis=0) if m else np.zeros(n))
            rn = sp.linalg.norm(Ak, np.inf, axis=1) if m else np.zeros(0)
            dx = np.where(cn < 1e-4, 1.0, 1.0 / np.sqrt(np.clip(cn, 1e-4, 1e4)))
            dy = np.where(rn < 1e-4, 1.0, 1.0 / np.sqrt(np.clip(rn, 1e-4, 1e4)))
            Pk = sp.diags(dx) @ Pk @ sp.diags(dx)
            Ak = sp.diags(dy) @ Ak @ sp.diags(dx)
            D *= dx
            E *= dy
        return D, E

    def _rho_vec(self) -> np.ndarray:
        r = np.full(self.m, self.rho)
        r[self.is_eq] = 1e3 * self.rho
        r[self.is_free] = 1e-6
        return r

    def _factorize(self):
        if self._factor is not None and self._factor_rho == self.rho:
            return
        rv = self._rho_vec()
        K = self.P + self.sigma * sp.identity(self.n, format="csc") + self.AT @ sp.diags(rv) @ self.A
        if self.n <= DENSE_N:
            cf = la.cho_factor(K.toarray(), lower=True, check_finite=False)
            self._factor = lambda b: la.cho_solve(cf, b, check_finite=False)
        else:
            lu = spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")
            self._factor = lu.solve
        self._factor_rho = self.rho
        self._rv = rv

    # -- helpers ---------------------------------------------------------

    def _unscale(self, x, y, z):
        return self.D * x, self.E * y / self.cost_scale, z / self.E

    def _split_duals(self, y):
        y_eq = y[: self.m_eq]
        y_in = y[self.m_eq: self.m_eq + self.m_in]
        z = np.zeros(self.n)
        z[self.box_rows] = y[self.m_eq + self.m_in:]
        return y_eq, y_in, z

    def _evaluate(self, x, y):
        """Clip x to its box, then measure KKT residuals on the original problem."""
        qp = self.qp
        x = np.clip(x, qp.lower, qp.upper)
        y_eq, y_in, z = self._split_duals(y)
        y_in = np.maximum(y_in, 0.0)
        prim, stat, comp = kkt_residuals(qp, x, y_eq, y_in, z)
        return x, (y_eq, y_in, z), (prim, stat, comp)

    def _polish(self, x, z, y, rounds: int):
        """Direct KKT solve on the active set guessed from (x, z, y).

        The reduced system is solved by proximal iterations centred on the
        ADMM iterate, which stays well-posed when it is singular. Wrong-signed
        multipliers and violated rows update the guess for up to ``rounds``
        passes.
        """
        n = self.n
        act_lo = (np.isfinite(self.l) & (z - self.l < -y)) | self.is_eq
        act_up = np.isfinite(self.u) & (self.u - z < y) & ~self.is_eq
        delta = 1e-7
        best = None
        xk = x.copy()
        for _ in range(rounds):
            rows = np.flatnonzero(act_lo | act_up)
            b = np.where(act_lo[rows], self.l[rows], self.u[rows])
            Aact = self.A[rows]
            K = sp.bmat([[self.P, Aact.T], [Aact, None]], format="csc") if rows.size else self.P
            Kreg = K + sp.diags(np.concatenate([np.full(n, delta), np.full(rows.size, -delta)]))
            try:
                if n + rows.size <= DENSE_N:
                    lu_piv = la.lu_factor(Kreg.toarray(), check_finite=False)
                    solve = lambda r: la.lu_solve(lu_piv, r, check_finite=False)
                else:
                    solve = spla.splu(Kreg.tocsc()).solve
            except (RuntimeError, ValueError, la.LinAlgError):
                return best
            rhs = np.concatenate([-self.q, b])
            sol = np.concatenate([xk, y[rows]])
            for _ in range(30):
                sol = solve(rhs + delta * np.concatenate([sol[:n], -sol[n:]]))
                if _inf(rhs - K @ sol) < 1e-12 * max(1.0, _inf(rhs)):
                    break
            if not np.all(np.isfinite(sol)):
                return best
            xp = sol[:n]
            yp = np.zeros(self.m)
            yp[rows] = sol[n:]
            best = (xp, yp)
            ax = self.A @ xp
            tol = 1e-10
            wrong_lo = act_lo & ~self.is_eq & (yp > tol)
            wrong_up = act_up & (yp < -tol)
            free = ~act_lo & ~act_up
            viol_lo = free & (ax < self.l - tol)
            viol_up = free & (ax > self.u + tol)
            if not (wrong_lo.any() or wrong_up.any() or viol_lo.any() or viol_up.any()):
                break
            act_lo = (act_lo & ~wrong_lo) | viol_lo
            act_up = (act_up & ~wrong_up) | viol_up
            xk = xp
        return best

    def _certificate(self, dy, eps: float = 1e-4) -> bool:
        """Approximate Farkas certificate: A'dy ~ 0 while u'dy+ + l'dy- < 0."""
        norm = _inf(self.E * dy)
        if norm <= 0:
            return False
        if _inf(self.D * (self.AT @ dy)) > eps * norm:
            return False
        pos, neg = np.maximum(dy, 0), np.minimum(dy, 0)
        if np.any(pos[~np.isfinite(self.u)] > eps * norm) or np.any(neg[~np.isfinite(self.l)] < -eps * norm):
            return False
        u = np.where(np.isfinite(self.u), self.u, 0.0)
        l = np.where(np.isfinite(self.l), self.l, 0.0)
        return float(u @ pos + l @ neg) < -eps * norm

    # -- main loop -------------------------------------------------------

    def solve(self, tol: float = 1e-6, max_iter: int = 50_000, c=None, warm_start=None) -> QpSolution:
        if not tol > 0:
            raise QpError("tol must be > 0")
        qp = self.qp
        if c is not None:
            qp = self.qp = qp.with_linear(c)
        self.q = self.cost_scale * self.D * qp.c
        n, m = self.n, self.m
        if warm_start is not None:
            wx, wy = warm_start
            self.x = np.asarray(wx, dtype=float) / self.D
            self.y = self.cost_scale * np.asarray(wy, dtype=float) / self.E
            self.z = np.clip(self.A @ self.x, self.l, self.u)
        x, z, y = self.x.copy(), self.z.copy(), self.y.copy()
        y_prev = y
        self._factorize()
        rounds = 25 if n < SMALL_N else 4

        best = None  # (kkt, x, duals, parts, polished)
        polish_level = 1e-2
        stall_ref = []
        next_adapt = 2 * self.check_every
        status = MAX_ITER
        it = 0
        alpha, sigma = self.alpha, self.sigma

        def consider(xs, ys, polished):
            nonlocal best
            xu = self.D * xs
            yu = self.E * ys / self.cost_scale
            xc, duals, parts = self._evaluate(xu, yu)
            k = max(parts)
            if best is None or k < best[0]:
                best = (k, xc, duals, parts, polished)
            return k

        while True:
            if it % self.check_every == 0:
                Ax = self.A @ x
                prim_s = _inf(Ax - z)
                dual_s = _inf(self.P @ x + self.q + self.AT @ y)
                prim = _inf((Ax - z) / self.E)
                dual = _inf((self.P @ x + self.q + self.AT @ y) / (self.D * self.cost_scale))
                k = consider(x, y, False)
                if k <= tol:
                    status = OPTIMAL
                    break
                level = max(prim, dual)
                if m and level <= polish_level:
                    pol = self._polish(x, z, y, rounds)
                    if pol is not None and consider(pol[0], pol[1], True) <= tol:
                        status = OPTIMAL
                        break
                    polish_level = level / 10.0
                if it >= max_iter:
                    break
                # infeasibility: primal residual stuck above 1e-3 for 1000 iterations
                stall_ref.append((it, prim_s))
                old = [p for (i, p) in stall_ref if i <= it - 1000]
                if old and prim_s > 1e-3 and prim_s >= 0.99 * old[-1] and self._certificate(y - y_prev):
                    status = INFEASIBLE
                    break
                if self.adaptive_rho and it >= next_adapt:
                    next_adapt *= 2
                    num = prim_s / max(_inf(Ax), _inf(z), 1e-12)
                    den = dual_s / max(_inf(self.P @ x), _inf(self.AT @ y), _inf(self.q), 1e-12)
                    if num > 0 and den > 0:
                        new_rho = float(np.clip(self.rho * math.sqrt(num / den), 1e-6, 1e6))
                        if new_rho > 5 * self.rho or new_rho < 0.2 * self.rho:
                            self.rho = new_rho
                            self._factorize()
            if it >= max_iter:
                break
            rv = self._rv
            rhs = sigma * x - self.q + self.AT @ (rv * z - y)
            xt = self._factor(rhs)
            zt = self.A @ xt
            x = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z = np.clip(zr + y / rv, self.l, self.u)
            y_prev = y
            y = y + rv * (zr - z)
            it += 1

        self.x, self.z, self.y = x, z, y
        k, xc, (y_eq, y_in, zb), parts, polished = best
        if status == INFEASIBLE:
            k = max(parts)
        return QpSolution(
            x=xc, objective=self.qp.objective(xc), kkt_residual=k, iterations=it, status=status,
            y_eq=y_eq, y_in=y_in, z=zb, primal_residual=parts[0], stationarity=parts[1],
            complementarity=parts[2], polished=polished,
        )


def solve_qp(qp: QuadraticProgram, tol: float = 1e-6, max_iter: int = 50_000, warm_start=None) -> QpSolution:
    return QpSolver(qp).solve(tol=tol, max_iter=max_iter, warm_start=warm_start)
