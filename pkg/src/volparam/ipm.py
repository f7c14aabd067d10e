"""Primal-dual interior-point method for smooth inequality-constrained problems.

Solves ``min f(z)  s.t.  c(z) >= 0`` with slacks ``c(z) - s = 0, s > 0``.  Steps
come from the condensed Newton system ``(W + A^T S^-1 Y A) dz = rhs`` with an
inertia-style diagonal shift whenever the condensed matrix is not positive
definite; globalization uses an l1 merit function with backtracking.  Because
the slacks absorb constraint violation the method starts from infeasible points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import ConvergenceError, InfeasibleError

log = logging.getLogger(__name__)


class ConstrainedProblem(Protocol):
    """Interface consumed by :func:`solve_ipm`.

    ``hessian(z, y)`` returns the Hessian of the Lagrangian ``f(z) - y^T c(z)``.
    """

    n: int
    m: int

    def objective(self, z: np.ndarray) -> tuple[float, np.ndarray]: ...

    def constraints(self, z: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix]: ...

    def hessian(self, z: np.ndarray, y: np.ndarray) -> np.ndarray: ...


@dataclass
class IPMResult:
    z: np.ndarray
    y: np.ndarray
    objective: float
    kkt: float
    violation: float
    iterations: int
    status: str
    history: list = field(default_factory=list)


def kkt_residual(problem, z, y) -> tuple[float, float, float, float]:
    """``(kkt, stationarity, violation, complementarity)`` at a primal-dual point.

    Complementarity uses ``min(c, 0)``-clipped values so that the measure is
    meaningful for any ``z``; ``kkt`` is the maximum of the three parts.
    """
    _, g = problem.objective(z)
    c, A = problem.constraints(z)
    stat = float(np.abs(g - A.T @ y).max(initial=0.0))
    viol = float(np.maximum(-c, 0.0).max(initial=0.0))
    comp = float(np.abs(np.maximum(c, 0.0) * y).max(initial=0.0))
    return max(stat, viol, comp), stat, viol, comp


def _fraction_to_boundary(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)


def solve_ipm(
    problem: ConstrainedProblem,
    z0,
    tol: float = 1e-8,
    max_iter: int = 300,
    mu0: float | None = None,
    stop: Callable[[np.ndarray, np.ndarray], bool] | None = None,
    mu_strategy: str = "monotone",
    max_step: float | None = None,
) -> IPMResult:
    """Minimize ``problem`` from ``z0`` to a KKT residual below ``tol``.

    Parameters
    ----------
    stop : callable, optional
        ``stop(z, c)`` is checked after every accepted step; returning True ends
        the run early with status ``"stopped"``.
    mu_strategy : {"monotone", "adaptive"}
        Fiacco-McCormick decrease after each barrier subproblem, or a
        complementarity-driven update every iteration.
    max_step : float, optional
        Cap on the infinity norm of the primal step (a crude trust region for
        strongly nonlinear constraints).

    Raises
    ------
    InfeasibleError
        If the iteration limit is hit while constraints are still violated, or
        the multipliers diverge (local infeasibility).
    ConvergenceError
        If the limit is hit at a feasible but non-stationary point.
    """
    z = np.array(z0, dtype=np.float64)
    n, m = problem.n, problem.m
    f, g = problem.objective(z)
    c, A = problem.constraints(z)
    s = np.maximum(c, 1e-2 * max(1.0, float(np.abs(c).max(initial=0.0))))
    # multipliers of a max-min problem sum to about one, so start each at 1/m
    y = np.full(m, 1.0 / max(m, 1))
    mu = float(mu0) if mu0 is not None else float(s @ y) / max(m, 1)
    nu = 1.0
    shift = 0.0
    history = []
    mu_min = tol / 10.0

    def merit(fv, cv, sv, mu_, nu_):
        return fv - mu_ * np.sum(np.log(sv)) + nu_ * np.abs(cv - sv).sum()

    for it in range(max_iter + 1):
        sd = max(100.0, np.abs(y).sum() / max(m, 1)) / 100.0
        rd = g - A.T @ y
        rp = c - s
        err0 = max(
            float(np.abs(rd).max(initial=0.0)) / sd,
            float(np.abs(rp).max(initial=0.0)),
            float(np.abs(s * y).max(initial=0.0)) / sd,
        )
        viol = float(np.maximum(-c, 0.0).max(initial=0.0))
        history.append((it, float(f), err0, viol, mu))
        log.debug("ipm it=%d f=%.8e err=%.3e viol=%.3e mu=%.2e nu=%.2e shift=%.2e", it, f, err0, viol, mu, nu, shift)
        if err0 <= tol and viol <= tol:
            kkt = kkt_residual(problem, z, y)[0]
            return IPMResult(z, y, float(f), kkt, viol, it, "converged", history)
        if it == max_iter:
            break
        if mu_strategy == "adaptive" and m:
            # centering weight from the spread of s*y
            comp = s * y
            avg = float(comp.mean())
            xi = float(comp.min()) / avg if avg > 0 else 1.0
            sigma_c = 0.1 * min(0.05 * (1.0 - xi) / max(xi, 1e-12), 2.0) ** 3
            mu = max(mu_min, min(sigma_c * avg, mu if it else np.inf))
        else:
            # barrier subproblem solved: shrink mu (possibly several times)
            while mu > mu_min:
                err_mu = max(
                    float(np.abs(rd).max(initial=0.0)) / sd,
                    float(np.abs(rp).max(initial=0.0)),
                    float(np.abs(s * y - mu).max(initial=0.0)) / sd,
                )
                if err_mu > 10.0 * mu:
                    break
                mu = max(mu_min, min(0.2 * mu, mu**1.5))
        if np.abs(y).max(initial=0.0) > 1e12:
            break

        W = _dense(problem.hessian(z, y))
        sigma = y / s
        As = sp.csr_matrix(A)
        M = W + _dense(As.T @ sp.diags(sigma) @ As)
        rhs = -g + As.T @ (mu / s - sigma * rp)
        scale = max(1.0, float(np.abs(np.diag(M)).max(initial=1.0)))
        trial = 0.0 if shift == 0.0 else max(1e-20 * scale, shift / 3.0)
        while True:
            try:
                cf = la.cho_factor(M + trial * np.eye(n), lower=True, check_finite=False)
                break
            except la.LinAlgError:
                trial = 1e-8 * scale if trial == 0.0 else trial * (100.0 if shift == 0.0 else 8.0)
                if trial > 1e40:
                    raise ConvergenceError("condensed system could not be regularized", residual=err0)
        shift = trial
        dz = la.cho_solve(cf, rhs, check_finite=False)
        if max_step is not None:
            big = float(np.abs(dz).max(initial=0.0))
            if big > max_step:
                dz *= max_step / big
        ds = As @ dz + rp
        dy = mu / s - y - sigma * ds

        tau = max(0.99, 1.0 - mu)
        a_p = _fraction_to_boundary(s, ds, tau)
        a_d = _fraction_to_boundary(y, dy, tau)

        rp1 = float(np.abs(rp).sum())
        lin = float(g @ dz) - mu * float(np.sum(ds / s))
        curv = 0.5 * max(float(dz @ (W @ dz)), 0.0)
        if rp1 > 1e-14:
            need = (lin + curv) / (0.9 * rp1)
            if nu < need:
                nu = need + 1.0
        phi0 = merit(f, c, s, mu, nu)
        dphi = lin - nu * rp1
        alpha = a_p
        accepted = False
        for _ in range(60):
            zt = z + alpha * dz
            st = s + alpha * ds
            ft, gt = problem.objective(zt)
            ct, At = problem.constraints(zt)
            if np.all(np.isfinite(ct)) and np.isfinite(ft):
                phit = merit(ft, ct, st, mu, nu)
                if phit <= phi0 + 1e-4 * alpha * min(dphi, 0.0) or abs(phit - phi0) <= 1e-14 * max(1.0, abs(phi0)):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # tiny step: take it anyway to keep the barrier parameter moving
            zt, st = z + alpha * dz, s + alpha * ds
            ft, gt = problem.objective(zt)
            ct, At = problem.constraints(zt)
        z, f, g, c, A = zt, ft, gt, ct, At
        s = np.maximum(st, c)  # slack reset: never worse for the merit
        y = y + a_d * dy
        ksig = 1e10
        y = np.clip(y, mu / (ksig * s), ksig * mu / s)
        if stop is not None and stop(z, c):
            kkt = kkt_residual(problem, z, y)[0]
            return IPMResult(z, y, float(f), kkt, float(np.maximum(-c, 0.0).max(initial=0.0)), it + 1, "stopped", history)

    viol = float(np.maximum(-c, 0.0).max(initial=0.0))
    if viol > tol:
        order = np.argsort(c)[: min(10, m)]
        raise InfeasibleError(
            f"no feasible point within {len(history) - 1} iterations (max violation {viol:.3e})",
            worst_constraints=[(int(k), float(c[k])) for k in order if c[k] < 0],
            best_value=float(f),
        )
    raise ConvergenceError(f"interior-point iteration limit reached (residual {err0:.3e})", residual=err0)


__all__ = ["ConstrainedProblem", "IPMResult", "solve_ipm", "kkt_residual"]
