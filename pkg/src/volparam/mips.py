"""Conformal (MIPS) distortion and its minimization with the boundary held fixed.

The energy is ``int D_con^2`` with ``D_con = (|J|_F^2 |J^-1|_F^2 - 1) / 8``,
discretized by per-cell Gauss-Legendre quadrature.  Because ``D_con`` blows up
as ``det J -> 0`` the quasi-Newton line search only has to reject steps that
make a nodal determinant non-positive; the result is then re-certified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bspline import BSplineVolume
from .certify import DEFAULT_DELTA, DEFAULT_MAX_DEPTH, CertificateReport, certify_volume
from .errors import NotCertifiedError
from .quadrature import GRAD_ORDERS, QuadratureRule, cell_rule, local_basis

log = logging.getLogger(__name__)


def _adjugate(J: np.ndarray) -> np.ndarray:
    """Adjugate of a stack of 3x3 matrices, so that ``J @ adj = det I``."""
    a = J
    adj = np.empty_like(a)
    adj[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    adj[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    adj[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    adj[..., 1, 0] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    adj[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    adj[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    adj[..., 2, 0] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    adj[..., 2, 1] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    adj[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return adj


def _det3(J: np.ndarray) -> np.ndarray:
    return (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )


def conformal_distortion(J) -> np.ndarray | float:
    """MIPS conformal distortion of one matrix or a stack ``(..., 3, 3)``.

    Singular matrices give ``+inf``.  The value is at least 1 and equals 1
    exactly for scaled rotations.
    """
    J = np.asarray(J, dtype=np.float64)
    det = _det3(J)
    adj = _adjugate(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (np.sum(J**2, axis=(-2, -1)) * np.sum(adj**2, axis=(-2, -1)) / det**2 - 1.0) / 8.0
    val = np.where(det == 0.0, np.inf, val)
    return float(val) if val.ndim == 0 else val


class MIPSObjective:
    """``int D_con^2`` over a fixed quadrature rule as a function of the free controls.

    Parameters
    ----------
    vol : BSplineVolume
        Supplies the knots and the fixed (boundary) controls.
    rule : QuadratureRule, optional
        Defaults to ``p + 1`` Gauss points per direction per cell.
    free_mask : bool array of ``vol.shape``, optional
        Defaults to every interior control.
    """

    def __init__(self, vol: BSplineVolume, rule: QuadratureRule | None = None, free_mask=None):
        self.vol = vol
        self.rule = cell_rule(vol) if rule is None else rule
        if free_mask is None:
            free_mask = ~vol.boundary_mask()
        self.free_mask = np.asarray(free_mask, dtype=bool)
        self.free = np.flatnonzero(self.free_mask.transpose(2, 1, 0).reshape(-1))
        self.base = vol.flat_ctrl().copy()
        idx, vals = local_basis(vol.knots, self.rule.points, GRAD_ORDERS)
        npts, nb = idx.shape
        rows = np.repeat(np.arange(npts), nb)
        # one sparse matrix per parametric direction: J[:, :, a] = D[a] @ ctrl
        self.D = [
            sp.csr_matrix((vals[a].reshape(-1), (rows, idx.reshape(-1))), shape=(npts, vol.n_ctrl)) for a in range(3)
        ]
        self.Df = [d[:, self.free].tocsc() for d in self.D]

    @property
    def n(self) -> int:
        return 3 * self.free.size

    def x0(self) -> np.ndarray:
        return self.base[self.free].reshape(-1)

    def controls(self, x) -> np.ndarray:
        flat = self.base.copy()
        flat[self.free] = np.asarray(x).reshape(-1, 3)
        return flat

    def volume(self, x) -> BSplineVolume:
        return BSplineVolume.from_flat(self.vol.knots, self.controls(x))

    def jacobians(self, x) -> np.ndarray:
        flat = self.controls(x)
        return np.stack([d @ flat for d in self.D], axis=-1)  # (N, 3, 3), J[n, i, a]

    def min_det(self, x) -> float:
        return float(_det3(self.jacobians(x)).min())

    def value_and_grad(self, x) -> tuple[float, np.ndarray]:
        """Energy and its gradient; ``(inf, nan)`` if any nodal det is non-positive."""
        J = self.jacobians(x)
        det = _det3(J)
        if not np.all(det > 0.0):
            return np.inf, np.full(self.n, np.nan)
        adj = _adjugate(J)
        Kinv = adj / det[:, None, None]
        F = np.sum(J**2, axis=(1, 2))
        G = np.sum(Kinv**2, axis=(1, 2))
        Dc = (F * G - 1.0) / 8.0
        w = self.rule.weights
        val = float(w @ Dc**2)
        # d|J^-1|^2/dJ = -2 K^T K K^T with K = J^-1
        KtK = np.einsum("nji,njk->nik", Kinv, Kinv)
        dG = -2.0 * np.einsum("nij,nkj->nik", KtK, Kinv)
        dD = (2.0 * J * G[:, None, None] + F[:, None, None] * dG) / 8.0
        dJ = (2.0 * w * Dc)[:, None, None] * dD
        grad = np.zeros((self.free.size, 3))
        for a in range(3):
            grad += self.Df[a].T @ dJ[:, :, a]
        return val, grad.reshape(-1)


def mips_objective(vol: BSplineVolume, rule: QuadratureRule | None = None, free_mask=None) -> tuple[float, np.ndarray]:
    """``(int D_con^2, gradient)`` with respect to the free controls of ``vol``."""
    obj = MIPSObjective(vol, rule, free_mask)
    return obj.value_and_grad(obj.x0())


# ---------------------------------------------------------------------------
# L-BFGS with a barrier-aware backtracking line search
# ---------------------------------------------------------------------------


@dataclass
class LBFGSResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def lbfgs(
    fun,
    x0,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
    memory: int = 10,
    c1: float = 1e-4,
    callback=None,
) -> LBFGSResult:
    """Minimize ``fun(x) -> (value, grad)`` with limited-memory BFGS.

    Backtracking halves the step until the Armijo condition holds; infinite
    values count as failures, so ``fun`` may use ``inf`` as a barrier.  Stops
    once the gradient norm is at most ``grad_tol`` times its initial value.
    ``callback(it, value, gnorm, step, x)`` is called after every accepted step.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f):
        raise ValueError("starting point has an infinite objective")
    g0 = float(np.linalg.norm(g))
    floor = 1e-13 * max(1.0, abs(f))
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    trace = [(0, f, g0, 0.0)]
    gnorm = g0
    it = 0
    converged = gnorm <= max(grad_tol * g0, floor)
    while not converged and it < max_iter:
        d = -_two_loop(g, S, Y)
        slope = float(g @ d)
        if slope >= 0.0:
            # lost descent: restart from steepest descent
            S.clear()
            Y.clear()
            d = -g
            slope = -gnorm**2
        step = 1.0 if S else min(1.0, 1.0 / max(gnorm, 1e-300))
        accepted = False
        for _ in range(60):
            xt = x + step * d
            ft, gt = fun(xt)
            if np.isfinite(ft) and ft <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.info("lbfgs: line search failed at iteration %d", it)
            break
        it += 1
        s, y = xt - x, gt - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xt, ft, gt
        gnorm = float(np.linalg.norm(g))
        trace.append((it, f, gnorm, step))
        if callback is not None:
            callback(it, f, gnorm, step, x)
        converged = gnorm <= max(grad_tol * g0, floor)
    return LBFGSResult(x, float(f), gnorm, it, bool(converged), trace)


# ---------------------------------------------------------------------------
# Stage-3 driver
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    """Outcome of :func:`refine`.

    ``volume`` is the optimized map, or the input map when re-certification
    failed (``status == "Indeterminate"``, ``preserved`` True).  ``trace`` rows
    are ``(iteration, objective, gradient norm, step, min nodal det)``.
    """

    volume: BSplineVolume
    status: str
    report: CertificateReport
    initial_objective: float
    objective: float
    iterations: int
    converged: bool
    preserved: bool
    trace: list

    def trace_text(self) -> str:
        lines = ["iter objective grad_norm step min_det"]
        lines += [f"{i} {f:.12e} {g:.6e} {s:.6e} {m:.6e}" for i, f, g, s, m in self.trace]
        return "\n".join(lines) + "\n"


def refine(
    vol: BSplineVolume,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
    order=None,
    cert_delta: float = DEFAULT_DELTA,
    cert_depth: int = DEFAULT_MAX_DEPTH,
    report: CertificateReport | None = None,
) -> RefineResult:
    """Reduce conformal distortion of a certified volume with its boundary fixed.

    Parameters
    ----------
    vol : BSplineVolume
        Must certify at ``cert_delta`` (a precomputed ``report`` may be passed).
    max_iter, grad_tol : int, float
        L-BFGS limits; ``grad_tol`` is relative to the initial gradient norm.
    order : int or tuple, optional
        Gauss points per direction per cell, default ``degree + 1``.

    Raises
    ------
    NotCertifiedError
        If the input is not certified.
    """
    if report is None:
        report = certify_volume(vol, cert_delta, cert_depth)
    if not report.certified:
        raise NotCertifiedError(f"input volume is not certified ({len(report.failing_cells)} failing cells)")
    rule = cell_rule(vol, order)
    obj = MIPSObjective(vol, rule)
    x0 = obj.x0()
    f0, g0 = obj.value_and_grad(x0)
    trace = [(0, f0, float(np.linalg.norm(g0)), 0.0, obj.min_det(x0))]

    def cb(it, f, gnorm, step, x):
        trace.append((it, f, gnorm, step, obj.min_det(x)))
        log.debug("mips it=%d f=%.10e |g|=%.3e step=%.3e", it, f, gnorm, step)

    if obj.n == 0:
        res = LBFGSResult(x0, f0, 0.0, 0, True)
    else:
        res = lbfgs(obj.value_and_grad, x0, max_iter=max_iter, grad_tol=grad_tol, callback=cb)
    out = obj.volume(res.x)
    new_report = certify_volume(out, cert_delta, cert_depth)
    if new_report.certified:
        return RefineResult(out, "Certified", new_report, f0, res.value, res.iterations, res.converged, False, trace)
    log.warning("refined volume failed re-certification; keeping the input volume")
    return RefineResult(vol, "Indeterminate", new_report, f0, res.value, res.iterations, res.converged, True, trace)


__all__ = [
    "conformal_distortion",
    "MIPSObjective",
    "mips_objective",
    "LBFGSResult",
    "lbfgs",
    "RefineResult",
    "refine",
]
