"""Stage 2: certified-bijective volumes from a max-min problem over collocation points.

The problem at one level is

    maximize  t - lam * E(G)   s.t.  det J(p_k) >= t  for p_k in P,   t >= delta,

with E the thin-plate fairness energy.  Collocation points are added coarse to
fine inside the boxes the certificate could not clear, and the problem is solved
one 2x2x2 subregion at a time in a fixed order.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .bspline import BSplineVolume
from .certify import CertificateReport, JacobianField, certify_volume, jacobian_bezier
from .errors import ConvergenceError, InfeasibleError, RefinementLimitError, VolParamError
from .harmonic import assemble_energy_matrix, quadrature_energy
from .ipm import IPMResult, solve_ipm
from .quadrature import GRAD_ORDERS, local_basis

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-2
DEFAULT_LAMBDA = 1.0
DEFAULT_MAX_LEVEL = 3


# ---------------------------------------------------------------------------
# Collocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollocationParams:
    """Knobs of the gradient-guided point budget.

    ``base`` is the level-0 per-cell budget (``2**9``); level ``l`` multiplies it
    by ``8**l``.  ``sigma=None`` picks ``(g_max / 2)**2`` per failing box.
    """

    base: float = 512.0
    grid: tuple = (2, 2, 2)
    sigma: float | None = None
    cap: int = 100_000
    seed: int = 0


@dataclass(frozen=True, eq=False)
class CollocationSet:
    points: np.ndarray
    level: np.ndarray
    cell: np.ndarray

    @staticmethod
    def empty() -> "CollocationSet":
        return CollocationSet(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.points.shape[0]

    def counts_per_cell(self, n_cells: int) -> np.ndarray:
        return np.bincount(self.cell, minlength=n_cells)

    def select(self, mask) -> "CollocationSet":
        return CollocationSet(self.points[mask], self.level[mask], self.cell[mask])

    def concat(self, other: "CollocationSet") -> "CollocationSet":
        return CollocationSet(
            np.concatenate([self.points, other.points]),
            np.concatenate([self.level, other.level]),
            np.concatenate([self.cell, other.cell]),
        )

    def relabel(self, field: JacobianField) -> "CollocationSet":
        """Recompute owning cells after the knot vectors changed."""
        ids, _ = field.locate(self.points)
        return CollocationSet(self.points, self.level, ids.astype(np.int64))


def _sub_cuboids(box: np.ndarray, grid) -> np.ndarray:
    L, M, N = grid
    lo, hi = box[:, 0], box[:, 1]
    w = (hi - lo) / np.array(grid)
    out = np.empty((L * M * N, 3, 2))
    n = 0
    for k in range(N):
        for j in range(M):
            for i in range(L):
                a = lo + w * np.array([i, j, k])
                out[n, :, 0] = a
                out[n, :, 1] = a + w
                n += 1
    return out


def collocation_counts(g: np.ndarray, level: int, vol_ratio: float, base: float = 512.0, sigma: float | None = None):
    """Per-sub-cuboid point counts for one failing box from the gradient magnitudes ``g``."""
    g = np.asarray(g, dtype=np.float64)
    g_max = float(g.max())
    if sigma is None:
        sigma = (g_max / 2.0) ** 2 if g_max > 0 else 1.0
    e = np.exp(-((g - g_max) ** 2) / sigma)
    weights = e / e.sum()
    raw = base * 8.0**level * vol_ratio * weights
    return np.ceil(raw - 1e-9).astype(np.int64)


def _dedupe(points: np.ndarray, against: np.ndarray | None = None, tol: float = 1e-12) -> np.ndarray:
    """Mask of points to keep: no two kept points (or a kept point and ``against``) within ``tol``."""
    keep = np.ones(points.shape[0], dtype=bool)
    if points.shape[0] == 0:
        return keep
    if against is not None and against.shape[0]:
        d, _ = cKDTree(against).query(points, distance_upper_bound=tol * 2)
        keep &= ~(d <= tol)
    tree = cKDTree(points)
    for i, j in sorted(tree.query_pairs(tol)):
        if keep[i] and keep[j]:
            keep[j] = False
    return keep


def generate_collocation(
    report: CertificateReport,
    field: JacobianField,
    level: int,
    params: CollocationParams = CollocationParams(),
    existing: CollocationSet | None = None,
) -> tuple[CollocationSet, CollocationSet]:
    """New points for the failing boxes of ``report``.

    Returns ``(delta, updated)`` where ``updated`` is ``existing`` minus the points
    in certified cells, plus ``delta``.
    """
    existing = CollocationSet.empty() if existing is None else existing
    certified = np.array([v.certified for v in report.verdicts], dtype=bool)
    kept = existing.select(~certified[existing.cell]) if len(existing) else existing

    boxes = report.failing_boxes()
    owners = report.failing_box_owners()
    cell_vol = np.prod(field.boxes[:, :, 1] - field.boxes[:, :, 0], axis=1)
    subs, counts, cells = [], [], []
    for box, gamma in zip(boxes, owners):
        cub = _sub_cuboids(box, params.grid)
        centers = cub.mean(axis=2)
        g = np.linalg.norm(field.gradient(centers), axis=1)
        ratio = float(np.prod(box[:, 1] - box[:, 0]) / cell_vol[gamma])
        counts.append(collocation_counts(g, level, ratio, params.base, params.sigma))
        subs.append(cub)
        cells.append(np.full(cub.shape[0], gamma, dtype=np.int64))
    if not subs:
        return CollocationSet.empty(), kept
    subs = np.concatenate(subs)
    counts = np.concatenate(counts)
    cells = np.concatenate(cells)
    room = max(params.cap - len(kept), 0)
    if counts.sum() > room:
        scale = room / counts.sum()
        counts = np.floor(counts * scale).astype(np.int64)
        log.warning("collocation cap %d reached; budget scaled by %.3g", params.cap, scale)
    nmax = int(counts.max(initial=0))
    if nmax == 0:
        return CollocationSet.empty(), kept
    engine = qmc.Halton(d=3, scramble=True, seed=np.random.default_rng([params.seed, level]))
    pattern = engine.random(nmax)
    pattern = np.clip(pattern, 1e-9, 1 - 1e-9)
    reps = np.repeat(np.arange(subs.shape[0]), counts)
    ranks = np.arange(reps.size) - np.repeat(np.cumsum(counts) - counts, counts)
    lo = subs[reps, :, 0]
    w = subs[reps, :, 1] - lo
    pts = lo + pattern[ranks] * w
    keep = _dedupe(pts, kept.points)
    delta = CollocationSet(pts[keep], np.full(int(keep.sum()), level, dtype=np.int64), cells[reps][keep])
    return delta, kept.concat(delta)


# ---------------------------------------------------------------------------
# Supports and subregions
# ---------------------------------------------------------------------------


def support_boxes(knots) -> np.ndarray:
    """``(nu, nv, nw, 3, 2)`` parameter boxes of the tensor basis supports."""
    sup = []
    for kv in knots:
        i = np.arange(kv.n_basis)
        sup.append(np.stack([kv.knots[i], kv.knots[i + kv.degree + 1]], -1))
    su, sv, sw = sup
    shape = tuple(kv.n_basis for kv in knots)
    out = np.empty(shape + (3, 2))
    out[..., 0, :] = su[:, None, None, :]
    out[..., 1, :] = sv[None, :, None, :]
    out[..., 2, :] = sw[None, None, :, :]
    return out


def _overlap(a: np.ndarray, b: np.ndarray, closed: bool) -> np.ndarray:
    """Pairwise box intersection test, ``a (..., 3, 2)`` against ``b (B, 3, 2)``."""
    lo = np.maximum(a[..., None, :, 0], b[:, :, 0])
    hi = np.minimum(a[..., None, :, 1], b[:, :, 1])
    if closed:
        return np.all(hi >= lo, axis=-1)
    return np.all(hi > lo, axis=-1)


def candidate_mask(vol: BSplineVolume, failing_boxes: np.ndarray) -> np.ndarray:
    """Interior controls whose support overlaps some failing box with positive volume."""
    if failing_boxes.shape[0] == 0:
        return np.zeros(vol.shape, dtype=bool)
    hit = _overlap(support_boxes(vol.knots), failing_boxes, closed=False).any(axis=-1)
    return hit & ~vol.boundary_mask()


def subregion_boxes(split: float = 0.5) -> np.ndarray:
    """The eight octants of the unit cube, xi fastest."""
    edges = [(0.0, split), (split, 1.0)]
    out = np.empty((8, 3, 2))
    for n in range(8):
        out[n] = [edges[(n >> d) & 1] for d in range(3)]
    return out


@dataclass(frozen=True, eq=False)
class SubregionPlan:
    """Ordered subregions and the control-point owner map (``-1`` = not free)."""

    boxes: np.ndarray
    owner: np.ndarray

    def free_mask(self, i: int) -> np.ndarray:
        return self.owner == i

    def free_counts(self) -> np.ndarray:
        return np.array([int(np.count_nonzero(self.owner == i)) for i in range(len(self.boxes))])

    def __len__(self) -> int:
        return self.boxes.shape[0]


def assign_owners(vol: BSplineVolume, candidates: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    sup = support_boxes(vol.knots)
    hit = _overlap(sup, boxes, closed=True)
    first = np.where(hit.any(axis=-1), np.argmax(hit, axis=-1), -1)
    return np.where(candidates, first, -1)


def plan_subregions(vol: BSplineVolume, report: CertificateReport | None = None, split: float = 0.5) -> SubregionPlan:
    """2x2x2 plan; free controls go to the first subregion their support touches."""
    boxes = subregion_boxes(split)
    failing = report.failing_boxes() if report is not None else np.array([[[0.0, 1.0]] * 3])
    cand = candidate_mask(vol, failing)
    return SubregionPlan(boxes, assign_owners(vol, cand, boxes))


# ---------------------------------------------------------------------------
# Max-min problem
# ---------------------------------------------------------------------------


def _cofactors(J: np.ndarray) -> np.ndarray:
    c0, c1, c2 = J[:, :, 0], J[:, :, 1], J[:, :, 2]
    return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-1)


class MaxMinProblem:
    """``min -t + lam E(x)`` subject to the det constraints, in :mod:`ipm` form.

    Variables are the free control coordinates (``3 * f + coord``) followed by ``t``.
    Constraint rows: one ``det - t`` per collocation point, one ``det - bound``
    per guard point, and ``t - delta`` last when ``include_delta`` is set.
    """

    def __init__(
        self,
        vol: BSplineVolume,
        points,
        lam: float = DEFAULT_LAMBDA,
        delta: float = DEFAULT_DELTA,
        free_mask=None,
        guard_points=None,
        guard_bounds=None,
        fairness: sp.csr_matrix | None = None,
        include_delta: bool = True,
    ):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if points.shape[0] == 0:
            raise VolParamError("max-min problem needs at least one collocation point")
        if lam <= 0 or delta <= 0:
            raise ValueError("lam and delta must be positive")
        self.vol = vol
        self.knots = vol.knots
        self.lam = float(lam)
        self.delta = float(delta)
        self.include_delta = include_delta
        if free_mask is None:
            free_mask = ~vol.boundary_mask()
        self.free_mask = np.asarray(free_mask, dtype=bool)
        self.base = vol.flat_ctrl().copy()
        self.free = np.flatnonzero(self.free_mask.transpose(2, 1, 0).reshape(-1))
        self.nf = self.free.size
        self.n = 3 * self.nf + 1
        pos = np.full(vol.n_ctrl, -1, dtype=np.int64)
        pos[self.free] = np.arange(self.nf)

        guard_points = np.zeros((0, 3)) if guard_points is None else np.asarray(guard_points, dtype=np.float64).reshape(-1, 3)
        self.n_t = points.shape[0]
        self.n_guard = guard_points.shape[0]
        self.points = np.concatenate([points, guard_points])
        self.bounds = np.concatenate([np.zeros(self.n_t), np.asarray(guard_bounds if guard_bounds is not None else [], dtype=np.float64)])
        idx, vals = local_basis(self.knots, self.points, GRAD_ORDERS)
        self.idx = idx
        self.grad = np.ascontiguousarray(vals.transpose(1, 2, 0))  # (N, nb, 3)
        self.local_pos = pos[idx]  # (N, nb)
        self.m = self.points.shape[0] + (1 if include_delta else 0)

        # constraint Jacobian pattern
        npts, nb = idx.shape
        n_idx, a_idx = np.nonzero(self.local_pos >= 0)
        rows = np.repeat(n_idx, 3)
        cols = (3 * self.local_pos[n_idx, a_idx])[:, None] + np.arange(3)
        self._pat = (rows, cols.reshape(-1), n_idx, a_idx)
        t_rows = np.arange(self.n_t)
        self._t_rows = t_rows

        g_rows = (3 * n_idx[:, None] + np.arange(3)).reshape(-1)
        g_cols = np.repeat(self.local_pos[n_idx, a_idx], 3)
        g_vals = self.grad[n_idx, a_idx].reshape(-1)
        self._gmat = sp.csr_matrix((g_vals, (g_rows, g_cols)), shape=(3 * npts, self.nf))

        F = assemble_energy_matrix(self.knots, "hessian") if fairness is None else fairness
        self.F = sp.csr_matrix(F)
        F_ff = self.F[self.free][:, self.free].toarray()
        self._H_fair = np.zeros((self.n, self.n))
        self._H_fair[:-1, :-1] = 2.0 * self.lam * np.kron(F_ff, np.eye(3))

    def relaxed(self, factor: float) -> "MaxMinProblem":
        """Copy with the fairness weight scaled by ``factor`` and no ``t >= delta`` row."""
        out = copy.copy(self)
        out.lam = self.lam * factor
        out._H_fair = self._H_fair * factor
        if self.include_delta:
            out.include_delta = False
            out.m = self.m - 1
        return out

    # -- variables ----------------------------------------------------------
    def controls(self, z) -> np.ndarray:
        X = self.base.copy()
        X[self.free] = np.asarray(z[:-1]).reshape(self.nf, 3)
        return X

    def pack(self, vol_or_flat, t: float) -> np.ndarray:
        flat = vol_or_flat.flat_ctrl() if isinstance(vol_or_flat, BSplineVolume) else np.asarray(vol_or_flat)
        return np.concatenate([flat[self.free].reshape(-1), [t]])

    def volume(self, z) -> BSplineVolume:
        return BSplineVolume.from_flat(self.knots, self.controls(z))

    def jacobians(self, z) -> np.ndarray:
        X = self.controls(z)
        return np.einsum("nac,nai->nci", X[self.idx], self.grad, optimize=True)

    def dets(self, z) -> np.ndarray:
        return np.linalg.det(self.jacobians(z))

    # -- ipm interface ------------------------------------------------------
    def fairness(self, z) -> float:
        X = self.controls(z)
        return float(np.einsum("ic,ic->", X, self.F @ X))

    def objective(self, z):
        X = self.controls(z)
        FX = self.F @ X
        E = float(np.einsum("ic,ic->", X, FX))
        g = np.empty(self.n)
        g[:-1] = 2.0 * self.lam * FX[self.free].reshape(-1)
        g[-1] = -1.0
        return -float(z[-1]) + self.lam * E, g

    def constraints(self, z):
        J = self.jacobians(z)
        det = np.linalg.det(J)
        cof = _cofactors(J)
        dd = np.einsum("nci,nai->nac", cof, self.grad, optimize=True)  # (N, nb, 3)
        rows, cols, n_idx, a_idx = self._pat
        vals = dd[n_idx, a_idx].reshape(-1)
        c = det - self.bounds
        c[: self.n_t] -= z[-1]
        r_all = [rows, self._t_rows]
        c_all = [cols, np.full(self.n_t, self.n - 1)]
        v_all = [vals, -np.ones(self.n_t)]
        if self.include_delta:
            c = np.append(c, z[-1] - self.delta)
            r_all.append([self.m - 1])
            c_all.append([self.n - 1])
            v_all.append([1.0])
        A = sp.csr_matrix((np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))), shape=(self.m, self.n))
        return c, A

    def hessian(self, z, y):
        """Fairness Hessian minus the multiplier-weighted det(J) Hessians.

        With ``G`` stacking the basis gradients of the free controls per point,
        the second derivative of det(J) pairs coordinates ``(a, b)`` through
        ``M_c = -G^T blockdiag(y_n [J_c]_x) G`` (``J_c`` the c-th row of J).
        """
        H = self._H_fair.copy()
        npts = self.points.shape[0]
        yw = np.asarray(y[:npts], dtype=np.float64)
        if not np.any(yw):
            return H
        J = self.jacobians(z)
        G = self._gmat
        nvar = self.n
        M = []
        for c in range(3):
            v = J[:, c, :] * yw[:, None]
            S = np.zeros((npts, 3, 3))
            S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
            S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
            S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
            Sb = sp.bsr_matrix((S, np.arange(npts), np.arange(npts + 1)), shape=(3 * npts, 3 * npts))
            M.append(-(G.T @ (Sb @ G)).toarray())
        for a, b, c, sign in ((0, 1, 2, 1), (1, 0, 2, -1), (1, 2, 0, 1), (2, 1, 0, -1), (2, 0, 1, 1), (0, 2, 1, -1)):
            H[a : nvar - 1 : 3, b : nvar - 1 : 3] -= sign * M[c]
        return H


def assemble_maxmin(vol: BSplineVolume, points, lam: float = DEFAULT_LAMBDA, delta: float = DEFAULT_DELTA, **kwargs) -> MaxMinProblem:
    pts = getattr(points, "points", points)
    return MaxMinProblem(vol, pts, lam, delta, **kwargs)


@dataclass
class SolveResult:
    volume: BSplineVolume
    t: float
    kkt: float
    objective: float
    iterations: int
    phase1_iterations: int
    min_det: float


def solve_constrained(problem: MaxMinProblem, init=None, tol: float = 1e-8, max_iter: int = 300) -> SolveResult:
    """Run the interior-point method on ``problem``.

    When the starting point violates ``t >= delta`` a feasibility run first
    maximizes ``t`` with the fairness weight scaled by 1e-3, stopping as soon as
    every constraint holds with ``t >= 1.5 delta``.  If that run converges below
    ``delta``, or stalls without reaching the target, the subproblem is reported
    infeasible so that the caller can refine.
    """
    z0 = problem.pack(problem.vol if init is None else init, 0.0)
    dets = problem.dets(z0)
    t_pts = dets[: problem.n_t]
    z0[-1] = float(t_pts.min())
    phase1_its = 0
    if problem.include_delta and z0[-1] <= problem.delta:
        p1 = problem.relaxed(1e-3)
        target = 1.5 * problem.delta

        def stop(z, c):
            return z[-1] >= target and float(c.min()) >= 0.0

        try:
            r1 = solve_ipm(p1, z0, tol=tol, max_iter=max_iter, stop=stop)
        except InfeasibleError as exc:
            raise InfeasibleError(str(exc), exc.worst_constraints, exc.best_value) from exc
        except ConvergenceError as exc:
            raise InfeasibleError(f"feasibility phase stalled: {exc}", [], float("nan")) from exc
        phase1_its = r1.iterations
        if r1.status != "stopped":
            d = p1.dets(r1.z)
            worst = np.argsort(d[: p1.n_t])[:10]
            raise InfeasibleError(
                f"max-min subproblem infeasible: best t = {r1.z[-1]:.4e} < delta = {problem.delta:.1e}",
                worst_constraints=[(int(k), float(d[k])) for k in worst],
                best_value=float(r1.z[-1]),
            )
        z0 = r1.z
        # start strictly inside: t halfway between delta and the smallest det
        z0[-1] = 0.5 * (problem.delta + float(p1.dets(z0)[: p1.n_t].min()))
    r: IPMResult = solve_ipm(problem, z0, tol=tol, max_iter=max_iter)
    vol = problem.volume(r.z)
    return SolveResult(vol, float(r.z[-1]), r.kkt, r.objective, r.iterations, phase1_its, float(problem.dets(r.z)[: problem.n_t].min()))


# ---------------------------------------------------------------------------
# Local refinement
# ---------------------------------------------------------------------------


def span_midpoints(kv, lo: float, hi: float) -> np.ndarray:
    """Midpoints of the knot spans whose interior meets the open interval (lo, hi)."""
    bp = kv.breakpoints
    a, b = bp[:-1], bp[1:]
    sel = (np.minimum(b, hi) - np.maximum(a, lo)) > 0
    return 0.5 * (a[sel] + b[sel])


@dataclass
class OffsetRefinement:
    volume: BSplineVolume
    free_mask: np.ndarray
    inserted: tuple


def local_offset_refine(vol: BSplineVolume, box, failing_boxes: np.ndarray, sub_index: int, sub_boxes: np.ndarray | None = None) -> OffsetRefinement:
    """Halve every knot span inside subregion ``box`` and return the enlarged free set.

    The refined volume reproduces ``vol`` exactly (knot insertion).  The new free
    set is the first-owner set of subregion ``sub_index`` on the refined volume.
    """
    box = np.asarray(box, dtype=np.float64).reshape(3, 2)
    out = vol
    inserted = []
    for d in range(3):
        mids = span_midpoints(out.knots[d], box[d, 0], box[d, 1])
        inserted.append(mids)
        if mids.size:
            out = out.insert_knots(d, mids)
    boxes = subregion_boxes() if sub_boxes is None else sub_boxes
    owner = assign_owners(out, candidate_mask(out, failing_boxes), boxes)
    return OffsetRefinement(out, owner == sub_index, tuple(inserted))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BijectifyParams:
    lam: float = DEFAULT_LAMBDA
    delta: float = DEFAULT_DELTA
    cert_delta: float = 1e-3
    max_level: int = DEFAULT_MAX_LEVEL
    max_depth: int = 3
    collocation: CollocationParams = CollocationParams()
    solver_tol: float = 1e-7
    solver_max_iter: int = 300
    max_refine_rounds: int = 3
    split: float = 0.5


@dataclass
class LevelTrace:
    level: int
    n_constraints: int
    n_new: int
    n_free: int
    min_det: float
    t_star: float
    certified_fraction: float
    solver_calls: int
    refinements: int
    seconds: float

    def line(self) -> str:
        return (
            f"level={self.level} constraints={self.n_constraints} new={self.n_new} free_vars={self.n_free} "
            f"min_det={self.min_det:.6e} t*={self.t_star:.6e} certified={self.certified_fraction:.4f} "
            f"solves={self.solver_calls} refinements={self.refinements}"
        )


@dataclass
class BijectifyResult:
    volume: BSplineVolume
    report: CertificateReport
    status: str
    trace: list = field(default_factory=list)
    solver_calls: int = 0
    collocation: CollocationSet = field(default_factory=CollocationSet.empty)
    message: str = ""

    @property
    def certified(self) -> bool:
        return self.report.certified

    def trace_text(self) -> str:
        return "".join(t.line() + "\n" for t in self.trace)


def alternative_constraint_count(vol: BSplineVolume) -> int:
    """Bernstein coefficient count of det(J) over all cells: the constraint count of the coefficient model."""
    p, q, r = vol.degrees
    return 27 * p * q * r * vol.n_cells


def _solve_subregion(vol, pts_all, owner_pt, i, free_mask, params, fairness):
    """Solve subregion ``i``; ``None`` when it has nothing to do.

    The subregion's own points (box containment) get ``det >= t``; points of
    other subregions that its free controls touch get ``det >= min(delta, det0)``
    so earlier results are not undone.  Own points that no free control reaches
    make the subproblem infeasible if they sit below ``delta``.
    """
    owned = owner_pt == i
    if not owned.any():
        return None
    idx, _ = local_basis(vol.knots, pts_all, [(0, 0, 0)])
    flat_free = free_mask.transpose(2, 1, 0).reshape(-1)
    touches = flat_free[idx].any(axis=1)
    stuck = owned & ~touches
    if stuck.any():
        d_stuck = np.linalg.det(vol.jacobian(pts_all[stuck]))
        if d_stuck.min() < params.delta:
            k = np.flatnonzero(stuck)[np.argsort(d_stuck)[:10]]
            raise InfeasibleError(
                f"subregion {i + 1}: {int((d_stuck < params.delta).sum())} points below delta are out of reach of its free controls",
                worst_constraints=[(int(j), float(d)) for j, d in zip(k, np.sort(d_stuck)[:10])],
                best_value=float(d_stuck.min()),
            )
    sel = owned & touches
    if not sel.any():
        return None
    guard_sel = touches & ~owned
    guard_pts = pts_all[guard_sel]
    bounds = np.zeros(0)
    if guard_pts.shape[0]:
        d0 = np.linalg.det(vol.jacobian(guard_pts))
        bounds = np.minimum(params.delta, d0)
    prob = MaxMinProblem(
        vol, pts_all[sel], params.lam, params.delta, free_mask=free_mask, guard_points=guard_pts, guard_bounds=bounds, fairness=fairness
    )
    t0 = time.perf_counter()
    res = solve_constrained(prob, tol=params.solver_tol, max_iter=params.solver_max_iter)
    log.info(
        "subregion %d: %d vars, %d points, %d guards, t*=%.4e, its=%d+%d, %.2fs",
        i + 1, prob.n, prob.n_t, prob.n_guard, res.t, res.phase1_iterations, res.iterations, time.perf_counter() - t0,
    )
    return res


def point_owners(pts: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Index of the first box (closed) containing each point."""
    pts = np.asarray(pts).reshape(-1, 3)
    inside = np.all((pts[:, None, :] >= boxes[None, :, :, 0]) & (pts[:, None, :] <= boxes[None, :, :, 1]), axis=-1)
    return np.argmax(inside, axis=1)


def bijectify(vol: BSplineVolume, params: BijectifyParams = BijectifyParams(), trace_file=None) -> BijectifyResult:
    """Coarse-to-fine max-min optimization until the certificate passes or the level budget runs out."""
    report = certify_volume(vol, params.cert_delta, params.max_depth)
    if report.certified:
        return BijectifyResult(vol, report, "certified", [], 0, CollocationSet.empty(), "input already certified")
    P = CollocationSet.empty()
    trace = []
    calls = 0
    current = vol
    status, message = "indeterminate", ""
    for level in range(params.max_level + 1):
        t0 = time.perf_counter()
        field = jacobian_bezier(current)
        P = P.relabel(field) if len(P) else P
        new, P = generate_collocation(report, field, level, params.collocation, P)
        failing = report.failing_boxes()
        plan = plan_subregions(current, report, params.split)
        fairness = assemble_energy_matrix(current.knots, "hessian")
        t_star = math.inf
        n_free = 0
        refinements = 0
        failed = None
        i = 0
        owner_ctrl = plan.owner
        while i < len(plan):
            pts = P.points
            owner_pt = point_owners(pts, plan.boxes)
            free_mask = owner_ctrl == i
            rounds = 0
            while True:
                try:
                    res = _solve_subregion(current, pts, owner_pt, i, free_mask, params, fairness)
                    break
                except InfeasibleError as exc:
                    calls += 1
                    if rounds >= params.max_refine_rounds:
                        failed = RefinementLimitError(
                            f"subregion {i + 1} infeasible after {rounds} refinement rounds: {exc} "
                            f"(worst constraints {exc.worst_constraints[:3]})"
                        )
                        break
                    ref = local_offset_refine(current, plan.boxes[i], failing, i, plan.boxes)
                    rounds += 1
                    refinements += 1
                    log.info("subregion %d infeasible; refined (%s new knots)", i + 1, [len(k) for k in ref.inserted])
                    current = ref.volume
                    fairness = assemble_energy_matrix(current.knots, "hessian")
                    owner_ctrl = assign_owners(current, candidate_mask(current, failing), plan.boxes)
                    free_mask = owner_ctrl == i
            if failed is not None:
                break
            if res is not None:
                calls += 1
                n_free += 3 * int(free_mask.sum())
                t_star = min(t_star, res.t)
                current = res.volume
            i += 1
        report = certify_volume(current, params.cert_delta, params.max_depth)
        min_det = float(np.linalg.det(current.jacobian(P.points)).min()) if len(P) else math.nan
        trace.append(
            LevelTrace(level, len(P), len(new), n_free, min_det, t_star, report.certified_fraction, calls, refinements, time.perf_counter() - t0)
        )
        log.info(trace[-1].line())
        if trace_file is not None:
            trace_file.write(trace[-1].line() + "\n")
        if failed is not None:
            status, message = "failed", str(failed)
            break
        if report.certified:
            status, message = "certified", f"certified at level {level}"
            break
    else:
        message = f"not certified after level {params.max_level}"
    return BijectifyResult(current, report, status, trace, calls, P, message)


__all__ = [
    "CollocationParams",
    "CollocationSet",
    "generate_collocation",
    "collocation_counts",
    "support_boxes",
    "candidate_mask",
    "subregion_boxes",
    "SubregionPlan",
    "plan_subregions",
    "assign_owners",
    "point_owners",
    "MaxMinProblem",
    "assemble_maxmin",
    "SolveResult",
    "solve_constrained",
    "span_midpoints",
    "local_offset_refine",
    "OffsetRefinement",
    "BijectifyParams",
    "BijectifyResult",
    "LevelTrace",
    "bijectify",
    "alternative_constraint_count",
    "quadrature_energy",
]
