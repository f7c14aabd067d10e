"""Stage 1: harmonic initialization with fixed boundary controls.

Minimizes the integral of |Laplacian G|^2 over the unit cube with all boundary
control points prescribed by the six input faces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from .bspline import FACE_LABELS, BSplineSurface, BSplineVolume, KnotVector, greville_grid
from .errors import CompatibilityError, ConvergenceError, NotSPDError
from .quadrature import HESS_ORDERS, cell_rule, local_basis

log = logging.getLogger(__name__)

DEFAULT_PCG_TOL = 1e-10


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------


def _face_axes(label):
    axis = FACE_LABELS.index(label) // 2
    return axis, [d for d in range(3) if d != axis]


def fix_boundary(knots, faces, tol: float = 1e-6):
    """Assign every boundary control point from the six faces.

    Parameters
    ----------
    knots : tuple of three KnotVector
        Volume skeleton.
    faces : mapping or sequence of BSplineSurface
        Exactly the six face labels.
    tol : float
        Allowed disagreement on shared edges, relative to the bounding-box diagonal.

    Returns
    -------
    ctrl : ndarray
        ``(nu, nv, nw, 3)`` grid with boundary entries filled and interior zero.
    free : ndarray of bool
        Mask of interior (free) control points.
    """
    if not isinstance(faces, dict):
        faces = {f.label: f for f in faces}
    missing = [lab for lab in FACE_LABELS if lab not in faces]
    if missing:
        raise CompatibilityError(f"missing faces: {', '.join(missing)}")
    shape = tuple(kv.n_basis for kv in knots)
    for lab in FACE_LABELS:
        face = faces[lab]
        _, others = _face_axes(lab)
        for local, d in enumerate(others):
            if face.knots[local] != knots[d]:
                raise CompatibilityError(
                    f"face {lab}: degree/knots along local axis {local} do not match the volume's "
                    f"{('xi', 'eta', 'zeta')[d]} direction"
                )

    allpts = np.concatenate([np.asarray(faces[lab].ctrl).reshape(-1, 3) for lab in FACE_LABELS])
    scale = float(np.linalg.norm(allpts.max(axis=0) - allpts.min(axis=0))) or 1.0
    ctrl = np.zeros(shape + (3,))
    owner = np.full(shape, -1, dtype=np.int64)
    worst = (0.0, None)
    for n, lab in enumerate(FACE_LABELS):
        axis, _ = _face_axes(lab)
        idx = 0 if lab.endswith("0") else shape[axis] - 1
        sl = [slice(None)] * 3
        sl[axis] = idx
        sl = tuple(sl)
        data = np.asarray(faces[lab].ctrl)
        seen = owner[sl] >= 0
        if np.any(seen):
            dev = np.linalg.norm(ctrl[sl][seen] - data[seen], axis=-1)
            j = int(np.argmax(dev))
            if dev[j] > worst[0]:
                other = FACE_LABELS[int(owner[sl][seen][j])]
                worst = (float(dev[j]), (other, lab))
        view = ctrl[sl]
        view[~seen] = data[~seen]
        ctrl[sl] = view
        osl = owner[sl]
        osl[~seen] = n
        owner[sl] = osl
    if worst[0] > tol * scale:
        a, b = worst[1]
        raise CompatibilityError(f"faces {a} and {b} disagree on a shared edge by {worst[0]:.3e} (tolerance {tol * scale:.3e})")
    free = owner < 0
    return ctrl, free


def coons_fill(ctrl: np.ndarray, knots) -> np.ndarray:
    """Trilinear-blend (Coons) interior from the boundary layer, evaluated at Greville parameters."""
    C = np.asarray(ctrl, dtype=np.float64)
    gu, gv, gw = (kv.greville for kv in knots)
    u = gu[:, None, None, None]
    v = gv[None, :, None, None]
    w = gw[None, None, :, None]
    fu = (1 - u) * C[:1] + u * C[-1:]
    fv = (1 - v) * C[:, :1] + v * C[:, -1:]
    fw = (1 - w) * C[:, :, :1] + w * C[:, :, -1:]
    fuv = (1 - u) * (1 - v) * C[:1, :1] + u * (1 - v) * C[-1:, :1] + (1 - u) * v * C[:1, -1:] + u * v * C[-1:, -1:]
    fvw = (1 - v) * (1 - w) * C[:, :1, :1] + v * (1 - w) * C[:, -1:, :1] + (1 - v) * w * C[:, :1, -1:] + v * w * C[:, -1:, -1:]
    fuw = (1 - u) * (1 - w) * C[:1, :, :1] + u * (1 - w) * C[-1:, :, :1] + (1 - u) * w * C[:1, :, -1:] + u * w * C[-1:, :, -1:]
    fuvw = 0.0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                wt = (u if a else 1 - u) * (v if b else 1 - v) * (w if c else 1 - w)
                fuvw = fuvw + wt * C[-a, -b, -c]
    out = fu + fv + fw - fuv - fvw - fuw + fuvw
    res = np.array(C)
    mask = np.zeros(C.shape[:3], dtype=bool)
    mask[1:-1, 1:-1, 1:-1] = True
    res[mask] = out[mask]
    return res


# ---------------------------------------------------------------------------
# Quadratic forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """Scalar energy matrix over all controls plus a free/fixed split.

    The energy of control coordinates ``X`` (``n_ctrl x 3``) is ``sum_c X[:, c]^T A X[:, c]``.
    """

    matrix: sp.csr_matrix
    free: np.ndarray
    fixed: np.ndarray

    @property
    def A_ff(self) -> sp.csr_matrix:
        return self.matrix[self.free][:, self.free].tocsr()

    @property
    def A_fc(self) -> sp.csr_matrix:
        return self.matrix[self.free][:, self.fixed].tocsr()

    def rhs(self, fixed_values: np.ndarray) -> np.ndarray:
        """Right-hand sides ``-A_fc x_c``, one column per coordinate."""
        return -(self.A_fc @ fixed_values)

    def energy(self, flat_ctrl: np.ndarray) -> float:
        X = np.asarray(flat_ctrl)
        return float(np.einsum("ic,ic->", X, self.matrix @ X))


def assemble_energy_matrix(knots, operator: str = "laplace", order=None) -> sp.csr_matrix:
    """Sparse ``n_ctrl x n_ctrl`` matrix of a second-order energy.

    ``operator="laplace"`` gives ``int (Lap N_a)(Lap N_b)``; ``"hessian"`` gives
    ``int sum_{ij} d_ij N_a d_ij N_b`` (the thin-plate / fairness form).
    """
    degs = [kv.degree for kv in knots]
    if min(degs) < 2:
        raise ValueError("second-order energies need degree >= 2 in every direction")
    if order is None:
        order = tuple(d + 1 for d in degs)
    elif np.isscalar(order):
        order = (int(order),) * 3
    for o, d in zip(order, degs):
        if o < d:
            raise ValueError("quadrature order must be at least the degree")
    rule = cell_rule(knots, order)
    idx, vals = local_basis(knots, rule.points, HESS_ORDERS)
    n_cells = rule.owner[-1] + 1
    nq = rule.size // n_cells
    nb = idx.shape[1]
    w = rule.weights.reshape(n_cells, nq)
    if operator == "laplace":
        L = (vals[0] + vals[1] + vals[2]).reshape(n_cells, nq, nb)
        local = np.einsum("cqa,cq,cqb->cab", L, w, L, optimize=True)
    elif operator == "hessian":
        local = np.zeros((n_cells, nb, nb))
        for m, factor in enumerate((1.0, 1.0, 1.0, 2.0, 2.0, 2.0)):
            D = vals[m].reshape(n_cells, nq, nb)
            local += factor * np.einsum("cqa,cq,cqb->cab", D, w, D, optimize=True)
    else:
        raise ValueError(f"unknown operator {operator!r}")
    cidx = idx.reshape(n_cells, nq, nb)[:, 0, :]
    rows = np.repeat(cidx, nb, axis=1).reshape(-1)
    cols = np.tile(cidx, (1, nb)).reshape(-1)
    n = int(np.prod([kv.n_basis for kv in knots]))
    A = sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    # exact symmetry: average with the transpose (entries already agree to round-off)
    A = ((A + A.T) * 0.5).tocsr()
    A.sort_indices()
    return A


def assemble_laplace_energy(knots, order=None, free_mask=None) -> QuadraticForm:
    A = assemble_energy_matrix(knots, "laplace", order)
    if free_mask is None:
        shape = tuple(kv.n_basis for kv in knots)
        free_mask = np.zeros(shape, dtype=bool)
        free_mask[1:-1, 1:-1, 1:-1] = True
    flat = np.asarray(free_mask).transpose(2, 1, 0).reshape(-1)
    return QuadraticForm(A, np.flatnonzero(flat), np.flatnonzero(~flat))


# ---------------------------------------------------------------------------
# Preconditioned conjugate gradients
# ---------------------------------------------------------------------------


class _IC0:
    def __init__(self, A: sp.csr_matrix):
        L = sp.tril(A, format="csr")
        L.sort_indices()
        self.n = A.shape[0]
        self.indptr = L.indptr.astype(np.int64)
        self.indices = L.indices.astype(np.int64)
        self.data = L.data.astype(np.float64).copy()
        last = self.indices[self.indptr[1:] - 1]
        if np.any(last != np.arange(self.n)):
            raise NotSPDError("missing diagonal entry")
        status = K.ic0(self.n, self.indptr, self.indices, self.data)
        if status:
            raise NotSPDError(f"incomplete Cholesky pivot {status - 1} is not positive")

    def __call__(self, r):
        y = K.lower_solve(self.n, self.indptr, self.indices, self.data, r)
        return K.upper_t_solve(self.n, self.indptr, self.indices, self.data, y)


@dataclass
class PCGInfo:
    iterations: int
    residual: float
    preconditioner: str


def pcg_solve(A, b, x0=None, tol: float = DEFAULT_PCG_TOL, max_iter: int | None = None, precond: str = "ic0"):
    """Solve ``A x = b`` for SPD ``A`` by preconditioned conjugate gradients.

    ``b`` may hold several right-hand sides as columns; they are solved one by one.
    Returns ``(x, info)`` where ``info`` is a list of :class:`PCGInfo` (one per column)
    for 2-D ``b`` and a single :class:`PCGInfo` otherwise.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 2:
        xs, infos = [], []
        for c in range(b.shape[1]):
            x, info = pcg_solve(A, b[:, c], None if x0 is None else np.asarray(x0)[:, c], tol, max_iter, precond)
            xs.append(x)
            infos.append(info)
        return np.stack(xs, axis=1), infos
    n = b.size
    if max_iter is None:
        max_iter = max(10 * n, 100)
    if tol <= 0:
        raise ValueError("tol must be positive")

    name = precond
    if precond == "ic0":
        try:
            M = _IC0(A)
        except NotSPDError as exc:
            log.warning("IC(0) failed (%s); falling back to Jacobi", exc)
            name = "jacobi"
    if name == "jacobi":
        d = A.diagonal()
        if np.any(d <= 0):
            raise NotSPDError("non-positive diagonal entry")
        inv_d = 1.0 / d
        M = lambda r: inv_d * r  # noqa: E731
    elif name == "none":
        M = lambda r: r  # noqa: E731

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), PCGInfo(0, 0.0, name)
    r = b - A @ x
    z = M(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(max_iter + 1):
        res = float(np.linalg.norm(r)) / bnorm
        if res <= tol:
            return x, PCGInfo(it, res, name)
        if it == max_iter:
            break
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise NotSPDError(f"CG breakdown: p^T A p = {pAp:.3e} at iteration {it}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = M(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"PCG did not reach tol {tol:.1e} in {max_iter} iterations (residual {res:.3e})", residual=res)


# ---------------------------------------------------------------------------
# Harmonic map
# ---------------------------------------------------------------------------


@dataclass
class HarmonicResult:
    volume: BSplineVolume
    energy: float
    initial_energy: float
    iterations: list


def _elevate_to_quadratic(knots, faces):
    knots = list(knots)
    faces = dict(faces)
    for d in range(3):
        while knots[d].degree < 2:
            knots[d] = knots[d].elevated()
            for lab in FACE_LABELS:
                axis, others = _face_axes(lab)
                if axis != d:
                    faces[lab] = faces[lab].elevate(others.index(d))
    return tuple(knots), faces


def harmonic_map(faces, knots, tol: float = DEFAULT_PCG_TOL, edge_tol: float = 1e-6, order=None) -> HarmonicResult:
    """Interior controls minimizing the Laplacian energy for the given boundary.

    Directions with degree below 2 are degree-elevated (skeleton and faces) first.
    """
    if not isinstance(faces, dict):
        faces = {f.label: f for f in faces}
    knots, faces = _elevate_to_quadratic(tuple(knots), faces)
    ctrl, free_mask = fix_boundary(knots, faces, edge_tol)
    init = coons_fill(ctrl, knots)
    form = assemble_laplace_energy(knots, order, free_mask)
    flat0 = BSplineVolume(knots, init).flat_ctrl()
    fixed_vals = flat0[form.fixed]
    b = form.rhs(fixed_vals)
    x0 = flat0[form.free]
    if form.free.size:
        x, infos = pcg_solve(form.A_ff, b, x0=x0, tol=tol)
    else:
        x, infos = x0, []
    flat = flat0.copy()
    flat[form.free] = x
    vol = BSplineVolume.from_flat(knots, flat)
    return HarmonicResult(
        vol, quadrature_energy(knots, flat, "laplace", order), quadrature_energy(knots, flat0, "laplace", order), infos
    )


def coons_volume(faces, knots, edge_tol: float = 1e-6) -> BSplineVolume:
    if not isinstance(faces, dict):
        faces = {f.label: f for f in faces}
    ctrl, _ = fix_boundary(knots, faces, edge_tol)
    return BSplineVolume(knots, coons_fill(ctrl, knots))


def quadrature_energy(knots, flat_ctrl: np.ndarray, operator: str = "laplace", order=None) -> float:
    """Energy from pointwise second derivatives at Gauss nodes.

    Equal to ``X^T A X`` in exact arithmetic but free of the cancellation that the
    quadratic form suffers for (near-)harmonic controls.
    """
    if order is None:
        order = tuple(kv.degree + 1 for kv in knots)
    rule = cell_rule(knots, order)
    idx, vals = local_basis(knots, rule.points, HESS_ORDERS)
    X = np.asarray(flat_ctrl)[idx]  # (N, nb, 3)
    D = np.einsum("mna,nac->mnc", vals, X)
    if operator == "laplace":
        dens = np.sum((D[0] + D[1] + D[2]) ** 2, axis=1)
    elif operator == "hessian":
        dens = np.sum(D[:3] ** 2, axis=(0, 2)) + 2.0 * np.sum(D[3:] ** 2, axis=(0, 2))
    else:
        raise ValueError(f"unknown operator {operator!r}")
    return float(rule.weights @ dens)


def laplace_energy(vol: BSplineVolume, order=None) -> float:
    return quadrature_energy(vol.knots, vol.flat_ctrl(), "laplace", order)


__all__ = [
    "QuadraticForm",
    "HarmonicResult",
    "PCGInfo",
    "fix_boundary",
    "coons_fill",
    "coons_volume",
    "assemble_energy_matrix",
    "assemble_laplace_energy",
    "pcg_solve",
    "harmonic_map",
    "laplace_energy",
    "quadrature_energy",
    "greville_grid",
    "BSplineSurface",
    "KnotVector",
]
