"""Open knot vectors, trivariate B-spline volumes and their boundary surfaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as K
from .errors import CompatibilityError, DomainError, KnotVectorError

FACE_LABELS = ("xi0", "xi1", "eta0", "eta1", "zeta0", "zeta1")
AXIS_NAMES = ("xi", "eta", "zeta")
_DOMAIN_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Clamped knot vector on ``[0, 1]``.

    Parameters
    ----------
    degree : int
        Polynomial degree ``p``.
    knots : array_like
        Nondecreasing knots; the first and last ``p + 1`` entries must be 0 and 1.
    name : str, optional
        Direction name used in error messages.
    """

    degree: int
    knots: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        knots = np.array(self.knots, dtype=np.float64).reshape(-1)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", int(self.degree))
        self._validate()

    def _validate(self):
        p, U = self.degree, self.knots
        where = f" in direction {self.name}" if self.name else ""
        if p < 0:
            raise KnotVectorError(f"negative degree{where}")
        if not np.all(np.isfinite(U)):
            raise KnotVectorError(f"non-finite knot{where}")
        if np.any(np.diff(U) < 0):
            raise KnotVectorError(f"non-monotone knot vector{where}")
        if U.size < 2 * p + 2:
            raise KnotVectorError(f"knot vector too short for degree {p}{where}")
        if np.any(U[: p + 1] != 0.0) or np.any(U[-p - 1 :] != 1.0):
            raise KnotVectorError(f"knot vector is not open on [0, 1]{where}")
        interior = U[p + 1 : U.size - p - 1]
        if interior.size:
            if interior[0] <= 0.0 or interior[-1] >= 1.0:
                raise KnotVectorError(f"interior knot at an end point{where}")
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > p:
                raise KnotVectorError(f"interior knot multiplicity exceeds degree{where}")

    def __eq__(self, other):
        if not isinstance(other, KnotVector):
            return NotImplemented
        return self.degree == other.degree and np.array_equal(self.knots, other.knots)

    __hash__ = None

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @cached_property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, i.e. the cell boundaries along this axis."""
        return np.unique(self.knots)

    @property
    def n_spans(self) -> int:
        return self.breakpoints.size - 1

    @cached_property
    def greville(self) -> np.ndarray:
        p, U = self.degree, self.knots
        if p == 0:
            return 0.5 * (U[:-1] + U[1:])
        return np.array([U[i + 1 : i + p + 1].mean() for i in range(self.n_basis)])

    def find_span(self, u) -> np.ndarray:
        """Knot span index ``s`` with ``U[s] <= u < U[s+1]`` (last span for ``u == 1``)."""
        u = np.asarray(u, dtype=np.float64)
        s = np.searchsorted(self.knots, u, side="right") - 1
        return np.clip(s, self.degree, self.n_basis - 1)

    def cell_index(self, u) -> np.ndarray:
        """Index of the nonempty span (cell) containing ``u``."""
        u = np.asarray(u, dtype=np.float64)
        c = np.searchsorted(self.breakpoints, u, side="right") - 1
        return np.clip(c, 0, self.n_spans - 1)

    def support(self, i: int) -> tuple[float, float]:
        return float(self.knots[i]), float(self.knots[i + self.degree + 1])

    def with_knots_inserted(self, values) -> "KnotVector":
        new = np.sort(np.concatenate([self.knots, np.asarray(values, dtype=np.float64)]))
        return KnotVector(self.degree, new, self.name)

    def elevated(self) -> "KnotVector":
        """Knot vector of the degree-elevated space (every distinct knot gains one copy)."""
        return KnotVector(self.degree + 1, np.sort(np.concatenate([self.knots, self.breakpoints])), self.name)

    def basis_ders(self, u, nder: int = 0):
        """Spans and nonzero basis derivatives at the points ``u``.

        Returns ``(spans, ders)`` with ``ders`` of shape ``(n, nder + 1, p + 1)``.
        """
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        spans = self.find_span(u)
        return spans, K.basis_ders(self.knots, self.degree, spans, u, nder)

    def basis_matrix(self, u, nder: int = 0) -> np.ndarray:
        """Dense ``(len(u), n_basis)`` matrix of the ``nder``-th derivatives."""
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        spans, ders = self.basis_ders(u, nder)
        out = np.zeros((u.size, self.n_basis))
        cols = spans[:, None] - self.degree + np.arange(self.degree + 1)
        np.put_along_axis(out, cols, ders[:, nder, :], axis=1)
        return out


def uniform_knots(degree: int, n_basis: int, name: str = "") -> KnotVector:
    """Open uniform knot vector with ``n_basis`` functions."""
    n_inner = n_basis - degree - 1
    if n_inner < 0:
        raise KnotVectorError("need at least degree + 1 basis functions")
    inner = np.linspace(0.0, 1.0, n_inner + 2)[1:-1]
    return KnotVector(degree, np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)]), name)


def eval_basis(kv: KnotVector, u: float):
    """Span index and the ``p + 1`` nonzero basis values at a single parameter."""
    u = float(u)
    if not (-_DOMAIN_EPS <= u <= 1.0 + _DOMAIN_EPS) or not np.isfinite(u):
        raise DomainError(f"parameter {u!r} outside [0, 1]")
    u = min(max(u, 0.0), 1.0)
    spans, ders = kv.basis_ders(u, 0)
    return int(spans[0]), ders[0, 0].copy()


def _check_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 3:
        raise DomainError("points must have 3 coordinates")
    if not np.all(np.isfinite(x)) or np.any(x < -_DOMAIN_EPS) or np.any(x > 1.0 + _DOMAIN_EPS):
        raise DomainError("point outside the parametric cube [0, 1]^3")
    return np.clip(x, 0.0, 1.0), single


@dataclass(frozen=True, eq=False)
class BSplineVolume:
    """Trivariate tensor-product B-spline map from ``[0,1]^3`` to R^3.

    ``ctrl[i, j, k]`` is the control point attached to ``N_i(xi) N_j(eta) N_k(zeta)``.
    Flattened storage (files, solver variables) runs with ``i`` fastest.
    """

    knots: tuple[KnotVector, KnotVector, KnotVector]
    ctrl: np.ndarray

    def __post_init__(self):
        kvs = tuple(self.knots)
        if len(kvs) != 3:
            raise KnotVectorError("a volume needs three knot vectors")
        object.__setattr__(self, "knots", kvs)
        ctrl = np.array(self.ctrl, dtype=np.float64)
        shape = tuple(kv.n_basis for kv in kvs)
        if ctrl.shape != shape + (3,):
            raise CompatibilityError(f"control grid shape {ctrl.shape} does not match basis counts {shape}")
        if not np.all(np.isfinite(ctrl)):
            raise DomainError("non-finite control point")
        ctrl.setflags(write=False)
        object.__setattr__(self, "ctrl", ctrl)

    @property
    def degrees(self) -> tuple[int, int, int]:
        return tuple(kv.degree for kv in self.knots)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ctrl.shape[:3]

    @property
    def n_ctrl(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_counts(self) -> tuple[int, int, int]:
        return tuple(kv.n_spans for kv in self.knots)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cell_counts))

    def with_ctrl(self, ctrl) -> "BSplineVolume":
        return BSplineVolume(self.knots, ctrl)

    def flat_ctrl(self) -> np.ndarray:
        """Control points as ``(n_ctrl, 3)`` with the xi index fastest."""
        return self.ctrl.transpose(2, 1, 0, 3).reshape(-1, 3)

    @staticmethod
    def from_flat(knots, flat) -> "BSplineVolume":
        shape = tuple(kv.n_basis for kv in knots)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (int(np.prod(shape)), 3):
            raise CompatibilityError("flat control array has the wrong length")
        return BSplineVolume(knots, flat.reshape(shape[::-1] + (3,)).transpose(2, 1, 0, 3))

    def bbox_diagonal(self) -> float:
        pts = self.ctrl.reshape(-1, 3)
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def cell_boxes(self) -> np.ndarray:
        """``(n_cells, 3, 2)`` parametric boxes, cell id with xi fastest."""
        bu, bv, bw = (kv.breakpoints for kv in self.knots)
        cu, cv, cw = self.cell_counts
        eu, ev, ew = np.meshgrid(np.arange(cu), np.arange(cv), np.arange(cw), indexing="ij")
        eu, ev, ew = (a.transpose(2, 1, 0).reshape(-1) for a in (eu, ev, ew))
        return np.stack(
            [np.stack([bu[eu], bu[eu + 1]], -1), np.stack([bv[ev], bv[ev + 1]], -1), np.stack([bw[ew], bw[ew + 1]], -1)],
            axis=1,
        )

    def cell_id(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        cu, cv, _ = self.cell_counts
        eu, ev, ew = (kv.cell_index(x[:, d]) for d, kv in enumerate(self.knots))
        return eu + cu * (ev + cv * ew)

    # -- evaluation -----------------------------------------------------

    def _derivatives(self, x, nder: int):
        """Per-axis spans and basis derivative tables at the points ``x``."""
        out = []
        for d, kv in enumerate(self.knots):
            spans, ders = kv.basis_ders(x[:, d], nder)
            out.append((spans - kv.degree, ders))
        return out

    def _contract(self, tabs, orders) -> np.ndarray:
        (su, du), (sv, dv), (sw, dw) = tabs
        a, b, c = orders
        return K.tensor_contract(self.ctrl, su, sv, sw, du[:, a], dv[:, b], dw[:, c])

    def evaluate(self, x) -> np.ndarray:
        x, single = _check_points(x)
        out = self._contract(self._derivatives(x, 0), (0, 0, 0))
        return out[0] if single else out

    def jacobian(self, x) -> np.ndarray:
        """Jacobian matrices ``J[n, coord, direction]``."""
        x, single = _check_points(x)
        tabs = self._derivatives(x, 1)
        cols = [self._contract(tabs, o) for o in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
        J = np.stack(cols, axis=-1)
        return J[0] if single else J

    def hessians(self, x) -> np.ndarray:
        """Second derivatives ``H[n, coord, a, b]`` (symmetric in ``a, b``)."""
        x, single = _check_points(x)
        tabs = self._derivatives(x, 2)
        H = np.empty((x.shape[0], 3, 3, 3))
        for a in range(3):
            for b in range(a, 3):
                order = [0, 0, 0]
                order[a] += 1
                order[b] += 1
                val = self._contract(tabs, order)
                H[:, :, a, b] = val
                H[:, :, b, a] = val
        return H[0] if single else H

    def evaluate_lattice(self, params, orders=(0, 0, 0)) -> np.ndarray:
        """Evaluate a partial derivative on the tensor lattice ``params[0] x params[1] x params[2]``.

        Uses dense basis matrices and sequential contraction; independent of the
        point-wise and Bezier paths.  Returns ``(n0, n1, n2, 3)``.
        """
        mats = [kv.basis_matrix(np.asarray(t, dtype=np.float64), o) for kv, t, o in zip(self.knots, params, orders)]
        out = np.tensordot(mats[0], self.ctrl, axes=(1, 0))
        out = np.tensordot(mats[1], out, axes=(1, 1)).transpose(1, 0, 2, 3)
        out = np.tensordot(mats[2], out, axes=(1, 2)).transpose(1, 2, 0, 3)
        return out

    def jacobian_lattice(self, params) -> np.ndarray:
        """``(n0, n1, n2, 3, 3)`` Jacobians on a tensor lattice."""
        cols = [self.evaluate_lattice(params, o) for o in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
        return np.stack(cols, axis=-1)

    # -- refinement -----------------------------------------------------

    def insert_knots(self, axis: int, values) -> "BSplineVolume":
        """Exact knot insertion along one axis (geometry unchanged)."""
        kv = self.knots[axis]
        new_kv, ctrl = insert_knots_along(kv, np.moveaxis(np.asarray(self.ctrl), axis, 0), values)
        knots = list(self.knots)
        knots[axis] = new_kv
        return BSplineVolume(tuple(knots), np.moveaxis(ctrl, 0, axis))

    def elevate(self, axis: int) -> "BSplineVolume":
        kv = self.knots[axis]
        new_kv, ctrl = elevate_along(kv, np.moveaxis(np.asarray(self.ctrl), axis, 0))
        knots = list(self.knots)
        knots[axis] = new_kv
        return BSplineVolume(tuple(knots), np.moveaxis(ctrl, 0, axis))

    # -- boundary -------------------------------------------------------

    def face(self, label: str) -> "BSplineSurface":
        axis, side = _face_axis(label)
        idx = 0 if side == 0 else -1
        ctrl = np.take(self.ctrl, idx, axis=axis)
        others = [d for d in range(3) if d != axis]
        return BSplineSurface(label, (self.knots[others[0]], self.knots[others[1]]), ctrl)

    def faces(self) -> dict[str, "BSplineSurface"]:
        return {lab: self.face(lab) for lab in FACE_LABELS}

    def boundary_mask(self) -> np.ndarray:
        """Boolean ``shape`` array, True for controls with an extremal index."""
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :, :] = mask[-1, :, :] = True
        mask[:, 0, :] = mask[:, -1, :] = True
        mask[:, :, 0] = mask[:, :, -1] = True
        return mask


def _face_axis(label: str) -> tuple[int, int]:
    if label not in FACE_LABELS:
        raise CompatibilityError(f"unknown face label {label!r}")
    i = FACE_LABELS.index(label)
    return i // 2, i % 2


@dataclass(frozen=True, eq=False)
class BSplineSurface:
    """Tensor-product boundary surface ``ctrl[a, b]`` over the two in-face axes (in xi, eta, zeta order)."""

    label: str
    knots: tuple[KnotVector, KnotVector]
    ctrl: np.ndarray

    def __post_init__(self):
        _face_axis(self.label)
        kvs = tuple(self.knots)
        object.__setattr__(self, "knots", kvs)
        ctrl = np.array(self.ctrl, dtype=np.float64)
        shape = tuple(kv.n_basis for kv in kvs)
        if ctrl.shape != shape + (3,):
            raise CompatibilityError(f"face {self.label}: control grid {ctrl.shape[:2]} does not match basis counts {shape}")
        if not np.all(np.isfinite(ctrl)):
            raise DomainError(f"face {self.label}: non-finite control point")
        ctrl.setflags(write=False)
        object.__setattr__(self, "ctrl", ctrl)

    @property
    def axis(self) -> int:
        return _face_axis(self.label)[0]

    @property
    def side(self) -> int:
        return _face_axis(self.label)[1]

    def evaluate(self, s, t) -> np.ndarray:
        A = self.knots[0].basis_matrix(np.atleast_1d(s))
        B = self.knots[1].basis_matrix(np.atleast_1d(t))
        return np.einsum("na,nb,abd->nd", A, B, self.ctrl)

    def elevate(self, local_axis: int) -> "BSplineSurface":
        kv = self.knots[local_axis]
        new_kv, ctrl = elevate_along(kv, np.moveaxis(np.asarray(self.ctrl), local_axis, 0))
        knots = list(self.knots)
        knots[local_axis] = new_kv
        return BSplineSurface(self.label, tuple(knots), np.moveaxis(ctrl, 0, local_axis))

    def insert_knots(self, local_axis: int, values) -> "BSplineSurface":
        kv = self.knots[local_axis]
        new_kv, ctrl = insert_knots_along(kv, np.moveaxis(np.asarray(self.ctrl), local_axis, 0), values)
        knots = list(self.knots)
        knots[local_axis] = new_kv
        return BSplineSurface(self.label, tuple(knots), np.moveaxis(ctrl, 0, local_axis))


# ---------------------------------------------------------------------------
# 1-D refinement operators acting on axis 0 of a control array
# ---------------------------------------------------------------------------


def insert_knots_along(kv: KnotVector, ctrl: np.ndarray, values):
    """Boehm insertion of each value in ``values`` (in order) along axis 0 of ``ctrl``."""
    p = kv.degree
    U = np.array(kv.knots)
    P = np.array(ctrl, dtype=np.float64)
    for u in np.atleast_1d(np.asarray(values, dtype=np.float64)):
        if not 0.0 < u < 1.0:
            raise DomainError(f"cannot insert knot {u} outside (0, 1)")
        k = int(np.searchsorted(U, u, side="right") - 1)
        s = int(np.count_nonzero(U == u))
        if s >= p:
            raise KnotVectorError(f"knot {u} already has multiplicity {s} >= degree {p}")
        n = P.shape[0]
        Q = np.empty((n + 1,) + P.shape[1:])
        Q[: k - p + 1] = P[: k - p + 1]
        Q[k - s + 1 :] = P[k - s :]
        for i in range(k - p + 1, k - s + 1):
            alpha = (u - U[i]) / (U[i + p] - U[i])
            Q[i] = alpha * P[i] + (1.0 - alpha) * P[i - 1]
        P = Q
        U = np.insert(U, k + 1, u)
    return KnotVector(p, U, kv.name), P


def elevate_along(kv: KnotVector, ctrl: np.ndarray):
    """Raise the degree by one along axis 0, keeping the function unchanged.

    The elevated space contains the original one, so interpolating at the new
    Greville abscissae reproduces the spline exactly (up to round-off).
    """
    new_kv = kv.elevated()
    tau = new_kv.greville
    A_new = new_kv.basis_matrix(tau)
    A_old = kv.basis_matrix(tau)
    flat = np.asarray(ctrl, dtype=np.float64).reshape(ctrl.shape[0], -1)
    vals = A_old @ flat
    new = np.linalg.solve(A_new, vals)
    return new_kv, new.reshape((new_kv.n_basis,) + ctrl.shape[1:])


# ---------------------------------------------------------------------------
# Convenience constructors
# ---------------------------------------------------------------------------


def greville_grid(knots) -> np.ndarray:
    """``(nu, nv, nw, 3)`` grid of Greville abscissae (the identity map's controls)."""
    gu, gv, gw = (kv.greville for kv in knots)
    G = np.meshgrid(gu, gv, gw, indexing="ij")
    return np.stack(G, axis=-1)


def identity_volume(degrees=(3, 3, 3), n_ctrl=(4, 4, 4)) -> BSplineVolume:
    knots = tuple(uniform_knots(p, n, AXIS_NAMES[d]) for d, (p, n) in enumerate(zip(degrees, n_ctrl)))
    return BSplineVolume(knots, greville_grid(knots))


def affine_volume(A, b=(0.0, 0.0, 0.0), degrees=(3, 3, 3), n_ctrl=(4, 4, 4)) -> BSplineVolume:
    vol = identity_volume(degrees, n_ctrl)
    A = np.asarray(A, dtype=np.float64)
    return vol.with_ctrl(vol.ctrl @ A.T + np.asarray(b, dtype=np.float64))


# module-level wrappers mirroring the operation names


def eval_volume(vol: BSplineVolume, x) -> np.ndarray:
    return vol.evaluate(x)


def jacobian_matrix(vol: BSplineVolume, x) -> np.ndarray:
    return vol.jacobian(x)


def hessians(vol: BSplineVolume, x) -> np.ndarray:
    return vol.hessians(x)
