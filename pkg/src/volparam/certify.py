"""Bernstein form of det(J), positivity certificates and Lipschitz machinery."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .bernstein import (
    BezierCell,
    bernstein_eval,
    child_boxes,
    derivative_coeffs,
    extract_coeffs,
    multiply_coeffs,
    restrict_coeffs,
    subdivide_coeffs,
)
from .bspline import BSplineVolume, _check_points
from .errors import DegenerateBoundaryError, VolParamError

DEFAULT_DELTA = 1e-3
DEFAULT_MAX_DEPTH = 3


@dataclass(frozen=True, eq=False)
class JacobianField:
    """det(J) of a volume as one scalar Bernstein polynomial per knot-span cell."""

    knots: tuple
    boxes: np.ndarray
    coeffs: np.ndarray

    @property
    def degrees(self) -> tuple[int, int, int]:
        return tuple(s - 1 for s in self.coeffs.shape[1:])

    @property
    def n_cells(self) -> int:
        return self.coeffs.shape[0]

    @property
    def cells(self) -> list[BezierCell]:
        return [BezierCell(self.boxes[i], self.coeffs[i]) for i in range(self.n_cells)]

    def cell(self, gamma: int) -> BezierCell:
        return BezierCell(self.boxes[gamma], self.coeffs[gamma])

    def locate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Cell ids and local coordinates of global points."""
        x = np.atleast_2d(x)
        cu = self.knots[0].n_spans
        cv = self.knots[1].n_spans
        e = [kv.cell_index(x[:, d]) for d, kv in enumerate(self.knots)]
        ids = e[0] + cu * (e[1] + cv * e[2])
        b = self.boxes[ids]
        local = (x - b[:, :, 0]) / (b[:, :, 1] - b[:, :, 0])
        return ids, np.clip(local, 0.0, 1.0)

    def evaluate(self, x) -> np.ndarray:
        x, single = _check_points(x)
        ids, local = self.locate(x)
        out = bernstein_eval(self.coeffs[ids], local)
        return out[0] if single else out

    def _derivative_tables(self):
        cached = self.__dict__.get("_dtabs")
        if cached is None:
            widths = self.boxes[:, :, 1] - self.boxes[:, :, 0]
            cached = [derivative_coeffs(self.coeffs, a) / widths[:, a, None, None, None] for a in range(3)]
            self.__dict__["_dtabs"] = cached
        return cached

    def gradient(self, x) -> np.ndarray:
        """Exact gradient of det(J) w.r.t. the global parameters."""
        x, single = _check_points(x)
        ids, local = self.locate(x)
        tabs = self._derivative_tables()
        g = np.stack([bernstein_eval(t[ids], local) for t in tabs], axis=-1)
        return g[0] if single else g


def jacobian_bezier(vol: BSplineVolume) -> JacobianField:
    """Per-cell Bernstein coefficients of det(J) at degrees (3p-1, 3q-1, 3r-1)."""
    c, boxes = extract_coeffs(vol)
    widths = boxes[:, :, 1] - boxes[:, :, 0]
    # columns of J: derivative cells along xi, eta, zeta (global scaling)
    d = [derivative_coeffs(c, a) / widths[:, a, None, None, None, None] for a in range(3)]
    gx, ge, gz = d

    def mul(a, b):
        return multiply_coeffs(np.ascontiguousarray(a), np.ascontiguousarray(b))

    cross = [
        mul(ge[..., 1], gz[..., 2]) - mul(ge[..., 2], gz[..., 1]),
        mul(ge[..., 2], gz[..., 0]) - mul(ge[..., 0], gz[..., 2]),
        mul(ge[..., 0], gz[..., 1]) - mul(ge[..., 1], gz[..., 0]),
    ]
    det = mul(gx[..., 0], cross[0]) + mul(gx[..., 1], cross[1]) + mul(gx[..., 2], cross[2])
    return JacobianField(vol.knots, boxes, det)


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------


@dataclass
class CellVerdict:
    cell_id: int
    certified: bool
    depth: int
    min_coeff: float
    failing_boxes: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return "Certified" if self.certified else "Indeterminate"

    def to_dict(self) -> dict:
        return {
            "cell": self.cell_id,
            "status": self.status,
            "depth": self.depth,
            "min_coeff": self.min_coeff,
            "failing_boxes": [np.asarray(b).tolist() for b in self.failing_boxes],
        }


@dataclass
class CertificateReport:
    delta: float
    max_depth: int
    verdicts: list

    @property
    def certified(self) -> bool:
        return all(v.certified for v in self.verdicts)

    @property
    def status(self) -> str:
        return "Certified" if self.certified else "Indeterminate"

    @property
    def n_certified(self) -> int:
        return sum(v.certified for v in self.verdicts)

    @property
    def certified_fraction(self) -> float:
        return self.n_certified / max(len(self.verdicts), 1)

    @property
    def failing_cells(self) -> list[int]:
        return [v.cell_id for v in self.verdicts if not v.certified]

    def failing_boxes(self) -> np.ndarray:
        boxes = [np.asarray(b) for v in self.verdicts for b in v.failing_boxes]
        if not boxes:
            return np.zeros((0, 3, 2))
        return np.stack(boxes)

    def failing_box_owners(self) -> np.ndarray:
        return np.array([v.cell_id for v in self.verdicts for _ in v.failing_boxes], dtype=np.int64)

    def min_coeff(self) -> float:
        return min(v.min_coeff for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "delta": self.delta,
            "max_depth": self.max_depth,
            "n_cells": len(self.verdicts),
            "n_certified": self.n_certified,
            "min_coeff": self.min_coeff(),
            "cells": [v.to_dict() for v in self.verdicts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _certify_coeffs(coeffs, box, delta, max_depth, cell_id=-1) -> CellVerdict:
    frontier = np.asarray(coeffs, dtype=np.float64)[None]
    boxes = np.asarray(box, dtype=np.float64)[None]
    depth = 0
    leaf_min = np.inf
    while True:
        mins = frontier.reshape(frontier.shape[0], -1).min(axis=1)
        ok = mins > delta
        if np.any(ok):
            leaf_min = min(leaf_min, float(mins[ok].min()))
        if np.all(ok):
            return CellVerdict(cell_id, True, depth, leaf_min)
        if depth == max_depth:
            bad = ~ok
            leaf_min = min(leaf_min, float(mins[bad].min()))
            return CellVerdict(cell_id, False, depth, leaf_min, [b for b in boxes[bad]])
        bad = ~ok
        kids = subdivide_coeffs(frontier[bad])
        frontier = kids.reshape((-1,) + kids.shape[2:])
        boxes = child_boxes(boxes[bad]).reshape(-1, 3, 2)
        depth += 1


def certify_cell(cell: BezierCell, delta: float = DEFAULT_DELTA, max_depth: int = DEFAULT_MAX_DEPTH, cell_id: int = -1) -> CellVerdict:
    """Coefficient test with recursive midpoint subdivision up to ``max_depth``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")
    if cell.coeffs.ndim != 3:
        raise ValueError("certify_cell expects a scalar cell")
    return _certify_coeffs(cell.coeffs, cell.box, delta, max_depth, cell_id)


def _degenerate_faces(field: JacobianField, rel_tol=1e-12):
    """(cell, axis, side) triples whose det(J) coefficients vanish on a domain face."""
    scale = float(np.abs(field.coeffs).max()) or 1.0
    out = []
    for gamma in range(field.n_cells):
        box = field.boxes[gamma]
        c = field.coeffs[gamma]
        for axis in range(3):
            for side, at in ((0, 0.0), (1, 1.0)):
                if box[axis, side] != at:
                    continue
                face = np.take(c, 0 if side == 0 else -1, axis=axis)
                if np.all(np.abs(face) <= rel_tol * scale):
                    out.append((gamma, axis, side))
    return out


def certify_volume(
    vol: BSplineVolume | JacobianField,
    delta: float = DEFAULT_DELTA,
    max_depth: int = DEFAULT_MAX_DEPTH,
    degenerate: str = "reject",
) -> CertificateReport:
    """Certify det(J) > delta on every cell.

    ``degenerate`` controls cells whose Jacobian is identically zero on a boundary
    face: ``"reject"`` raises :class:`DegenerateBoundaryError`; ``"shrink"``
    certifies the cell on a box pulled in by ``delta`` (parametric units) from
    each such face.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if degenerate not in ("reject", "shrink"):
        raise ValueError("degenerate must be 'reject' or 'shrink'")
    field = vol if isinstance(vol, JacobianField) else jacobian_bezier(vol)
    degen = _degenerate_faces(field)
    if degen and degenerate == "reject":
        gamma, axis, side = degen[0]
        raise DegenerateBoundaryError(
            f"det(J) vanishes on boundary face {('xi', 'eta', 'zeta')[axis]}={side} of cell {gamma} "
            f"({len(degen)} degenerate cell faces)"
        )
    shrink: dict[int, np.ndarray] = {}
    for gamma, axis, side in degen:
        local = shrink.setdefault(gamma, np.array([[0.0, 1.0]] * 3))
        width = field.boxes[gamma, axis, 1] - field.boxes[gamma, axis, 0]
        frac = min(delta / width, 0.25)
        if side == 0:
            local[axis, 0] = frac
        else:
            local[axis, 1] = 1.0 - frac

    verdicts = []
    for gamma in range(field.n_cells):
        coeffs = field.coeffs[gamma]
        box = field.boxes[gamma]
        if gamma in shrink:
            local = shrink[gamma]
            coeffs = restrict_coeffs(coeffs[None], local)[0]
            lo, w = box[:, 0], box[:, 1] - box[:, 0]
            box = np.stack([lo + local[:, 0] * w, lo + local[:, 1] * w], axis=-1)
        verdicts.append(_certify_coeffs(coeffs, box, delta, max_depth, gamma))
    return CertificateReport(float(delta), int(max_depth), verdicts)


# ---------------------------------------------------------------------------
# Lipschitz bound and fill distance
# ---------------------------------------------------------------------------


def jacobian_gradient(field: JacobianField, x) -> np.ndarray:
    return field.gradient(x)


def lipschitz_bound(field: JacobianField) -> float:
    """Upper bound on max |grad det(J)| from convex-hull bounds of the partial derivatives."""
    tabs = field._derivative_tables()
    per_axis = np.stack([np.abs(t).reshape(t.shape[0], -1).max(axis=1) for t in tabs], axis=1)
    return float(np.sqrt((per_axis**2).sum(axis=1)).max())


_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.float64)


def fill_distance(points, region=None, rel_tol: float = 1e-3, k: int = 8) -> float:
    """Certified upper bound on max over ``region`` of the distance to the nearest point.

    Branch and bound over boxes: the lower bound is the largest distance seen at
    box corners and centers, a box's upper bound is the smallest farthest-corner
    distance among the ``k`` points nearest its center.  Refinement stops once
    every live box's upper bound is within ``rel_tol`` times the region diagonal
    of the global lower bound.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise VolParamError("fill distance of an empty point set")
    region = np.array([[0.0, 1.0]] * 3 if region is None else region, dtype=np.float64).reshape(3, 2)
    diag = float(np.linalg.norm(region[:, 1] - region[:, 0]))
    tol = rel_tol * diag
    tree = cKDTree(pts)
    kk = min(k, pts.shape[0])
    lo = region[None, :, 0]
    hi = region[None, :, 1]
    lower = 0.0
    upper_pruned = 0.0
    for _ in range(40):
        centers = 0.5 * (lo + hi)
        corners = lo[:, None, :] + _CORNERS[None] * (hi - lo)[:, None, :]
        d_center, _ = tree.query(centers)
        d_corner, _ = tree.query(corners.reshape(-1, 3))
        lb = np.maximum(d_center, d_corner.reshape(-1, 8).max(axis=1))
        lower = max(lower, float(lb.max()))
        _, nn = tree.query(centers, k=kk)
        nn = np.asarray(nn).reshape(centers.shape[0], kk)
        near = pts[nn]  # (B, k, 3)
        far = np.maximum(np.abs(near - lo[:, None, :]), np.abs(near - hi[:, None, :]))
        ub = np.sqrt((far**2).sum(axis=2)).min(axis=1)
        live = ub > lower + tol
        if np.any(~live):
            upper_pruned = max(upper_pruned, float(ub[~live].max()))
        if not np.any(live):
            return max(upper_pruned, lower)
        lo, hi = lo[live], hi[live]
        boxes = np.stack([lo, hi], axis=-1)
        kids = child_boxes(boxes).reshape(-1, 3, 2)
        lo, hi = kids[:, :, 0], kids[:, :, 1]
    return max(upper_pruned, float(ub.max()))
