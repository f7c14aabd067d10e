"""Trivariate Bernstein polynomials on axis-aligned boxes and Bezier extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from . import _kernels as K
from .bspline import BSplineVolume
from .errors import DomainError


def bernstein_basis(degree: int, t) -> np.ndarray:
    """``(len(t), degree + 1)`` Bernstein basis values on [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i = np.arange(degree + 1)
    return comb(degree, i) * t[:, None] ** i * (1.0 - t[:, None]) ** (degree - i)


def bernstein_eval(coeffs: np.ndarray, local) -> np.ndarray:
    """Evaluate ``coeffs`` of shape ``(B, d1+1, d2+1, d3+1[, k])`` at per-batch local points ``(B, 3)``."""
    local = np.atleast_2d(local)
    d1, d2, d3 = (s - 1 for s in coeffs.shape[1:4])
    bu = bernstein_basis(d1, local[:, 0])
    bv = bernstein_basis(d2, local[:, 1])
    bw = bernstein_basis(d3, local[:, 2])
    if coeffs.ndim == 4:
        return np.einsum("ni,nj,nk,nijk->n", bu, bv, bw, coeffs, optimize=True)
    return np.einsum("ni,nj,nk,nijkd->nd", bu, bv, bw, coeffs, optimize=True)


def _split_axis(c: np.ndarray, axis: int, t: float):
    """de Casteljau split of batched ``(B, n0, n1, n2[, ...])`` data along spatial ``axis``."""
    moved = np.moveaxis(c, axis + 1, 1)
    shp = moved.shape
    flat = np.ascontiguousarray(moved).reshape(shp[0], shp[1], -1)
    left, right = K.casteljau_split(flat, t)
    left = np.moveaxis(left.reshape(shp), 1, axis + 1)
    right = np.moveaxis(right.reshape(shp), 1, axis + 1)
    return left, right


def subdivide_coeffs(c: np.ndarray) -> np.ndarray:
    """Split batched coefficients at the box midpoint into 8 children.

    Returns ``(B, 8, ...)``; child ``a + 2b + 4c`` covers the lower (0) or upper (1)
    half along xi (a), eta (b) and zeta (c).
    """
    parts = [c]
    for axis in range(3):
        nxt = []
        for part in parts:
            nxt.extend(_split_axis(part, axis, 0.5))
        parts = nxt
    # parts[4a + 2b + c] holds xi half a, eta half b, zeta half c
    order = [4 * a + 2 * b + cc for cc in range(2) for b in range(2) for a in range(2)]
    return np.stack([parts[i] for i in order], axis=1)


def child_boxes(boxes: np.ndarray) -> np.ndarray:
    """``(B, 3, 2)`` boxes -> ``(B, 8, 3, 2)`` octant boxes in child order."""
    lo, hi = boxes[..., 0], boxes[..., 1]
    mid = 0.5 * (lo + hi)
    out = np.empty(boxes.shape[:1] + (8, 3, 2))
    for child in range(8):
        bits = ((child >> 0) & 1, (child >> 1) & 1, (child >> 2) & 1)
        for d, bit in enumerate(bits):
            out[:, child, d, 0] = np.where(bit, mid[:, d], lo[:, d])
            out[:, child, d, 1] = np.where(bit, hi[:, d], mid[:, d])
    return out


def restrict_coeffs(c: np.ndarray, local_box) -> np.ndarray:
    """Bernstein coefficients of the restriction to a sub-box given in local [0,1] coordinates."""
    out = c
    for axis in range(3):
        a, b = float(local_box[axis][0]), float(local_box[axis][1])
        if b < 1.0:
            out, _ = _split_axis(out, axis, b)
        if a > 0.0:
            _, out = _split_axis(out, axis, a / b)
    return out


def multiply_coeffs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched Bernstein product at summed degrees."""
    return K.bern_product(a, b)


def elevate_coeffs(c: np.ndarray, degrees) -> np.ndarray:
    """Degree-elevate batched scalar coefficients to ``degrees``."""
    extra = tuple(int(d) - (s - 1) for d, s in zip(degrees, c.shape[1:4]))
    if any(e < 0 for e in extra):
        raise ValueError("target degree lower than current degree")
    if not any(extra):
        return np.array(c)
    ones = np.ones((c.shape[0],) + tuple(e + 1 for e in extra))
    return K.bern_product(c, ones)


def derivative_coeffs(c: np.ndarray, axis: int) -> np.ndarray:
    """Coefficients of the derivative w.r.t. the *local* coordinate along ``axis``."""
    deg = c.shape[axis + 1] - 1
    if deg == 0:
        shp = list(c.shape)
        return np.zeros(shp)
    return deg * np.diff(c, axis=axis + 1)


@dataclass(frozen=True, eq=False)
class BezierCell:
    """Bernstein polynomial over an axis-aligned box.

    ``coeffs`` has shape ``(d1+1, d2+1, d3+1)`` for scalar data or
    ``(d1+1, d2+1, d3+1, k)`` for ``k``-vector data.
    """

    box: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        box = np.array(self.box, dtype=np.float64).reshape(3, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise DomainError("degenerate cell box")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=np.float64))

    @property
    def degrees(self) -> tuple[int, int, int]:
        return tuple(s - 1 for s in self.coeffs.shape[:3])

    @property
    def widths(self) -> np.ndarray:
        return self.box[:, 1] - self.box[:, 0]

    def to_local(self, x) -> np.ndarray:
        return (np.atleast_2d(x) - self.box[:, 0]) / self.widths

    def evaluate(self, x) -> np.ndarray:
        """Evaluate at global parameter points inside ``box``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        local = self.to_local(x)
        c = np.broadcast_to(self.coeffs, (local.shape[0],) + self.coeffs.shape)
        return bernstein_eval(c, local)

    def children(self) -> list["BezierCell"]:
        kids = subdivide_coeffs(self.coeffs[None])[0]
        boxes = child_boxes(self.box[None])[0]
        return [BezierCell(boxes[i], kids[i]) for i in range(8)]


def subdivide_bezier(cell: BezierCell) -> list[BezierCell]:
    """Eight children from a midpoint split in every direction (child ``a + 2b + 4c``)."""
    return cell.children()


def bernstein_multiply(a: BezierCell, b: BezierCell) -> BezierCell:
    """Scalar product of two Bernstein polynomials over the same box."""
    if not np.allclose(a.box, b.box, rtol=0.0, atol=1e-14):
        raise DomainError("Bernstein operands live on different boxes")
    if a.coeffs.ndim != 3 or b.coeffs.ndim != 3:
        raise ValueError("bernstein_multiply expects scalar cells")
    return BezierCell(a.box, multiply_coeffs(a.coeffs[None], b.coeffs[None])[0])


# ---------------------------------------------------------------------------
# Extraction from B-spline volumes
# ---------------------------------------------------------------------------


def _full_multiplicity(vol: BSplineVolume) -> BSplineVolume:
    out = vol
    for axis, kv in enumerate(vol.knots):
        p = kv.degree
        inner = kv.breakpoints[1:-1]
        missing = []
        for u in inner:
            s = int(np.count_nonzero(kv.knots == u))
            missing.extend([u] * (p - s))
        if missing:
            out = out.insert_knots(axis, missing)
    return out


def extract_coeffs(vol: BSplineVolume) -> tuple[np.ndarray, np.ndarray]:
    """Batched Bezier extraction.

    Returns ``(coeffs, boxes)`` with ``coeffs`` of shape ``(n_cells, p+1, q+1, r+1, 3)``
    and ``boxes`` ``(n_cells, 3, 2)``; cell ids run with xi fastest.
    """
    full = _full_multiplicity(vol)
    p, q, r = vol.degrees
    cu, cv, cw = vol.cell_counts
    iu = np.arange(cu)[:, None] * p + np.arange(p + 1)
    iv = np.arange(cv)[:, None] * q + np.arange(q + 1)
    iw = np.arange(cw)[:, None] * r + np.arange(r + 1)
    blocks = full.ctrl[
        iu[:, None, None, :, None, None],
        iv[None, :, None, None, :, None],
        iw[None, None, :, None, None, :],
    ]
    # (cu, cv, cw, p+1, q+1, r+1, 3) -> cell id xi fastest
    blocks = blocks.transpose(2, 1, 0, 3, 4, 5, 6).reshape((cu * cv * cw, p + 1, q + 1, r + 1, 3))
    return np.ascontiguousarray(blocks), vol.cell_boxes()


def bezier_extract(vol: BSplineVolume) -> list[BezierCell]:
    """One vector-valued Bezier cell per knot-span cell, cell id with xi fastest."""
    coeffs, boxes = extract_coeffs(vol)
    return [BezierCell(boxes[i], coeffs[i]) for i in range(coeffs.shape[0])]
