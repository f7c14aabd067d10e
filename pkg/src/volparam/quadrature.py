"""Tensor Gauss-Legendre rules on knot-span cells and local basis tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n``-point Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(int(n))
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor Gauss rule assembled over a set of boxes.

    ``points`` are global parameters, ``weights`` include the box volume and
    ``owner`` maps each node to the box it came from.
    """

    points: np.ndarray
    weights: np.ndarray
    owner: np.ndarray
    orders: tuple[int, int, int]

    @property
    def size(self) -> int:
        return self.weights.size


def box_rule(boxes: np.ndarray, orders) -> QuadratureRule:
    """Tensor Gauss rule with ``orders`` points per direction in every box ``(B, 3, 2)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 3, 2)
    orders = tuple(int(o) for o in orders)
    nodes = [gauss_legendre01(o) for o in orders]
    xs = np.stack(np.meshgrid(nodes[0][0], nodes[1][0], nodes[2][0], indexing="ij"), -1)
    xs = xs.transpose(2, 1, 0, 3).reshape(-1, 3)
    ws = np.einsum("i,j,k->kji", nodes[0][1], nodes[1][1], nodes[2][1]).reshape(-1)
    lo = boxes[:, :, 0]
    width = boxes[:, :, 1] - boxes[:, :, 0]
    pts = lo[:, None, :] + xs[None, :, :] * width[:, None, :]
    wts = ws[None, :] * np.prod(width, axis=1)[:, None]
    owner = np.repeat(np.arange(boxes.shape[0]), xs.shape[0])
    return QuadratureRule(pts.reshape(-1, 3), wts.reshape(-1), owner, orders)


def cell_rule(vol_or_knots, orders=None) -> QuadratureRule:
    """Per-cell tensor rule; default order is ``degree + 1`` per direction."""
    knots = getattr(vol_or_knots, "knots", vol_or_knots)
    if orders is None:
        orders = tuple(kv.degree + 1 for kv in knots)
    elif np.isscalar(orders):
        orders = (int(orders),) * 3
    bu, bv, bw = (kv.breakpoints for kv in knots)
    cu, cv, cw = bu.size - 1, bv.size - 1, bw.size - 1
    eu, ev, ew = np.meshgrid(np.arange(cu), np.arange(cv), np.arange(cw), indexing="ij")
    eu, ev, ew = (a.transpose(2, 1, 0).reshape(-1) for a in (eu, ev, ew))
    boxes = np.stack(
        [np.stack([bu[eu], bu[eu + 1]], -1), np.stack([bv[ev], bv[ev + 1]], -1), np.stack([bw[ew], bw[ew + 1]], -1)],
        axis=1,
    )
    return box_rule(boxes, orders)


def local_basis(knots, pts: np.ndarray, orders_list):
    """Values of the ``(p+1)(q+1)(r+1)`` locally active tensor basis functions.

    Parameters
    ----------
    knots : tuple of KnotVector
    pts : (N, 3) array
    orders_list : sequence of (a, b, c) derivative orders

    Returns
    -------
    idx : (N, nb) int array
        Flat control indices (xi fastest) of the active functions.
    vals : (len(orders_list), N, nb) array
    """
    pts = np.atleast_2d(pts)
    nmax = max(max(o) for o in orders_list)
    tabs = []
    for d, kv in enumerate(knots):
        spans, ders = kv.basis_ders(pts[:, d], nmax)
        tabs.append((spans - kv.degree, ders))
    (su, du), (sv, dv), (sw, dw) = tabs
    pu, pv, pw = du.shape[2], dv.shape[2], dw.shape[2]
    nu, nv = knots[0].n_basis, knots[1].n_basis
    i = su[:, None] + np.arange(pu)
    j = sv[:, None] + np.arange(pv)
    k = sw[:, None] + np.arange(pw)
    idx = i[:, None, None, :] + nu * (j[:, None, :, None] + nv * k[:, :, None, None])
    idx = idx.reshape(pts.shape[0], -1)
    vals = np.empty((len(orders_list), pts.shape[0], pu * pv * pw))
    for m, (a, b, c) in enumerate(orders_list):
        v = du[:, a, None, None, :] * dv[:, b, None, :, None] * dw[:, c, :, None, None]
        vals[m] = v.reshape(pts.shape[0], -1)
    return idx, vals


GRAD_ORDERS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
HESS_ORDERS = ((2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (0, 1, 1), (1, 0, 1))
