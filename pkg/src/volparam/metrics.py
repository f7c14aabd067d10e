"""Quality measures of a volumetric map: condition number, orthogonality,
per-sub-cuboid scaled Jacobian and fairness energy."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bspline import BSplineVolume
from .harmonic import quadrature_energy
from .mips import _adjugate, _det3, conformal_distortion
from .quadrature import box_rule

DEFAULT_SAMPLES = 33
DEFAULT_GRID = (4, 4, 4)


def condition_number(J) -> np.ndarray | float:
    """Frobenius condition number ``|J|_F |J^-1|_F`` of one matrix or a stack.

    At least 3 for any nonsingular 3x3 matrix; ``+inf`` when singular.
    """
    J = np.asarray(J, dtype=np.float64)
    det = _det3(J)
    adj = _adjugate(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.sqrt(np.sum(J**2, axis=(-2, -1)) * np.sum(adj**2, axis=(-2, -1))) / np.abs(det)
    k = np.where(det == 0.0, np.inf, k)
    return float(k) if k.ndim == 0 else k


def orthogonality(g_xi, g_eta, g_zeta) -> np.ndarray | float:
    """Product of ``1 - |cos|`` over the three pairs of partial derivative vectors.

    Arguments are 3-vectors or stacks ``(..., 3)``.  Returns values in [0, 1],
    with 1 exactly when the three vectors are mutually orthogonal.

    Raises
    ------
    ValueError
        If any vector is zero.
    """
    vs = [np.asarray(v, dtype=np.float64) for v in (g_xi, g_eta, g_zeta)]
    norms = [np.linalg.norm(v, axis=-1) for v in vs]
    if any(np.any(n == 0.0) for n in norms):
        raise ValueError("orthogonality is undefined for a zero partial derivative")
    out = 1.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        cos = np.abs(np.sum(vs[a] * vs[b], axis=-1)) / (norms[a] * norms[b])
        out = out * (1.0 - np.minimum(cos, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def _det_order(vol: BSplineVolume) -> tuple[int, int, int]:
    # det J has degree 3p - 1 per direction; n Gauss points integrate degree 2n - 1
    return tuple(int(math.ceil(3 * p / 2)) for p in vol.degrees)


def domain_volume(vol: BSplineVolume, order=None) -> float:
    """Vol(Omega) as the Gauss integral of det J (exact at the default order)."""
    return float(_piece_integrals(vol, (1, 1, 1), order)[0].sum())


def _piece_integrals(vol: BSplineVolume, grid, order):
    """Integrals of det J and of 1 per sub-cuboid, flattened with xi fastest."""
    grid = tuple(int(g) for g in grid)
    if min(grid) < 1:
        raise ValueError("sub-cuboid grid must be positive")
    order = _det_order(vol) if order is None else (tuple(order) if np.ndim(order) else (int(order),) * 3)
    cuts = []
    for kv, g in zip(vol.knots, grid):
        lines = np.linspace(0.0, 1.0, g + 1)
        cuts.append(np.union1d(kv.breakpoints, lines))
    lo = [c[:-1] for c in cuts]
    hi = [c[1:] for c in cuts]
    I, Jg, Kg = np.meshgrid(np.arange(lo[0].size), np.arange(lo[1].size), np.arange(lo[2].size), indexing="ij")
    I, Jg, Kg = (a.transpose(2, 1, 0).reshape(-1) for a in (I, Jg, Kg))
    boxes = np.stack(
        [np.stack([lo[0][I], hi[0][I]], -1), np.stack([lo[1][Jg], hi[1][Jg]], -1), np.stack([lo[2][Kg], hi[2][Kg]], -1)],
        axis=1,
    )
    mid = boxes.mean(axis=2)
    sub = [np.minimum((mid[:, d] * grid[d]).astype(np.int64), grid[d] - 1) for d in range(3)]
    sub_id = sub[0] + grid[0] * (sub[1] + grid[1] * sub[2])
    rule = box_rule(boxes, order)
    det = _det3(vol.jacobian(rule.points))
    n_sub = int(np.prod(grid))
    owner = sub_id[rule.owner]
    # fixed-order reductions keep the result reproducible
    integ = np.bincount(owner, weights=rule.weights * det, minlength=n_sub)
    meas = np.bincount(owner, weights=rule.weights, minlength=n_sub)
    return integ, meas


def volume_distortion_grid(vol: BSplineVolume, grid=DEFAULT_GRID, order=None) -> np.ndarray:
    """Average scaled Jacobian ``det J / Vol(Omega)`` on each of ``L x M x N`` sub-cuboids.

    Each sub-cuboid is split along the knot lines so that every piece is
    polynomial, then integrated by Gauss rules exact for det J.  Returns an
    array of shape ``grid``.

    Raises
    ------
    ValueError
        If the computed domain volume is not positive.
    """
    grid = tuple(int(g) for g in grid)
    integ, meas = _piece_integrals(vol, grid, order)
    total = float(integ.sum())
    if not total > 0.0:
        raise ValueError(f"domain volume {total:.3e} is not positive; the map is not bijective")
    # dividing by the quadrature measure of the whole domain (one up to rounding)
    dvol = (integ / meas) / (total / float(meas.sum()))
    return dvol.reshape(grid[::-1]).transpose(2, 1, 0)


def fairness_energy(vol: BSplineVolume, order=None) -> float:
    """Integral of ``|H_x|_F^2 + |H_y|_F^2 + |H_z|_F^2`` over the parameter cube."""
    return quadrature_energy(vol.knots, vol.flat_ctrl(), "hessian", order)


def sample_lattice(samples) -> np.ndarray:
    """``(n, 3)`` uniform lattice on [0,1]^3 with xi fastest."""
    s = (int(samples),) * 3 if np.ndim(samples) == 0 else tuple(int(v) for v in samples)
    axes = [np.linspace(0.0, 1.0, n) for n in s]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    return X.transpose(2, 1, 0, 3).reshape(-1, 3)


def sample_fields(vol: BSplineVolume, points) -> dict[str, np.ndarray]:
    """Pointwise ``detJ``, ``kappa``, ``orth``, ``dcon`` and ``dvol`` at ``points``."""
    J = vol.jacobian(np.atleast_2d(points))
    det = _det3(J)
    kappa = condition_number(J)
    cols = [J[..., a] for a in range(3)]
    norms = np.stack([np.linalg.norm(c, axis=-1) for c in cols])
    orth = np.zeros(det.shape)
    ok = np.all(norms > 0.0, axis=0)
    if np.any(ok):
        orth[ok] = orthogonality(*(c[ok] for c in cols))
    vol_omega = domain_volume(vol)
    return {
        "detJ": det,
        "kappa": kappa,
        "orth": orth,
        "dcon": conformal_distortion(J),
        "dvol": det / vol_omega,
    }


TABLE_HEADER = "max(kappa)  min(G_orth)  max(G_orth)  min(D_vol)  max(D_vol)  E(G)  Vol"


@dataclass
class QualityReport:
    max_kappa: float
    min_orth: float
    max_orth: float
    min_dvol: float | None
    max_dvol: float | None
    fairness: float
    volume: float
    samples: int
    grid: tuple
    timings: dict = field(default_factory=dict)

    def table_line(self) -> str:
        def f(v):
            return "n/a" if v is None else f"{v:.6g}"

        vals = (self.max_kappa, self.min_orth, self.max_orth, self.min_dvol, self.max_dvol, self.fairness, self.volume)
        return "  ".join(f(v) for v in vals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def quality_report(
    vol: BSplineVolume,
    samples: int = DEFAULT_SAMPLES,
    grid=DEFAULT_GRID,
    order=None,
    timings: dict | None = None,
) -> QualityReport:
    """Extrema of kappa and G_orth on a ``samples``-per-axis lattice plus D_vol,
    fairness energy and domain volume.  Non-bijective inputs give infinite
    kappa and ``None`` for D_vol instead of raising."""
    pts = sample_lattice(samples)
    fields = sample_fields(vol, pts)
    try:
        dv = volume_distortion_grid(vol, grid, order)
        dmin, dmax = float(dv.min()), float(dv.max())
    except ValueError:
        dmin = dmax = None
    return QualityReport(
        max_kappa=float(np.max(fields["kappa"])),
        min_orth=float(np.min(fields["orth"])),
        max_orth=float(np.max(fields["orth"])),
        min_dvol=dmin,
        max_dvol=dmax,
        fairness=fairness_energy(vol),
        volume=domain_volume(vol),
        samples=int(samples),
        grid=tuple(int(g) for g in grid),
        timings=dict(timings or {}),
    )


__all__ = [
    "condition_number",
    "orthogonality",
    "domain_volume",
    "volume_distortion_grid",
    "fairness_energy",
    "sample_lattice",
    "sample_fields",
    "QualityReport",
    "quality_report",
    "TABLE_HEADER",
]
