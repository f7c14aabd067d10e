"""Synthetic test geometries.

Each builder returns a :class:`BSplineVolume` whose six faces are the boundary
data of the fixture; the interior controls are only a reference (the pipeline
recomputes them).  The folded fixture is an invalid volume for certification
tests.
"""

from __future__ import annotations

import numpy as np

from .bspline import BSplineVolume, affine_volume, greville_grid, identity_volume, uniform_knots, AXIS_NAMES


def _knots(degrees, n_ctrl):
    return tuple(uniform_knots(p, n, AXIS_NAMES[d]) for d, (p, n) in enumerate(zip(degrees, n_ctrl)))


def _from_map(fn, degrees, n_ctrl) -> BSplineVolume:
    """Volume whose controls are ``fn`` applied at the Greville abscissae."""
    knots = _knots(degrees, n_ctrl)
    g = greville_grid(knots)
    return BSplineVolume(knots, fn(g[..., 0], g[..., 1], g[..., 2]))


def straight_cube(degrees=(3, 3, 3), n_ctrl=(5, 5, 5)) -> BSplineVolume:
    """Unit cube with the identity parameterization."""
    return identity_volume(degrees, n_ctrl)


def affine_cube(degrees=(3, 3, 3), n_ctrl=(5, 5, 5)) -> BSplineVolume:
    """Box ``[0,2] x [0,3] x [0,4]`` as the map ``diag(2, 3, 4) x``."""
    return affine_volume(np.diag([2.0, 3.0, 4.0]), degrees=degrees, n_ctrl=n_ctrl)


def twisted_cube(angle_deg: float = 30.0, degrees=(3, 3, 3), n_ctrl=(8, 8, 8)) -> BSplineVolume:
    """Unit cube whose horizontal slices turn about the vertical axis by up to ``angle_deg``."""
    a = np.deg2rad(angle_deg)

    def fn(x, y, z):
        th = a * z
        cx, cy = x - 0.5, y - 0.5
        return np.stack([0.5 + np.cos(th) * cx - np.sin(th) * cy, 0.5 + np.sin(th) * cx + np.cos(th) * cy, z], -1)

    return _from_map(fn, degrees, n_ctrl)


def tapered_block(taper: float = 0.5, degrees=(3, 3, 3), n_ctrl=(6, 6, 6)) -> BSplineVolume:
    """Block ``[0,2] x [0,1] x [0,1]`` whose cross-section shrinks along x to ``taper``."""

    def fn(x, y, z):
        s = 1.0 - (1.0 - taper) * x
        return np.stack([2.0 * x, 0.5 + s * (y - 0.5), 0.5 + s * (z - 0.5) + 0.2 * x**2], -1)

    return _from_map(fn, degrees, n_ctrl)


def revolution_block(sweep_deg: float = 90.0, degrees=(3, 3, 3), n_ctrl=(6, 6, 6)) -> BSplineVolume:
    """Sector of a thick cylindrical shell: radius 1..2, height 1, angle ``sweep_deg``."""
    a = np.deg2rad(sweep_deg)

    def fn(x, y, z):
        r = 1.0 + x
        th = a * y
        return np.stack([r * np.cos(th), r * np.sin(th), z], -1)

    return _from_map(fn, degrees, n_ctrl)


def dented_cube(depth: float = 0.5, width: float = 0.02, degrees=(3, 3, 3), n_ctrl=(8, 8, 8)) -> BSplineVolume:
    """Unit cube with a Gaussian dent of ``depth`` pressed into the top face.

    Deep dents make the harmonic interior fold near the top, so the max-min
    stage has real work to do.
    """
    vol = identity_volume(degrees, n_ctrl)
    c = vol.ctrl.copy()
    x, y = c[..., 0], c[..., 1]
    bump = np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / width)
    c[:, :, -1, 2] = 1.0 - depth * bump[:, :, -1]
    return vol.with_ctrl(c)


def fold_controls(ctrl: np.ndarray, index: int, axis: int = 0) -> np.ndarray:
    """Reflect every control slab with ``axis`` index >= ``index`` through slab ``index - 1``.

    The reflected controls run backwards along ``axis``, so the map folds over
    and det J is negative somewhere near the seam.
    """
    c = np.array(ctrl, dtype=np.float64)
    cm = np.moveaxis(c, axis, 0)
    pivot = cm[index - 1].copy()
    cm[index:] = 2.0 * pivot - cm[index:]
    return c


def folded_volume(degrees=(3, 3, 3), n_ctrl=(5, 5, 5), index: int = 3, axis: int = 0) -> BSplineVolume:
    """Identity volume folded by reflecting the controls beyond ``index`` along ``axis``."""
    vol = identity_volume(degrees, n_ctrl)
    return vol.with_ctrl(fold_controls(vol.ctrl, index, axis))


FIXTURES = {
    "straight_cube": straight_cube,
    "affine_cube": affine_cube,
    "twisted_cube": twisted_cube,
    "tapered_block": tapered_block,
    "revolution_block": revolution_block,
    "dented_cube": dented_cube,
    "folded_volume": folded_volume,
}

# fixtures whose boundary is valid input for the pipeline
BOUNDARY_FIXTURES = ("straight_cube", "affine_cube", "twisted_cube", "tapered_block", "revolution_block", "dented_cube")


def get_fixture(name: str, **kwargs) -> BSplineVolume:
    try:
        return FIXTURES[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}") from None


def fixture_faces(name: str, **kwargs) -> dict:
    return get_fixture(name, **kwargs).faces()


__all__ = [
    "straight_cube",
    "affine_cube",
    "twisted_cube",
    "tapered_block",
    "revolution_block",
    "dented_cube",
    "folded_volume",
    "fold_controls",
    "FIXTURES",
    "BOUNDARY_FIXTURES",
    "get_fixture",
    "fixture_faces",
]
