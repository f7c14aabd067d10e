"""Tests for the Bernstein form of det J and the positivity certificate."""

import numpy as np
import pytest

from conftest import perturbed_identity, random_volume
from volparam.bernstein import BezierCell, bernstein_basis
from volparam.bspline import affine_volume, identity_volume
from volparam.certify import (
    certify_cell,
    certify_volume,
    fill_distance,
    jacobian_bezier,
    jacobian_gradient,
    lipschitz_bound,
)
from volparam.errors import DegenerateBoundaryError, VolParamError
from volparam.fixtures import fold_controls, folded_volume


def _cell_grid(box, n):
    axes = [np.linspace(box[d, 0], box[d, 1], n) for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def _raw_det(vol, x):
    return np.linalg.det(vol.jacobian(x))


class TestJacobianBezier:
    def test_identity_coefficients(self, cubic_identity):
        field = jacobian_bezier(cubic_identity)
        # Greville controls carry rounding, so "equal to 1" holds to a few ulps
        assert np.abs(field.coeffs - 1.0).max() < 1e-13

    def test_degrees(self, cubic_identity):
        assert jacobian_bezier(cubic_identity).degrees == (8, 8, 8)
        vol = identity_volume((2, 3, 1), (4, 5, 3))
        assert jacobian_bezier(vol).degrees == (5, 8, 2)

    def test_affine_coefficients(self):
        vol = affine_volume(np.diag([2.0, 3.0, 4.0]), n_ctrl=(5, 5, 5))
        field = jacobian_bezier(vol)
        assert np.allclose(field.coeffs, 24.0, rtol=1e-13)
        assert certify_volume(vol).certified

    def test_matches_direct_determinant(self, rng):
        vol = random_volume(rng, degrees=(3, 2, 3), n_inner=(2, 1, 1))
        x = rng.uniform(0, 1, (200, 3))
        field = jacobian_bezier(vol)
        ref = _raw_det(vol, x)
        assert np.allclose(field.evaluate(x), ref, atol=1e-9 * max(1.0, np.abs(ref).max()))


class TestGradientAndLipschitz:
    def test_constant_fields(self, cubic_identity):
        x = np.random.default_rng(0).uniform(0, 1, (10, 3))
        assert np.allclose(jacobian_gradient(jacobian_bezier(cubic_identity), x), 0.0)
        aff = affine_volume(np.array([[1.0, 0.2, 0], [0, 2.0, 0.1], [0.3, 0, 1.0]]), n_ctrl=(5, 5, 5))
        field = jacobian_bezier(aff)
        assert np.allclose(jacobian_gradient(field, x), 0.0, atol=1e-12)
        assert lipschitz_bound(field) < 1e-10

    def test_gradient_finite_differences(self, rng):
        vol = random_volume(rng)
        field = jacobian_bezier(vol)
        x = rng.uniform(0.05, 0.95, (20, 3))
        g = jacobian_gradient(field, x)
        h = 1e-6
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = (_raw_det(vol, x + e) - _raw_det(vol, x - e)) / (2 * h)
            assert np.allclose(g[:, a], fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())

    def test_bound_dominates_samples(self, rng):
        vol = random_volume(rng, n_inner=(1, 1, 1))
        field = jacobian_bezier(vol)
        x = _cell_grid(np.array([[0.0, 1.0]] * 3), 32)
        sampled = np.linalg.norm(field.gradient(x), axis=1).max()
        assert lipschitz_bound(field) >= sampled

    def test_cubic_homogeneity(self, rng):
        vol = random_volume(rng)
        c = 1.7
        L1 = lipschitz_bound(jacobian_bezier(vol))
        L2 = lipschitz_bound(jacobian_bezier(vol.with_ctrl(c * vol.ctrl)))
        assert abs(L2 / L1 - c**3) <= 1e-9 * c**3


class TestCertifyCell:
    box = np.array([[0.0, 1.0]] * 3)

    def test_constant_cell(self):
        v = certify_cell(BezierCell(self.box, np.ones((3, 3, 3))), delta=0.5)
        assert v.certified and v.depth == 0

    def test_corner_zero_is_indeterminate(self):
        c = np.zeros((2, 2, 2))
        c[1, 1, 1] = 1.0  # xi * eta * zeta
        for depth in (0, 2, 4):
            v = certify_cell(BezierCell(self.box, c), delta=1e-6, max_depth=depth)
            assert not v.certified
            assert len(v.failing_boxes) >= 1
            assert np.allclose(v.failing_boxes[0][:, 0], 0.0)

    def test_negative_raw_coefficient(self):
        uni = np.array([5.0, -1.0, 5.0])
        c = np.broadcast_to(uni[:, None, None], (3, 1, 1)).copy()
        v = certify_cell(BezierCell(self.box, c), delta=1e-3, max_depth=3)
        assert v.certified and 1 <= v.depth <= 3
        t = np.linspace(0, 1, 10001)
        dense_min = (bernstein_basis(2, t) @ uni).min()
        assert abs(dense_min - 2.0) < 1e-6
        assert 0 < v.min_coeff <= dense_min + 1e-12

    def test_monotone_in_depth_and_delta(self, rng):
        vol = perturbed_identity(rng, amp=0.12)
        field = jacobian_bezier(vol)
        for cell in field.cells:
            d_ok = [certify_cell(cell, 1e-3, d).certified for d in range(4)]
            assert d_ok == sorted(d_ok)
            if certify_cell(cell, 1e-2, 3).certified:
                assert certify_cell(cell, 1e-3, 3).certified
                assert certify_cell(cell, 1e-6, 3).certified

    def test_bad_arguments(self):
        cell = BezierCell(self.box, np.ones((2, 2, 2)))
        with pytest.raises(ValueError):
            certify_cell(cell, delta=0.0)
        with pytest.raises(ValueError):
            certify_cell(cell, max_depth=-1)


class TestCertifyVolume:
    def test_identity(self, cubic_identity):
        rep = certify_volume(cubic_identity, delta=1e-3)
        assert rep.certified and rep.status == "Certified"
        assert all(v.depth == 0 for v in rep.verdicts)
        assert rep.failing_boxes().shape == (0, 3, 2)

    def test_folded_volume(self):
        vol = folded_volume()
        rep = certify_volume(vol)
        assert rep.status == "Indeterminate"
        boxes = rep.failing_boxes()
        found = False
        for box in boxes:
            d = _raw_det(vol, _cell_grid(box, 12))
            if d.min() < 0:
                found = True
                break
        assert found

    def test_soundness_on_jittered_volumes(self, rng):
        field_boxes = None
        for _ in range(5):
            vol = perturbed_identity(rng, amp=0.05)
            rep = certify_volume(vol)
            if rep.certified:
                field_boxes = vol.cell_boxes()
                for box in field_boxes:
                    assert _raw_det(vol, _cell_grid(box, 10)).min() > 0
        assert field_boxes is not None

    def test_fold_along_each_axis(self, rng):
        for axis in range(3):
            vol = perturbed_identity(rng, amp=0.01)
            folded = vol.with_ctrl(fold_controls(vol.ctrl, 3, axis))
            assert not certify_volume(folded).certified

    def test_degenerate_policy(self):
        vol = identity_volume((2, 2, 2), (3, 3, 3))
        c = vol.ctrl.copy()
        c[:, :, 0, 2] = 0.0
        c[:, :, 1, 2] = 0.0  # first layer collapses: det J = 0 on zeta = 0
        bad = vol.with_ctrl(c)
        with pytest.raises(DegenerateBoundaryError):
            certify_volume(bad)
        rep = certify_volume(bad, degenerate="shrink")
        assert len(rep.verdicts) == bad.n_cells

    def test_report_json(self, cubic_identity):
        import json

        doc = json.loads(certify_volume(cubic_identity).to_json())
        assert doc["status"] == "Certified"
        assert doc["n_cells"] == 8
        assert doc["cells"][0]["depth"] == 0


class TestFillDistance:
    def test_center_point(self):
        assert abs(fill_distance(np.array([[0.5, 0.5, 0.5]])) - np.sqrt(3) / 2) < 1e-3 * np.sqrt(3)

    def test_corners(self):
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
        assert abs(fill_distance(corners) - np.sqrt(3) / 2) < 1e-3 * np.sqrt(3)

    def test_random_points_against_grid(self, rng):
        from scipy.spatial.distance import cdist

        pts = rng.uniform(0, 1, (50, 3))
        g = _cell_grid(np.array([[0.0, 1.0]] * 3), 64)
        brute = cdist(g, pts).min(axis=1).max()
        fd = fill_distance(pts)
        assert abs(fd - brute) < 2e-2
        assert fd >= brute - 1e-12

    def test_subregion(self):
        box = np.array([[0.0, 0.5], [0.0, 0.5], [0.0, 0.5]])
        d = fill_distance(np.array([[0.25, 0.25, 0.25]]), box)
        assert abs(d - np.sqrt(3) / 4) < 1e-3

    def test_empty(self):
        with pytest.raises(VolParamError):
            fill_distance(np.zeros((0, 3)))

    def test_positivity_from_lipschitz(self, rng):
        vol = perturbed_identity(rng, amp=0.02)
        field = jacobian_bezier(vol)
        L = lipschitz_bound(field)
        n = int(np.ceil(L / 0.5)) + 2
        pts = _cell_grid(np.array([[0.0, 1.0]] * 3), n)
        m = field.evaluate(pts).min()
        h = fill_distance(pts)
        if h < m / L:
            dense = field.evaluate(rng.uniform(0, 1, (20000, 3)))
            assert dense.min() > 0
        else:
            pytest.skip("grid too coarse for the sufficient condition")
