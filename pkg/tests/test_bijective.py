"""Tests for the certified max-min stage."""

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import perturbed_identity, random_volume
from volparam.bijective import (
    BijectifyParams,
    CollocationParams,
    MaxMinProblem,
    alternative_constraint_count,
    assign_owners,
    bijectify,
    candidate_mask,
    collocation_counts,
    generate_collocation,
    local_offset_refine,
    plan_subregions,
    point_owners,
    solve_constrained,
    subregion_boxes,
    support_boxes,
)
from volparam.bspline import BSplineVolume, identity_volume
from volparam.certify import CellVerdict, CertificateReport, certify_volume, jacobian_bezier
from volparam.errors import VolParamError
from volparam.fixtures import dented_cube, tapered_block
from volparam.harmonic import harmonic_map, quadrature_energy
from volparam.quadrature import cell_rule


def _counts_oracle(g, level, ratio, base, sigma):
    """The budget formula written out term by term."""
    g_max = max(g)
    ex = [np.exp(-((gi - g_max) ** 2) / sigma) for gi in g]
    total = sum(ex)
    return [int(np.ceil(2.0 ** (3 * level + 9) * (base / 512.0) * ratio * e / total - 1e-9)) for e in ex]


def _report_with_failing(vol, cells):
    boxes = vol.cell_boxes()
    verdicts = [CellVerdict(g, g not in cells, 0, 1.0, [boxes[g]] if g in cells else []) for g in range(vol.n_cells)]
    return CertificateReport(1e-3, 3, verdicts)


class TestCollocationCounts:
    def test_equal_weights(self):
        counts = collocation_counts(np.full(8, 2.5), level=0, vol_ratio=1.0)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() >= 512

    def test_formula_oracle(self, rng):
        g = rng.uniform(0, 3, 8)
        for level in range(3):
            for sigma in (0.5, 4.0):
                got = collocation_counts(g, level, 0.125, 512.0, sigma)
                assert got.tolist() == _counts_oracle(g.tolist(), level, 0.125, 512.0, sigma)

    def test_concentrated_gradient(self):
        g = np.array([10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
        counts = collocation_counts(g, 1, 1.0)
        assert counts[0] == counts[1] == counts.max()
        assert counts[2] < counts[0]

    def test_default_sigma(self):
        g = np.array([4.0, 0.0])
        # sigma = (g_max / 2)^2 = 4, so the weights are 1 : e^-4
        c = collocation_counts(g, 0, 1.0)
        assert c.tolist() == _counts_oracle([4.0, 0.0], 0, 1.0, 512.0, 4.0)


class TestGenerateCollocation:
    def test_certified_report_clears(self, cubic_identity, rng):
        field = jacobian_bezier(cubic_identity)
        rep = certify_volume(cubic_identity)
        bad = _report_with_failing(cubic_identity, [0])
        _, P = generate_collocation(bad, field, 0)
        assert len(P) > 0
        delta, kept = generate_collocation(rep, field, 1, existing=P)
        assert len(delta) == 0 and len(kept) == 0

    def test_points_in_boxes(self, rng):
        vol = perturbed_identity(rng, n_ctrl=(6, 6, 6), amp=0.05)
        field = jacobian_bezier(vol)
        rep = _report_with_failing(vol, [0, 7, 20])
        delta, P = generate_collocation(rep, field, 0, CollocationParams(base=64))
        boxes = vol.cell_boxes()[P.cell]
        assert np.all((P.points >= boxes[:, :, 0]) & (P.points <= boxes[:, :, 1]))
        assert set(np.unique(P.cell).tolist()) == {0, 7, 20}
        d = np.linalg.norm(P.points[:, None] - P.points[None], axis=-1)
        np.fill_diagonal(d, 1.0)
        assert d.min() > 1e-12

    def test_levels_accumulate(self, cubic_identity):
        field = jacobian_bezier(cubic_identity)
        rep = _report_with_failing(cubic_identity, [3])
        p = CollocationParams(base=8)
        d0, P0 = generate_collocation(rep, field, 0, p)
        d1, P1 = generate_collocation(rep, field, 1, p, P0)
        assert len(P1) == len(P0) + len(d1)
        # budget base * 8**level, rounded up per sub-cuboid
        assert len(d0) >= 8 and len(d1) >= 64
        assert set(P1.level.tolist()) == {0, 1}

    def test_deterministic(self, cubic_identity):
        field = jacobian_bezier(cubic_identity)
        rep = _report_with_failing(cubic_identity, [1, 2])
        a, _ = generate_collocation(rep, field, 0)
        b, _ = generate_collocation(rep, field, 0)
        assert np.array_equal(a.points, b.points)


class TestSubregions:
    def test_boxes_tile(self):
        boxes = subregion_boxes()
        assert np.isclose(np.prod(boxes[:, :, 1] - boxes[:, :, 0], axis=1).sum(), 1.0)
        assert np.array_equal(boxes[1], [[0.5, 1.0], [0.0, 0.5], [0.0, 0.5]])

    def test_certified_plan_empty(self, cubic_identity):
        plan = plan_subregions(cubic_identity, certify_volume(cubic_identity))
        assert plan.free_counts().sum() == 0

    def test_single_failing_cell(self):
        vol = identity_volume((3, 3, 3), (8, 8, 8))
        rep = _report_with_failing(vol, [0])
        plan = plan_subregions(vol, rep)
        counts = plan.free_counts()
        assert counts[0] > 0 and counts[1:].sum() == 0
        # direct enumeration of supports meeting the failing cell's interior
        box = vol.cell_boxes()[0]
        expect = np.zeros(vol.shape, dtype=bool)
        for i in range(1, 7):
            for j in range(1, 7):
                for k in range(1, 7):
                    ok = True
                    for d, ii in enumerate((i, j, k)):
                        kv = vol.knots[d]
                        lo, hi = kv.knots[ii], kv.knots[ii + kv.degree + 1]
                        ok &= min(hi, box[d, 1]) > max(lo, box[d, 0])
                    expect[i, j, k] = ok
        assert np.array_equal(plan.owner == 0, expect)

    def test_owners_disjoint(self, rng):
        vol = perturbed_identity(rng, n_ctrl=(8, 8, 8))
        cand = ~vol.boundary_mask()
        owner = assign_owners(vol, cand, subregion_boxes())
        assert np.all(owner[cand] >= 0)
        assert np.all(owner[~cand] == -1)
        counts = [np.count_nonzero(owner == i) for i in range(8)]
        assert sum(counts) == cand.sum()

    def test_point_owners(self):
        pts = np.array([[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.5, 0.5, 0.5], [0.9, 0.9, 0.9]])
        assert point_owners(pts, subregion_boxes()).tolist() == [0, 1, 0, 7]

    def test_support_boxes(self, cubic_identity):
        sup = support_boxes(cubic_identity.knots)
        assert np.array_equal(sup[0, 0, 0], [[0.0, 0.5]] * 3)
        assert np.array_equal(sup[2, 2, 2], [[0.0, 1.0]] * 3)


class TestMaxMinProblem:
    def test_identity_values(self, cubic_identity, rng):
        prob = MaxMinProblem(cubic_identity, rng.uniform(0, 1, (20, 3)))
        z = prob.pack(cubic_identity, 0.5)
        assert np.allclose(prob.dets(z), 1.0, atol=1e-13)
        f, g = prob.objective(z)
        # the solver minimizes -t + lam E, so d/dt = -1
        assert g[-1] == -1.0
        assert abs(f + 0.5) < 1e-12

    def test_empty_points(self, cubic_identity):
        with pytest.raises(VolParamError):
            MaxMinProblem(cubic_identity, np.zeros((0, 3)))

    def test_constraint_locality(self, rng):
        vol = perturbed_identity(rng, n_ctrl=(7, 7, 7))
        pts = rng.uniform(0, 1, (15, 3))
        prob = MaxMinProblem(vol, pts)
        _, A = prob.constraints(prob.pack(vol, 0.1))
        A = A.toarray()
        # free controls are numbered with xi fastest
        order = prob.free_mask.transpose(2, 1, 0)
        sup = support_boxes(vol.knots).transpose(2, 1, 0, 3, 4)[order]
        for k, x in enumerate(pts):
            inside = np.all((x >= sup[:, :, 0]) & (x <= sup[:, :, 1]), axis=1)
            row = A[k, :-1].reshape(-1, 3)
            assert np.all(row[~inside] == 0.0)

    def test_gradients_finite_differences(self, rng):
        vol = random_volume(rng, n_inner=(1, 1, 1), scale=0.3)
        prob = MaxMinProblem(vol, rng.uniform(0, 1, (12, 3)), lam=0.7)
        z = prob.pack(vol, 0.2)
        c, A = prob.constraints(z)
        A = A.toarray()
        f, g = prob.objective(z)
        h = 1e-6
        for j in rng.choice(prob.n, 25, replace=False):
            e = np.zeros(prob.n)
            e[j] = h
            fd = (prob.constraints(z + e)[0] - prob.constraints(z - e)[0]) / (2 * h)
            assert np.allclose(A[:, j], fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))
            fo = (prob.objective(z + e)[0] - prob.objective(z - e)[0]) / (2 * h)
            assert abs(g[j] - fo) <= 1e-5 * max(1.0, abs(fo))

    def test_hessian_finite_differences(self, rng):
        vol = random_volume(rng, n_inner=(1, 0, 1), scale=0.3)
        prob = MaxMinProblem(vol, rng.uniform(0, 1, (8, 3)), lam=0.5)
        z = prob.pack(vol, 0.1)
        y = rng.uniform(0.1, 1.0, prob.m)

        def lag_grad(zz):
            _, g = prob.objective(zz)
            _, A = prob.constraints(zz)
            return g - A.T @ y

        H = prob.hessian(z, y)
        h = 1e-6
        for j in rng.choice(prob.n, 20, replace=False):
            e = np.zeros(prob.n)
            e[j] = h
            fd = (lag_grad(z + e) - lag_grad(z - e)) / (2 * h)
            assert np.allclose(H[:, j], fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))
        assert np.allclose(H, H.T, atol=1e-10)


class TestSolveConstrained:
    def test_identity_is_optimal(self):
        # Gauss nodes integrate det J exactly, so their weighted mean is the volume 1;
        # min det cannot exceed 1 and the identity (zero fairness) is optimal.
        vol = identity_volume((3, 3, 3), (5, 5, 5))
        rule = cell_rule(vol, (5, 5, 5))
        prob = MaxMinProblem(vol, rule.points, lam=1.0, delta=1e-2)
        res = solve_constrained(prob, tol=1e-9)
        assert np.abs(res.volume.ctrl - vol.ctrl).max() < 1e-6
        assert abs(res.t - 1.0) < 1e-6

    def test_independent_oracle(self):
        rng = np.random.default_rng(7)
        vol = tapered_block(0.4, degrees=(2, 2, 2), n_ctrl=(4, 4, 3))
        free = ~vol.boundary_mask()
        c = vol.ctrl.copy()
        c[free] += 0.08 * rng.normal(size=c[free].shape)
        vol = vol.with_ctrl(c)
        pts = rng.uniform(0, 1, (30, 3))
        lam, delta = 0.1, 1e-2
        prob = MaxMinProblem(vol, pts, lam=lam, delta=delta)
        assert prob.n <= 30 and prob.m <= 40
        res = solve_constrained(prob, tol=1e-9)

        idx = np.argwhere(free)

        def unpack(z):
            cc = vol.ctrl.copy()
            cc[tuple(idx.T)] = z[:-1].reshape(-1, 3)
            return BSplineVolume(vol.knots, cc)

        def f(z):
            v = unpack(z)
            return -z[-1] + lam * quadrature_energy(v.knots, v.flat_ctrl(), "hessian")

        def cons(z):
            v = unpack(z)
            return np.append(np.linalg.det(v.jacobian(pts)) - z[-1], z[-1] - delta)

        best = np.inf
        for s in range(4):
            z0 = np.append(vol.ctrl[free].reshape(-1) + 0.01 * s * rng.normal(size=3 * len(idx)), 0.0)
            r = minimize(f, z0, constraints=[{"type": "ineq", "fun": cons}], method="SLSQP", options={"maxiter": 500, "ftol": 1e-12})
            if r.success:
                best = min(best, r.fun)
        assert abs(res.objective - best) < 1e-4
        assert res.t >= delta - 1e-7
        assert res.min_det >= res.t - 1e-7


class TestLocalRefine:
    def test_reproduction_and_growth(self, rng):
        vol = perturbed_identity(rng, n_ctrl=(6, 6, 6))
        boxes = subregion_boxes()
        failing = vol.cell_boxes()[:1]
        before = assign_owners(vol, candidate_mask(vol, failing), boxes) == 0
        ref = local_offset_refine(vol, boxes[0], failing, 0, boxes)
        pts = rng.uniform(0, 1, (500, 3))
        assert np.abs(ref.volume.evaluate(pts) - vol.evaluate(pts)).max() < 1e-12
        assert ref.free_mask.sum() > before.sum()
        assert all(np.all((m > 0.0) & (m <= 0.5)) for m in ref.inserted)


class TestBijectify:
    def test_certified_input_untouched(self, cubic_identity):
        res = bijectify(cubic_identity)
        assert res.status == "certified"
        assert res.solver_calls == 0
        assert res.volume is cubic_identity

    def test_stiff_fixture_refines(self):
        target = dented_cube(0.7, 0.05, n_ctrl=(5, 5, 5))
        init = harmonic_map(target.faces(), target.knots).volume
        assert not certify_volume(init).certified
        res = bijectify(init, BijectifyParams())
        assert res.status == "certified"
        rounds = sum(t.refinements for t in res.trace)
        assert 1 <= rounds <= 2
        # refinement adds knots but never moves the boundary
        for lab, face in init.faces().items():
            pts = np.random.default_rng(0).uniform(0, 1, (50, 2))
            assert np.allclose(res.volume.face(lab).evaluate(pts[:, 0], pts[:, 1]), face.evaluate(pts[:, 0], pts[:, 1]), atol=1e-12)
        lines = res.trace_text().splitlines()
        assert lines[0].startswith("level=0 constraints=")

    def test_boundary_immutable(self):
        target = dented_cube()
        init = harmonic_map(target.faces(), target.knots).volume
        res = bijectify(init, BijectifyParams(max_level=1))
        assert res.volume.knots == init.knots
        for lab, face in init.faces().items():
            assert np.array_equal(res.volume.face(lab).ctrl, face.ctrl)
        assert res.status == "certified"
        final = res.trace[-1]
        assert final.n_constraints < alternative_constraint_count(init)

    def test_alternative_count(self, cubic_identity):
        assert alternative_constraint_count(cubic_identity) == 27 * 27 * 8
