"""Tests for model files, configuration and VTK export."""

import json

import numpy as np
import pytest

from conftest import random_volume
from volparam.bspline import BSplineVolume, affine_volume, identity_volume
from volparam.errors import KnotVectorError, ModelFileError, RationalInputError
from volparam.fixtures import twisted_cube
from volparam.io import (
    PipelineConfig,
    doc_to_model,
    dumps_json,
    export_vtk,
    parse_model,
    serialize_model,
    surfaces_to_doc,
    volume_to_doc,
    write_model,
)


def _write(tmp_path, doc, name="m.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


class TestModelFiles:
    def test_identity_round_trip(self, tmp_path):
        p = tmp_path / "id.json"
        write_model(identity_volume(), p)
        vol = parse_model(p)
        assert isinstance(vol, BSplineVolume)
        assert np.allclose(vol.evaluate([0.5, 0.5, 0.5]), [0.5, 0.5, 0.5], atol=1e-15)

    def test_bitwise_round_trip(self, tmp_path, rng):
        vol = random_volume(rng)
        vol = vol.with_ctrl(vol.ctrl * np.pi / 7.0)
        p = tmp_path / "r.json"
        write_model(vol, p)
        back = parse_model(p)
        assert np.array_equal(back.ctrl, vol.ctrl)
        assert all(np.array_equal(a.knots, b.knots) for a, b in zip(back.knots, vol.knots))
        assert serialize_model(back) == serialize_model(vol)

    def test_surface_set_round_trip(self, tmp_path):
        faces = twisted_cube(n_ctrl=(5, 6, 7)).faces()
        p = tmp_path / "s.json"
        write_model(faces, p)
        back = parse_model(p)
        assert list(back) == list(faces)
        for lab in faces:
            assert np.array_equal(back[lab].ctrl, faces[lab].ctrl)

    def test_first_index_fastest(self):
        vol = identity_volume((1, 1, 1), (2, 2, 2))
        rows = volume_to_doc(vol)["control_points"]
        assert rows[1] == [1.0, 0.0, 0.0]
        assert rows[2] == [0.0, 1.0, 0.0]

    def test_decreasing_knot(self, tmp_path):
        doc = volume_to_doc(identity_volume((2, 2, 2), (4, 4, 4)))
        doc["knots"][1] = [0, 0, 0, 0.7, 0.3, 1, 1, 1]
        with pytest.raises(KnotVectorError, match="non-monotone knot vector in direction eta"):
            parse_model(_write(tmp_path, doc))

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"version": 1,\n "kind": ')
        with pytest.raises(ModelFileError, match="line 2"):
            parse_model(p)

    def test_version(self, tmp_path):
        doc = volume_to_doc(identity_volume())
        doc["version"] = 2
        with pytest.raises(ModelFileError, match="version"):
            parse_model(_write(tmp_path, doc))

    def test_missing_and_duplicate_faces(self):
        doc = surfaces_to_doc(identity_volume().faces())
        short = dict(doc, faces=doc["faces"][:5])
        with pytest.raises(ModelFileError, match="missing faces: zeta1"):
            doc_to_model(short)
        dup = dict(doc, faces=doc["faces"] + [doc["faces"][0]])
        with pytest.raises(ModelFileError, match="duplicate face xi0"):
            doc_to_model(dup)

    def test_weights_rejected(self):
        doc = volume_to_doc(identity_volume())
        doc["weights"] = [1.0] * 64
        with pytest.raises(RationalInputError):
            doc_to_model(doc)

    def test_shape_mismatch(self):
        doc = volume_to_doc(identity_volume())
        doc["control_points"] = doc["control_points"][:-1]
        with pytest.raises(ModelFileError):
            doc_to_model(doc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFileError, match="cannot read"):
            parse_model(tmp_path / "nope.json")


class TestJson:
    def test_seventeen_digits(self):
        text = dumps_json({"x": 0.1, "n": 3, "y": [1.0, 2.5e-20]})
        assert "0.10000000000000001" in text
        assert json.loads(text) == {"x": 0.1, "n": 3, "y": [1.0, 2.5e-20]}

    def test_non_finite(self):
        with pytest.raises(ModelFileError):
            dumps_json({"x": float("inf")})


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.delta == 1e-2 and cfg.lam == 1.0 and cfg.max_level == 3

    def test_round_trip(self):
        cfg = PipelineConfig(delta=3e-2, sigma=0.5, dvol_grid=(2, 3, 4))
        back = PipelineConfig.from_dict(json.loads(cfg.to_json()))
        assert back == cfg

    @pytest.mark.parametrize("bad", [{"delta": 0.0}, {"lam": -1.0}, {"mips_max_iter": 0}, {"dvol_grid": (1, 0, 1)}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys: epsilon"):
            PipelineConfig.from_dict({"epsilon": 1.0})


class TestVTK:
    def test_identity_corners(self, tmp_path):
        p = tmp_path / "id.vtk"
        export_vtk(identity_volume(), p, resolution=2)
        lines = p.read_text().splitlines()
        assert lines[3] == "DATASET STRUCTURED_GRID"
        assert lines[4] == "DIMENSIONS 2 2 2"
        pts = np.array([[float(v) for v in ln.split()] for ln in lines[6:14]])
        assert sorted(map(tuple, pts)) == sorted((i, j, k) for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0))
        i = lines.index("SCALARS detJ double 1")
        assert [float(v) for v in lines[i + 2 : i + 10]] == pytest.approx([1.0] * 8, abs=1e-14)

    def test_counts_and_affine_points(self, tmp_path):
        A = np.array([[2.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.0, 0.0, 3.0]])
        vol = affine_volume(A, b=(1.0, 2.0, 3.0), n_ctrl=(5, 5, 5))
        p = tmp_path / "a.vtk"
        export_vtk(vol, p, resolution=(3, 4, 5), fields=("detJ", "kappa", "orth", "dvol"))
        lines = p.read_text().splitlines()
        assert lines[4] == "DIMENSIONS 3 4 5"
        assert lines[5] == "POINTS 60 double"
        pts = np.array([[float(v) for v in ln.split()] for ln in lines[6:66]])
        u = [np.linspace(0, 1, n) for n in (3, 4, 5)]
        lat = np.stack(np.meshgrid(*u, indexing="ij"), -1).transpose(2, 1, 0, 3).reshape(-1, 3)
        assert np.abs(pts - (lat @ A.T + [1.0, 2.0, 3.0])).max() < 1e-12
        assert lines[66] == "POINT_DATA 60"
        assert sum(ln.startswith("SCALARS") for ln in lines) == 4

    def test_deterministic(self, tmp_path):
        vol = twisted_cube(n_ctrl=(5, 5, 5))
        export_vtk(vol, tmp_path / "a.vtk", 5, ("kappa",))
        export_vtk(vol, tmp_path / "b.vtk", 5, ("kappa",))
        assert (tmp_path / "a.vtk").read_bytes() == (tmp_path / "b.vtk").read_bytes()

    def test_bad_arguments(self, tmp_path):
        with pytest.raises(ValueError):
            export_vtk(identity_volume(), tmp_path / "x.vtk", resolution=1)
        with pytest.raises(ValueError):
            export_vtk(identity_volume(), tmp_path / "x.vtk", fields=("jacobian",))
