"""Tests for the command-line interface."""

import json

import numpy as np
import pytest

from volparam.cli import main, skeleton_knots
from volparam.fixtures import twisted_cube
from volparam.bspline import identity_volume
from volparam.io import parse_model, volume_to_doc


@pytest.fixture
def cube_faces(tmp_path):
    p = tmp_path / "cube_faces.json"
    assert main(["fixture", "straight_cube", "--out", str(p)]) == 0
    return p


class TestPipeline:
    def test_straight_cube(self, tmp_path, cube_faces, capsys):
        out = tmp_path / "run"
        assert main(["pipeline", str(cube_faces), "--out", str(out)]) == 0
        vol = parse_model(out / "volume.json")
        ident = identity_volume((3, 3, 3), (5, 5, 5))
        assert np.abs(vol.ctrl - ident.ctrl).max() < 1e-8
        assert json.loads((out / "certificate.json").read_text())["status"] == "Certified"
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["delta"] == 1e-2 and cfg["cert_delta"] == 1e-3
        for name in ("quality.json", "trace.log", "timings.json"):
            assert (out / name).exists()
        assert "status=Certified exit=0" in capsys.readouterr().out

    def test_flags_and_config_file(self, tmp_path, cube_faces):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"lam": 2.0, "samples": 5}))
        out = tmp_path / "run"
        args = ["pipeline", str(cube_faces), "--out", str(out), "--config", str(conf), "--delta", "0.02", "--seed", "4"]
        assert main(args) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert (cfg["lam"], cfg["samples"], cfg["delta"], cfg["seed"]) == (2.0, 5, 0.02, 4)

    def test_byte_identical_reruns(self, tmp_path):
        runs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert main(["pipeline", "fixture:tapered_block", "--out", str(out)]) == 0
            runs.append(out)
        for name in ("volume.json", "certificate.json", "quality.json", "config.json", "trace.log"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()


class TestSubcommands:
    def test_certify_folded(self, tmp_path, capsys):
        rep = tmp_path / "cert.json"
        assert main(["certify", "fixture:folded_volume", "--out", str(rep)]) == 3
        out = capsys.readouterr().out
        assert "status=Indeterminate" in out
        assert "failing cells:" in out
        cells = [int(c) for c in out.split("failing cells:")[1].split()]
        doc = json.loads(rep.read_text())
        assert cells == [c["cell"] for c in doc["cells"] if c["status"] == "Indeterminate"]
        assert cells

    def test_metrics_identity(self, capsys):
        assert main(["metrics", "fixture:straight_cube"]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert float(line.split()[0]) == pytest.approx(3.0, abs=1e-12)

    def test_harmonic_then_refine(self, tmp_path):
        faces = tmp_path / "faces.json"
        assert main(["fixture", "twisted_cube", "--out", str(faces)]) == 0
        h = tmp_path / "h.json"
        assert main(["harmonic", str(faces), "--out", str(h)]) == 0
        r = tmp_path / "r.json"
        assert main(["refine", str(h), "--out", str(r)]) == 0
        assert parse_model(r).shape == (8, 8, 8)

    def test_bijectify_trace(self, tmp_path):
        vol = tmp_path / "v.json"
        assert main(["fixture", "straight_cube", "--kind", "volume", "--out", str(vol)]) == 0
        trace = tmp_path / "trace.txt"
        assert main(["bijectify", str(vol), "--out", str(tmp_path / "b.json"), "--trace", str(trace)]) == 0
        assert trace.exists()

    def test_export(self, tmp_path):
        p = tmp_path / "x.vtk"
        assert main(["export", "fixture:twisted_cube", "--out", str(p), "--resolution", "3", "--fields", "detJ,orth"]) == 0
        assert "SCALARS orth double 1" in p.read_text()


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["frobnicate"]) == 1
        assert main([]) == 1
        assert main(["export", "fixture:straight_cube", "--out", "x.vtk", "--fields", "bogus"]) == 1
        assert main(["certify", "fixture:straight_cube", "--delta", "-1"]) == 1
        assert "error" in capsys.readouterr().err

    def test_invalid_inputs(self, tmp_path, capsys):
        assert main(["certify", str(tmp_path / "missing.json")]) == 2
        doc = volume_to_doc(identity_volume((2, 2, 2), (4, 4, 4)))
        doc["knots"][2] = [0, 0, 0, 0.8, 0.2, 1, 1, 1]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["certify", str(bad)]) == 2
        assert "zeta" in capsys.readouterr().err
        assert main(["certify", "fixture:no_such_thing"]) == 2

    def test_uncertified_refine_input(self, tmp_path):
        assert main(["refine", "fixture:folded_volume", "--out", str(tmp_path / "o.json")]) == 2

    def test_surface_set_where_volume_needed(self, cube_faces):
        assert main(["certify", str(cube_faces)]) == 2


class TestSkeleton:
    def test_knots_from_faces(self):
        vol = twisted_cube(n_ctrl=(5, 6, 7))
        kx, ky, kz = skeleton_knots(vol.faces())
        assert (kx.n_basis, ky.n_basis, kz.n_basis) == (5, 6, 7)
