"""Model files (JSON), pipeline configuration and legacy VTK export."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .bspline import AXIS_NAMES, FACE_LABELS, BSplineSurface, BSplineVolume, KnotVector
from .errors import KnotVectorError, ModelFileError, RationalInputError
from .metrics import sample_fields, sample_lattice

FORMAT_VERSION = 1
KINDS = ("volume", "surface_set")
VTK_FIELDS = ("detJ", "kappa", "orth", "dvol")


# ---------------------------------------------------------------------------
# JSON writing with 17 significant digits
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ModelFileError("cannot serialize a non-finite number")
        s = "%.17g" % x
        # keep the token a JSON float so that it parses back as float
        return s if any(c in s for c in ".en") else s + ".0"
    if x is None:
        return "null"
    return json.dumps(x)


def _dump(obj, indent: int = 0) -> str:
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad} {json.dumps(str(k))}: {_dump(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_fmt(v) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + " " + _dump(v, indent + 1) for v in seq) + "\n" + pad + "]"
    return _fmt(obj)


def dumps_json(obj) -> str:
    """Deterministic JSON text with every float written as ``%.17g``."""
    return _dump(obj) + "\n"


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _knots_doc(kv: KnotVector) -> dict:
    return {"degree": kv.degree, "knots": kv.knots.tolist()}


def _grid_rows(ctrl: np.ndarray) -> list:
    """Control grid rows with the first index fastest."""
    nd = ctrl.ndim - 1
    perm = tuple(range(nd))[::-1] + (nd,)
    return ctrl.transpose(perm).reshape(-1, 3).tolist()


def volume_to_doc(vol: BSplineVolume) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "volume",
        "degrees": list(vol.degrees),
        "knots": [kv.knots.tolist() for kv in vol.knots],
        "shape": list(vol.shape),
        "control_points": _grid_rows(np.asarray(vol.ctrl)),
    }


def surfaces_to_doc(faces) -> dict:
    if isinstance(faces, dict):
        faces = [faces[lab] for lab in FACE_LABELS if lab in faces]
    return {
        "version": FORMAT_VERSION,
        "kind": "surface_set",
        "faces": [
            {
                "label": f.label,
                "degrees": [kv.degree for kv in f.knots],
                "knots": [kv.knots.tolist() for kv in f.knots],
                "shape": [kv.n_basis for kv in f.knots],
                "control_points": _grid_rows(np.asarray(f.ctrl)),
            }
            for f in faces
        ],
    }


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ModelFileError(f"{where}: missing field {key!r}")
    return doc[key]


def _parse_knots(doc, n: int, names, where) -> tuple:
    degrees = _require(doc, "degrees", where)
    knots = _require(doc, "knots", where)
    if len(degrees) != n or len(knots) != n:
        raise ModelFileError(f"{where}: expected {n} degrees and knot vectors")
    out = []
    for d in range(n):
        try:
            out.append(KnotVector(int(degrees[d]), np.asarray(knots[d], dtype=np.float64), names[d]))
        except KnotVectorError as exc:
            raise KnotVectorError(f"{where}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ModelFileError(f"{where}: knot vector {names[d]} is not numeric ({exc})") from None
    return tuple(out)


def _parse_grid(doc, knots, where) -> np.ndarray:
    if "weights" in doc:
        raise RationalInputError(f"{where}: rational (weighted) control points are not supported")
    shape = tuple(kv.n_basis for kv in knots)
    if "shape" in doc and tuple(doc["shape"]) != shape:
        raise ModelFileError(f"{where}: declared shape {tuple(doc['shape'])} does not match the knot vectors {shape}")
    try:
        pts = np.asarray(_require(doc, "control_points", where), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"{where}: control points are not numeric ({exc})") from None
    if pts.shape != (int(np.prod(shape)), 3):
        raise ModelFileError(f"{where}: expected {int(np.prod(shape))} control points of dimension 3, got {pts.shape}")
    grid = pts.reshape(shape[::-1] + (3,))
    n = len(shape)
    return grid.transpose(tuple(range(n))[::-1] + (n,))


def doc_to_model(doc):
    """Volume or ``{label: BSplineSurface}`` from a parsed document."""
    if not isinstance(doc, dict):
        raise ModelFileError("model file must contain a JSON object")
    version = _require(doc, "version", "model")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported format version {version!r} (expected {FORMAT_VERSION})")
    kind = _require(doc, "kind", "model")
    if kind == "volume":
        knots = _parse_knots(doc, 3, AXIS_NAMES, "volume")
        return BSplineVolume(knots, _parse_grid(doc, knots, "volume"))
    if kind == "surface_set":
        faces = {}
        for k, fd in enumerate(_require(doc, "faces", "surface_set")):
            label = _require(fd, "label", f"face #{k}")
            if label not in FACE_LABELS:
                raise ModelFileError(f"unknown face label {label!r}")
            if label in faces:
                raise ModelFileError(f"duplicate face {label}")
            axis = FACE_LABELS.index(label) // 2
            names = [AXIS_NAMES[d] for d in range(3) if d != axis]
            knots = _parse_knots(fd, 2, names, f"face {label}")
            faces[label] = BSplineSurface(label, knots, _parse_grid(fd, knots, f"face {label}"))
        missing = [lab for lab in FACE_LABELS if lab not in faces]
        if missing:
            raise ModelFileError(f"missing faces: {', '.join(missing)}")
        return {lab: faces[lab] for lab in FACE_LABELS}
    raise ModelFileError(f"unknown model kind {kind!r} (expected one of {', '.join(KINDS)})")


def parse_model(path):
    """Read a model file; returns a :class:`BSplineVolume` or a dict of six faces.

    Raises
    ------
    ModelFileError
        Malformed JSON, wrong version or kind, missing or duplicate faces,
        shape mismatches.
    KnotVectorError
        Invalid knot vectors (the message names the direction).
    RationalInputError
        Weighted control points.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return doc_to_model(doc)


def serialize_model(model) -> str:
    if isinstance(model, BSplineVolume):
        return dumps_json(volume_to_doc(model))
    return dumps_json(surfaces_to_doc(model))


def write_model(model, path) -> None:
    Path(path).write_text(serialize_model(model))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Every knob of the three-stage pipeline; written next to each output."""

    delta: float = 1e-2
    cert_delta: float = 1e-3
    lam: float = 1.0
    sigma: float | None = None
    max_level: int = 3
    cert_depth: int = 3
    pcg_tol: float = 1e-10
    solver_tol: float = 1e-7
    solver_max_iter: int = 300
    max_refine_rounds: int = 3
    mips_grad_tol: float = 1e-6
    mips_max_iter: int = 500
    quad_order: int | None = None
    dvol_grid: tuple = (4, 4, 4)
    samples: int = 33
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        self.dvol_grid = tuple(int(g) for g in self.dvol_grid)
        self.validate()

    def validate(self) -> None:
        if not self.delta > 0 or not self.cert_delta > 0:
            raise ValueError("delta must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_level < 0 or self.cert_depth < 0:
            raise ValueError("max_level and cert_depth must be non-negative")
        for name in ("solver_max_iter", "mips_max_iter", "samples", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_refine_rounds < 0:
            raise ValueError("max_refine_rounds must be non-negative")
        if min(self.dvol_grid) < 1 or len(self.dvol_grid) != 3:
            raise ValueError("dvol_grid needs three positive entries")
        if self.quad_order is not None and self.quad_order < 1:
            raise ValueError("quad_order must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dvol_grid"] = list(self.dvol_grid)
        return d

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------


def _vtk_num(x: float) -> str:
    return "%.17g" % float(x)


def export_vtk(vol: BSplineVolume, path, resolution=17, fields=("detJ",)) -> None:
    """Write an ASCII legacy VTK structured grid sampled on a uniform lattice.

    Parameters
    ----------
    resolution : int or three ints
        Lattice points per direction (at least 2).
    fields : subset of ``{"detJ", "kappa", "orth", "dvol"}``
        Point scalars; infinite kappa (singular points) is written as 1e300.
    """
    res = (int(resolution),) * 3 if np.ndim(resolution) == 0 else tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 2:
        raise ValueError("resolution must be at least 2 in every direction")
    bad = [f for f in fields if f not in VTK_FIELDS]
    if bad:
        raise ValueError(f"unknown VTK fields: {', '.join(bad)}")
    pts = sample_lattice(res)
    xyz = vol.evaluate(pts)
    lines = [
        "# vtk DataFile Version 3.0",
        "volparam B-spline volume",
        "ASCII",
        "DATASET STRUCTURED_GRID",
        f"DIMENSIONS {res[0]} {res[1]} {res[2]}",
        f"POINTS {xyz.shape[0]} double",
    ]
    lines += [" ".join(_vtk_num(v) for v in p) for p in xyz]
    if fields:
        vals = sample_fields(vol, pts)
        lines.append(f"POINT_DATA {xyz.shape[0]}")
        for name in fields:
            data = np.where(np.isfinite(vals[name]), vals[name], 1e300)
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_vtk_num(v) for v in data]
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = [
    "FORMAT_VERSION",
    "dumps_json",
    "volume_to_doc",
    "surfaces_to_doc",
    "doc_to_model",
    "parse_model",
    "serialize_model",
    "write_model",
    "PipelineConfig",
    "export_vtk",
]
