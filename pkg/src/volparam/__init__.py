"""Certified-bijective trivariate B-spline volume parameterization.

Three stages turn six boundary surfaces into a volume: a harmonic
initialization, a max-min optimization of det J on adaptive collocation points
that ends with a Bernstein positivity certificate, and a conformal-distortion
refinement that keeps the certificate.
"""

from .bijective import BijectifyParams, BijectifyResult, bijectify
from .bspline import BSplineSurface, BSplineVolume, KnotVector, affine_volume, identity_volume, uniform_knots
from .certify import CertificateReport, certify_volume, jacobian_bezier
from .errors import (
    CompatibilityError,
    ConvergenceError,
    DegenerateBoundaryError,
    DomainError,
    InfeasibleError,
    KnotVectorError,
    ModelFileError,
    NotCertifiedError,
    NotSPDError,
    RationalInputError,
    RefinementLimitError,
    VolParamError,
)
from .harmonic import harmonic_map
from .io import PipelineConfig, export_vtk, parse_model, write_model
from .metrics import QualityReport, quality_report
from .mips import conformal_distortion, refine

__version__ = "0.1.0"

__all__ = [
    "BSplineVolume",
    "BSplineSurface",
    "KnotVector",
    "uniform_knots",
    "identity_volume",
    "affine_volume",
    "jacobian_bezier",
    "certify_volume",
    "CertificateReport",
    "harmonic_map",
    "bijectify",
    "BijectifyParams",
    "BijectifyResult",
    "refine",
    "conformal_distortion",
    "quality_report",
    "QualityReport",
    "parse_model",
    "write_model",
    "export_vtk",
    "PipelineConfig",
    "VolParamError",
    "DomainError",
    "KnotVectorError",
    "CompatibilityError",
    "RationalInputError",
    "DegenerateBoundaryError",
    "ModelFileError",
    "NotSPDError",
    "ConvergenceError",
    "InfeasibleError",
    "RefinementLimitError",
    "NotCertifiedError",
]
