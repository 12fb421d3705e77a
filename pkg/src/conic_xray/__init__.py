"""Geodesic X-ray transform on asymptotically conic collars.

Submodules
----------
link_geometry     cross-section metrics, link geodesics, link grids
conic_manifold    warped conic metric and scattering covectors
geodesic_flow     rescaled geodesic tracing, foliation and conjugate-point checks
xray_transform    grid functions and the weighted forward transform
normal_operator   localized normal operator, matrix assembly and storage
onecusp_calculus  parabolic quantization, principal symbol, ellipticity scan
inversion         iterative reconstruction and injectivity probe
cli               command-line runner
"""

from __future__ import annotations

__version__ = "0.1.0"

from .conic_manifold import ConicMetric, ScCovector
from .errors import (
    ArgumentError,
    CertificationError,
    ConfigError,
    ConicXrayError,
    ContractViolation,
    DomainError,
    FoliationViolation,
    IntegrationFailure,
    SizeError,
    StagnationError,
)
from .geodesic_flow import TraceOptions, certify, trace
from .inversion import ReconstructionConfig, injectivity_probe, reconstruct
from .link_geometry import LinkGrid, LinkMetric, LinkState
from .normal_operator import CollarGrid, Localizer, NormalOperator, WeightSpec, apply_normal, assemble_matrix
from .onecusp_calculus import ParabolicSymbol, compose_check, ellipticity_scan, principal_symbol, quantize
from .xray_transform import AnalyticFunction, DecayClass, GridFunction, forward

__all__ = [
    "AnalyticFunction", "ArgumentError", "CertificationError", "CollarGrid", "ConfigError", "ConicMetric",
    "ConicXrayError", "ContractViolation", "DecayClass", "DomainError", "FoliationViolation", "GridFunction",
    "IntegrationFailure", "LinkGrid", "LinkMetric", "LinkState", "Localizer", "NormalOperator", "ParabolicSymbol",
    "ReconstructionConfig", "ScCovector", "SizeError", "StagnationError", "TraceOptions", "WeightSpec",
    "apply_normal", "assemble_matrix", "certify", "compose_check", "ellipticity_scan", "forward",
    "injectivity_probe", "principal_symbol", "quantize", "reconstruct", "trace",
]
