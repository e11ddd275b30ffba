"""Pseudospectral simulation of the negative-gradient Q-curvature flow.

Model geometries are the flat torus and the round sphere restricted to zonal
functions, in even dimensions 2, 4 and 6.
"""
from .diagnostics import (
    DiagnosticsSeries,
    check_flow_identities,
    detect_concentration,
    estimate_lojasiewicz,
    fit_rate,
)
from .flow import FlowConfig, FlowState, lambda_of, project_constraint, rhs, run_flow, step
from .geometry import (
    GridField,
    SpectralField,
    center_of_mass,
    dilation,
    integrate,
    make_geometry,
    pullback,
    to_grid,
    to_spectral,
)
from .operators import (
    apply_gjms,
    check_beckner,
    energy,
    gjms_multiplier,
    make_background,
    q_curvature,
    sobolev_norm,
    threshold,
    total_q,
)
from .stationary import direct_minimize, hessian_coercivity, newton_refine, residual

__version__ = "0.1.0"

__all__ = [
    "DiagnosticsSeries",
    "check_flow_identities",
    "detect_concentration",
    "estimate_lojasiewicz",
    "fit_rate",
    "FlowConfig",
    "FlowState",
    "lambda_of",
    "project_constraint",
    "rhs",
    "run_flow",
    "step",
    "GridField",
    "SpectralField",
    "center_of_mass",
    "dilation",
    "integrate",
    "make_geometry",
    "pullback",
    "to_grid",
    "to_spectral",
    "apply_gjms",
    "check_beckner",
    "energy",
    "gjms_multiplier",
    "make_background",
    "q_curvature",
    "sobolev_norm",
    "threshold",
    "total_q",
    "direct_minimize",
    "hessian_coercivity",
    "newton_refine",
    "residual",
]
