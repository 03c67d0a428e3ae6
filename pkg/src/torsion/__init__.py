"""Nonlinear elastoplastic torsion: finite-difference forward solver and ensemble Kalman
recovery of the Ramberg-Osgood parameters ``(kappa, xi0_sq, G)`` from torque data."""
from .estimator import TorsionParameterEstimator
from .forward import ForwardResult, solve_forward, solve_forward_many
from .grid import GridSpec, ScalarField, make_field, torque
from .irekm import InversionTrace, PriorSpec, run_irekm
from .observe import AngleSet, ObservationSet, SolverSettings, generate_data, observe
from .plasticity import MaterialParams, ramberg_osgood, rational

__all__ = [
    "AngleSet",
    "ForwardResult",
    "GridSpec",
    "InversionTrace",
    "MaterialParams",
    "ObservationSet",
    "PriorSpec",
    "ScalarField",
    "SolverSettings",
    "TorsionParameterEstimator",
    "generate_data",
    "make_field",
    "observe",
    "ramberg_osgood",
    "rational",
    "run_irekm",
    "solve_forward",
    "solve_forward_many",
    "torque",
]
__version__ = "0.1.0"
