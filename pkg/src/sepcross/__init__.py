"""Separatrix crossing in slow-fast Hamiltonian systems.

Geometry of figure-eight separatrices, flux integrals and capture
probabilities, the averaged slow flow glued across the separatrix, full
perturbed trajectories and Monte Carlo capture ensembles.
"""
__version__ = "0.1.0"

from .averaged import AveragedSolution, averaged_rhs, integrate_averaged
from .ensemble import (EnsembleReport, EnsembleSpec, anosov_sweep, error_scaling_sweep,
                       run_capture_experiment, sample_initials)
from .errors import (ConditionCViolation, ConfigError, DomainError, GeometryError,
                     IntegrationError, NearSeparatrixError, PreconditionError, SepcrossError)
from .geometry import (from_action_angle, locate_saddle, orbit_integrals, period_asymptotics,
                       saddle_frame, separatrix, to_action_angle, trace_separatrix)
from .model import (PRESETS, SlowFastSystem, make_preset, normalize_energy, validate_hypotheses,
                    vector_field)
from .perturbed import classify_capture, compare_to_averaged, integrate_full
from .theta import ThetaContext, capture_probability, compute_theta

__all__ = [
    "AveragedSolution", "averaged_rhs", "integrate_averaged", "EnsembleReport", "EnsembleSpec",
    "anosov_sweep", "error_scaling_sweep", "run_capture_experiment", "sample_initials",
    "ConditionCViolation", "ConfigError", "DomainError", "GeometryError", "IntegrationError",
    "NearSeparatrixError", "PreconditionError", "SepcrossError", "from_action_angle",
    "locate_saddle", "orbit_integrals", "period_asymptotics", "saddle_frame", "separatrix",
    "to_action_angle", "trace_separatrix", "PRESETS", "SlowFastSystem", "make_preset",
    "normalize_energy", "validate_hypotheses", "vector_field", "classify_capture",
    "compare_to_averaged", "integrate_full", "ThetaContext", "capture_probability",
    "compute_theta",
]
