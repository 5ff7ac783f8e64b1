"""Galerkin simulation, hypothesis certification and feedback optimization
for controlled stochastic evolution equations of monotone type."""

from .control import CostSpec, FeedbackFamily, convergence_diag, estimate_cost, minimize
from .energy import GapWeights, aldous_statistic, energy_stats, uniqueness_gap
from .feedback import ControlParams, SaturatedAffineFeedback, linear_feedback, zero_feedback
from .hypotheses import CheckReport, run_checks
from .kernels import BACKEND
from .operators import (make_convection_diffusion, make_heat, make_quasilinear,
                        make_sign_flipped_heat, make_step_operator)
from .sim import SimConfig, run_ensemble, simulate_auxiliary, simulate_path
from .space import StateVec, build_space

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CheckReport", "ControlParams", "CostSpec", "FeedbackFamily", "GapWeights",
    "SaturatedAffineFeedback", "SimConfig", "StateVec", "aldous_statistic", "build_space",
    "convergence_diag", "energy_stats", "estimate_cost", "linear_feedback",
    "make_convection_diffusion", "make_heat", "make_quasilinear", "make_sign_flipped_heat",
    "make_step_operator", "minimize", "run_checks", "run_ensemble", "simulate_auxiliary",
    "simulate_path", "uniqueness_gap", "zero_feedback",
]
