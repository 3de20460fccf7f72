"""Sparse, multiplexed optimal control of linear ensembles via indirect shooting."""

from .dynamics import TimeGrid, Trajectory, rk4_integrate
from .ensemble import ActionSet, JointSystem, LinearSubsystem, assemble_joint, cart_pendulum, harmonic_oscillator
from .errors import MuxError, NoConvergence, NonFiniteState
from .pmp_law import ProblemMode, joint_control, riccati_closed_loop
from .shooting import ShootingProblem, SolveReport, SolverConfig, build_trajectory, residual, solve
from .verify import check_multiplexing, evaluate_costs, hamiltonian_trace, l0_norm

__version__ = "0.1.0"

__all__ = [
    "ActionSet",
    "JointSystem",
    "LinearSubsystem",
    "MuxError",
    "NoConvergence",
    "NonFiniteState",
    "ProblemMode",
    "ShootingProblem",
    "SolveReport",
    "SolverConfig",
    "TimeGrid",
    "Trajectory",
    "assemble_joint",
    "build_trajectory",
    "cart_pendulum",
    "check_multiplexing",
    "evaluate_costs",
    "hamiltonian_trace",
    "harmonic_oscillator",
    "joint_control",
    "l0_norm",
    "residual",
    "riccati_closed_loop",
    "rk4_integrate",
    "solve",
]
