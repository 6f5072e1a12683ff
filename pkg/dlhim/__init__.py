"""
DL-HIM Workbench - Hybrid iterative solvers for 1D parametric PDEs

Problems:
- Grid1D, GrfConfig, LinearSystem, ProblemInstance: random diffusion/Helmholtz instances

Solver components:
- SmootherConfig: damped Jacobi / Gauss-Seidel relaxation
- DeepOnetOperator, SpectralOperator, ZeroCorrection: neural corrections N(r)
- UpdateStrategy, AaHistory: fixed, adaptive and Anderson-type updates
- SolverConfig, ConvergenceTrace: the DL-HIM loop and its diagnostics

Training and experiments:
- Objective, NormSpec, TrainConfig, TrainingHistory: static/dynamic training
- ExperimentConfig: YAML-driven runs and benchmark scenarios
"""

from dlhim.pde_problems import Grid1D, GrfConfig, LinearSystem, ProblemInstance, ProblemKind
from dlhim.smoothers import SmootherConfig, SmootherKind
from dlhim.neural_correction import (CorrectionOperator, DeepOnetOperator, OperatorKind,
                                     SpectralOperator, ZeroCorrection)
from dlhim.acceleration import AaHistory, UpdateKind, UpdateStrategy
from dlhim.hybrid_solver import ConvergenceTrace, SolverConfig, Verdict
from dlhim.training import NormSpec, Objective, TrainConfig, TrainingHistory
from dlhim.experiment import ExperimentConfig

__all__ = [
    'Grid1D',
    'GrfConfig',
    'LinearSystem',
    'ProblemInstance',
    'ProblemKind',
    'SmootherConfig',
    'SmootherKind',
    'CorrectionOperator',
    'DeepOnetOperator',
    'OperatorKind',
    'SpectralOperator',
    'ZeroCorrection',
    'AaHistory',
    'UpdateKind',
    'UpdateStrategy',
    'ConvergenceTrace',
    'SolverConfig',
    'Verdict',
    'NormSpec',
    'Objective',
    'TrainConfig',
    'TrainingHistory',
    'ExperimentConfig',
]
