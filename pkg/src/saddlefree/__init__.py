"""Saddle-free Newton optimization and loss-landscape analysis.

The package pairs a small optimization library (gradient descent with
momentum, damped Newton, exact and Krylov-subspace saddle-free Newton)
with a landscape toolkit (critical-point finder, index/error
measurements, eigenvalue spectra) and a config-driven experiment runner
exposed through a CLI and an HTTP service.
"""

from .config import ConfigError, ExperimentConfig, load_config, resolve
from .experiments import ExperimentError, ExperimentReport, run_experiment
from .landscape import (CriticalPointRecord, NotConvergedError,
                        find_critical_point, sample_critical_points)
from .linalg import DenseSymmetric, EigenDecomposition, lanczos, sym_eig
from .mlp import Dataset, MlpObjective, MlpSpec, load_idx, make_mlp, synth_blobs
from .objectives import Objective, check_gradient, make_surface
from .optim import OptimizerConfig, RunResult, TrajectoryLog, run

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "CriticalPointRecord",
    "Dataset",
    "DenseSymmetric",
    "EigenDecomposition",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentReport",
    "MlpObjective",
    "MlpSpec",
    "NotConvergedError",
    "Objective",
    "OptimizerConfig",
    "RunResult",
    "TrajectoryLog",
    "check_gradient",
    "find_critical_point",
    "lanczos",
    "load_config",
    "load_idx",
    "make_mlp",
    "make_surface",
    "resolve",
    "run",
    "run_experiment",
    "sample_critical_points",
    "sym_eig",
    "synth_blobs",
    "__version__",
]
