"""Diffusion models on inequality-constrained domains.

Two noising processes are provided: log-barrier Langevin dynamics under the
Hessian metric of the log-barrier, and reflected Brownian motion.  Score
networks are trained by implicit score matching and evaluated with MMD.
"""
__version__ = "0.1.0"

from .errors import (
    CdiffError,
    ConfigError,
    DivergenceFailure,
    InfeasiblePointError,
    ModelDomainMismatchError,
    NumericalError,
)
from .evaluation import KernelSpec, mmd2, reflected_heat_kernel_1d
from .geometry import ConstraintSet, DomainSpec, make_domain
from .io import load_checkpoint, read_samples, save_checkpoint, write_samples
from .sampling import (
    LowTempConfig,
    backward_sample,
    default_mixture,
    forward_slices,
    make_synthetic_dataset,
    uniform_reference,
)
from .schedule import NoiseSchedule
from .score import ScoreModel, TrainConfig, score_eval, train

__all__ = [
    "CdiffError", "ConfigError", "ConstraintSet", "DivergenceFailure", "DomainSpec",
    "InfeasiblePointError", "KernelSpec", "LowTempConfig", "ModelDomainMismatchError",
    "NoiseSchedule", "NumericalError", "ScoreModel", "TrainConfig", "backward_sample",
    "default_mixture", "forward_slices", "load_checkpoint", "make_domain",
    "make_synthetic_dataset", "mmd2", "read_samples", "reflected_heat_kernel_1d",
    "save_checkpoint", "score_eval", "train", "uniform_reference", "write_samples",
]
