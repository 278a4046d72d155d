"""Robust low-rank matrix and tensor estimation by Riemannian sub-gradient descent."""
from .exceptions import NumericError
from .harness import ExperimentConfig, fit_rate_slope, run_experiment
from .initialization import (ShrinkageParams, hosvd_init_tensor, shrinkage_init_tensor,
                             spectral_init_matrix)
from .losses import LossSpec, parse_loss
from .model import (Dataset, GroundTruth, NoiseSpec, gen_low_rank_matrix, gen_low_rank_tensor,
                    gen_observations, noise_for_snr, noise_mean_abs)
from .solver import (ConstantSchedule, PracticalSchedule, SolverConfig, TheoreticalSchedule,
                     rsgrad, rsgrad_matrix, rsgrad_tensor)
from .tensor import TuckerDecomp, hosvd, svd_r

__version__ = '0.1.0'
