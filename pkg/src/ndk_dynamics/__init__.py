"""Neural dynamical kernels for noisy learning in wide networks.

Kernel recursions, the mean-predictor integral equations with their NTK and
NNGP limits, frozen-readout drift predictors, a finite-width Langevin
simulator and MNIST / CIFAR-10 loaders.
"""
from .datasets import (DatasetSlice, SyntheticSpec, build_problem, load_cifar_binary, load_idx,
                       synthetic_problem, synthetic_slice)
from .drift import (DriftConfig, drift_histograms, drift_predictor, drift_predictor_equilibrium,
                    drift_readout_accuracy, fit_threshold, pure_prior_predictor,
                    temporal_correlation)
from .dynamics import (LearningProblem, Trajectory, equilibria_compare, find_early_stopping,
                       nngp_equilibrium_predictor, ntk_closed_form, solve_mean_predictor,
                       solve_synthetic_reduced, time_grid)
from .errors import (ConfigError, DataFormatError, DegenerateInputError, DivergenceError,
                     NDKError, NumericalDomainError, NumericalError, SingularKernelError)
from .kernels import Activation, KernelInputs, input_gram, mean_kernel, mc_kernel_oracle
from .langevin import MLPState, Mode, SimConfig, empirical_ntk, forward, init_network, run_ensemble
from .ndk import ndk, nngp_equilibrium_kernel, ntk
from .prior import DynamicsParams, decay_factor, prior_cov

__version__ = "0.1.0"
