"""Early-stopped gradient descent and mini-batch SGD for nonlinear inverse learning."""
from .errors import (ConfigError, ContractError, DivergenceError, DomainError, EigenSolverError,
                     InvLearnError, SourceConstructionError)
from .models import DiffusionPDE, LinearIntegral, PointwiseNonlinear, build_model
from .sampling import NoiseModel, SampleSet, generate_samples, make_truth
from .solvers import SolverConfig, gd_run, schedule_preset, sgd_run, stopping_time
from .spectral import RngStream, frac_power, quadrature_grid, sym_eig

__version__ = "0.1.0"
