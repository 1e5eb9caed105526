"""Score-based vector approximate message passing.

Two soft-in/soft-out modules, one for the observation and one for the
prior, exchange extrinsic Gaussian messages.  Each module is driven only
by a score function: Tweedie's formula gives the posterior mean and the
Fisher information (mean squared score norm) gives the Onsager
coefficient.
"""

__version__ = "0.1.0"

from .numerics import (RngStream, SensingMatrix, build_rri_matrix, random_modulate,
                       random_orthogonal, sample_gaussian_vector, seeded_rng)
from .score_models import (BernoulliGaussianPrior, GaussianPrior, ImplicitDenoiserScore,
                           LinearGaussianLikelihood, PairwiseGaussianPrior, ScoreModel,
                           lmmse_estimate)
from .siso import SisoConfig, SisoMessage, SisoResult, siso_forward
from .message_passing import ProblemBatch, RunTrace, ScVampConfig, run_scvamp
from .state_evolution import (bg_mmse, exit_curves, gaussian_mmse, linear_mmse, run_se,
                              scalar_gaussian_fixed_point, score_model_mmse)
from .dsm import DsmConfig, LearnedPairScore, load_weights, save_weights, train_dsm
from .langevin import LangevinConfig, hybrid_module_a, posterior_mean_langevin
from .diagnostics import error_decoupling_report

__all__ = [
    "__version__",
    "RngStream", "SensingMatrix", "build_rri_matrix", "random_modulate",
    "random_orthogonal", "sample_gaussian_vector", "seeded_rng",
    "BernoulliGaussianPrior", "GaussianPrior", "ImplicitDenoiserScore",
    "LinearGaussianLikelihood", "PairwiseGaussianPrior", "ScoreModel", "lmmse_estimate",
    "SisoConfig", "SisoMessage", "SisoResult", "siso_forward",
    "ProblemBatch", "RunTrace", "ScVampConfig", "run_scvamp",
    "bg_mmse", "exit_curves", "gaussian_mmse", "linear_mmse", "run_se",
    "scalar_gaussian_fixed_point", "score_model_mmse",
    "DsmConfig", "LearnedPairScore", "load_weights", "save_weights", "train_dsm",
    "LangevinConfig", "hybrid_module_a", "posterior_mean_langevin",
    "error_decoupling_report",
]
