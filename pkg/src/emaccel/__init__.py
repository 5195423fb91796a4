"""EM and accelerated EM (gradient ascent, conjugate gradient, CG+EM,
parameterized EM) for Gaussian mixtures, with a paired benchmark harness."""
from .bench import BUILTIN_CONFIGS, BUILTIN_MODELS, generate_dataset, init_params, run_matrix, summarize
from .em import e_step, em_update, m_step, m_step_map, prune_components
from .gradient import finite_difference_gradient, gradient_from_em
from .model import Dataset, GmmParams, Priors, flatten, log_likelihood, log_posterior, unflatten, validate
from .optimizers import (
    METHODS,
    RunRecord,
    StoppingRule,
    fit,
    run_cg,
    run_cg_em,
    run_em,
    run_gradient_ascent,
    run_hybrid,
    run_pem,
)

__version__ = "0.1.0"
