"""Boolean state-space models of gene regulation observed through RNA-seq counts.

Exact and particle filters/smoothers, filter-bank model selection and
Monte-Carlo EM for partially observed Boolean dynamical systems.
"""

from .adaptive import ParameterVector, em_fit, ffbsi, q_hat, q_hat_gradient, relative_distance, run_dpmla
from .core import BooleanState, DegeneracyError, GrnModel, cell_cycle_network, load_network
from .exact import run_bkf, run_bks
from .experiments import ExperimentConfig, correct_state_rate, simulate
from .particle import apf_bks, run_apf_bkf, smooth_trace
from .rnaseq import RnaSeqModel, load_obs_model

__all__ = [
    "BooleanState",
    "DegeneracyError",
    "ExperimentConfig",
    "GrnModel",
    "ParameterVector",
    "RnaSeqModel",
    "apf_bks",
    "cell_cycle_network",
    "correct_state_rate",
    "em_fit",
    "ffbsi",
    "load_network",
    "load_obs_model",
    "q_hat",
    "q_hat_gradient",
    "relative_distance",
    "run_apf_bkf",
    "run_bkf",
    "run_bks",
    "run_dpmla",
    "simulate",
    "smooth_trace",
]
