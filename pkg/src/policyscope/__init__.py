"""Reward-conditioned posteriors over simulator inputs as policy certificates."""

from .envs import make_env
from .flow import FlowConfig, FlowModel, init_model, log_prob, sample
from .inference import (
    DiscoverConfig,
    PosteriorCertificate,
    PriorCertificate,
    evaluate_posterior,
    run_discover,
)
from .priors import PriorSpec, to_bounded, to_unbounded
from .selection import Belief, run_selection_experiment, select_task
from .store import load_certificate, save_certificate

__version__ = "0.1.0"
