"""TRPO-preconditioned PPO for simulated single-cell perturbation prediction."""

from trpoppo.autodiff import Graph, ParamVector, evaluate, gradient, hessian_vector_product
from trpoppo.env import EnvConfig, PerturbEnv, load_dataset, synthesize_dataset
from trpoppo.metrics import MetricReport
from trpoppo.ppo import PpoConfig
from trpoppo.trainer import RunConfig, run_training
from trpoppo.trpo import TrustRegionConfig

__version__ = "0.1.0"

__all__ = [
    "EnvConfig",
    "Graph",
    "MetricReport",
    "ParamVector",
    "PerturbEnv",
    "PpoConfig",
    "RunConfig",
    "TrustRegionConfig",
    "evaluate",
    "gradient",
    "hessian_vector_product",
    "load_dataset",
    "run_training",
    "synthesize_dataset",
]
