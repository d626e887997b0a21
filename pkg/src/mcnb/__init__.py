"""Meta clustering of neural bandits: networks, policies, environments, NTK diagnostics, harness."""
from . import core, environments, harness, ntk, policies
from .core import BACKEND, NetworkShape
from .environments import SyntheticEnv, SyntheticEnvSpec
from .harness import ExperimentConfig, load_config, parse_config, run_experiment, run_seed
from .policies import MCNB, NeuUCB, Oracle, PolicyConfig, UniformRandom, make_policy

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "MCNB", "ExperimentConfig", "NetworkShape", "NeuUCB", "Oracle", "PolicyConfig",
    "SyntheticEnv", "SyntheticEnvSpec", "UniformRandom", "core", "environments", "harness",
    "load_config", "make_policy", "ntk", "parse_config", "policies", "run_experiment", "run_seed",
]
