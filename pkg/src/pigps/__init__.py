"""Guided policy search with path-integral local updates.

Local time-varying linear-Gaussian controllers are improved by PI2 (or a
KL-constrained LQR baseline) and distilled into a small MLP policy.
"""
from .controllers import LinGaussPolicy, SampleSet, sample_rollouts
from .envs import InstanceDistribution, LatchEnv, PointMassEnv, make_env, sample_instance
from .global_policy import MlpPolicy
from .gps import GpsConfig, evaluate, run_global_phase, run_local_phase
from .pi2 import KlBound, pi2_step, solve_eta

__version__ = "0.1.0"

__all__ = [
    "GpsConfig", "InstanceDistribution", "KlBound", "LatchEnv", "LinGaussPolicy",
    "MlpPolicy", "PointMassEnv", "SampleSet", "evaluate", "make_env", "pi2_step",
    "run_global_phase", "run_local_phase", "sample_instance", "sample_rollouts", "solve_eta",
]
