"""Particle simulation and tangent systems for McKean-Vlasov SDEs with common noise."""
from .errors import *  # noqa: F401,F403
from .measure import EmpiricalMeasure, wasserstein2
from .model import (BUILTIN_MODELS, CoefficientSet, Constant, Dims, FunctionalModel,
                    LinearMeanField, TanhInteraction, build_model, eval_coefficients,
                    eval_derivatives, lipschitz_selfcheck)
from .noise import CameronMartinDirection, NoiseBundle, TimeGrid, generate, sample_initial
from .engine import ParticleCloud, Trajectory, simulate_frozen, simulate_ips, step_ips

__version__ = "0.1.0"
