"""Reinforcement-learning control of reaction-diffusion transport.

A finite element reaction-diffusion simulator, an episodic control
environment over its diffusivity field, a from-scratch stochastic
policy-gradient agent, and a socket protocol that lets agent and
simulator run as separate processes.
"""

__version__ = "0.1.0"

from . import env, fem, mesh, policy, proto  # noqa: F401
from .env import EnvConfig, ReactionDiffusionEnv
from .fem import ControlMap, Field, SimParams, Simulator
from .mesh import Mesh, build_unit_square, load_mesh, save_mesh
from .policy import PolicyGradientAgent, train
from .proto import RemoteEnv, connect, serve

__all__ = [
    "ControlMap",
    "EnvConfig",
    "Field",
    "Mesh",
    "PolicyGradientAgent",
    "ReactionDiffusionEnv",
    "RemoteEnv",
    "SimParams",
    "Simulator",
    "build_unit_square",
    "connect",
    "env",
    "fem",
    "load_mesh",
    "mesh",
    "policy",
    "proto",
    "save_mesh",
    "serve",
    "train",
]
