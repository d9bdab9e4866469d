"""Oracle-guided multi-mode policy learning for a planar biped."""

from .encoder import ModeEncoder, cluster_separation
from .env import EnvConfig, ParkourEnv, PhysicsConfig
from .oracle import OracleKind, OracleQuery, ReferenceOracle
from .ppo import Agent, PpoConfig

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "EnvConfig",
    "ModeEncoder",
    "OracleKind",
    "OracleQuery",
    "ParkourEnv",
    "PhysicsConfig",
    "PpoConfig",
    "ReferenceOracle",
    "cluster_separation",
]
