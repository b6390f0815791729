"""Reinforcement-learning tuner for a simulated drift-tube linac."""
from .beamsim import BeamSpec, LatticeConfig, calibrate, track_lattice
from .controls import ActionBounds, ControlSettings, InvalidArgument, ProtocolError
from .env import LinacTuningEnv, RewardParams, reward
from .estimator import A3CTuner

__version__ = "0.1.0"

__all__ = [
    "A3CTuner",
    "ActionBounds",
    "BeamSpec",
    "ControlSettings",
    "InvalidArgument",
    "LatticeConfig",
    "LinacTuningEnv",
    "ProtocolError",
    "RewardParams",
    "calibrate",
    "reward",
    "track_lattice",
]
