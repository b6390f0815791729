"""Control set-points of the three tunable DTL tanks and their hardware limits."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

CONTROL_NAMES = ("t1_amp", "t2_amp", "t2_phase", "t3_amp", "t3_phase")
CONTROL_MIN = np.array([37.0, 61.7, 0.0, 60.3, 0.0])
CONTROL_MAX = np.array([47.6, 76.1, 360.0, 74.2, 360.0])
CONTROL_MAX_STEP = np.array([1.0, 1.0, 5.0, 1.0, 5.0])

# 3-action mode tunes the first two amplitudes and the tank-2 phase
ACTIVE_INDICES = {3: (0, 1, 2), 5: (0, 1, 2, 3, 4)}


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ProtocolError(RuntimeError):
    """Raised when an object is used out of its allowed call sequence."""


@dataclass(frozen=True)
class ControlSettings:
    """Absolute set-points: amplitudes in arbitrary units, phases in degrees."""

    t1_amp: float
    t2_amp: float
    t2_phase: float
    t3_amp: float
    t3_phase: float

    @classmethod
    def from_array(cls, values) -> "ControlSettings":
        values = np.asarray(values, dtype=float)
        if values.shape != (5,):
            raise InvalidArgument(f"expected 5 control values, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    def in_range(self, bounds: "ActionBounds | None" = None) -> bool:
        bounds = bounds or ActionBounds()
        x = self.to_array()
        return bool(np.all(np.isfinite(x)) and np.all(x >= bounds.min) and np.all(x <= bounds.max))

    def validate(self, bounds: "ActionBounds | None" = None) -> "ControlSettings":
        bounds = bounds or ActionBounds()
        if not self.in_range(bounds):
            x = self.to_array()
            bad = [
                f"{n}={v} not in [{lo}, {hi}]"
                for n, v, lo, hi in zip(CONTROL_NAMES, x, bounds.min, bounds.max)
                if not (lo <= v <= hi)
            ]
            raise InvalidArgument("control settings out of range: " + "; ".join(bad))
        return self


@dataclass(frozen=True)
class ActionBounds:
    """Per-control range and maximum incremental step."""

    min: np.ndarray = None
    max: np.ndarray = None
    max_step: np.ndarray = None

    def __post_init__(self):
        for name, default in (("min", CONTROL_MIN), ("max", CONTROL_MAX), ("max_step", CONTROL_MAX_STEP)):
            value = getattr(self, name)
            value = default.copy() if value is None else np.asarray(value, dtype=float).copy()
            if value.shape != (5,):
                raise InvalidArgument(f"bounds '{name}' must have 5 entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if np.any(self.min >= self.max):
            raise InvalidArgument("every control needs min < max")
        if np.any(self.max_step <= 0):
            raise InvalidArgument("max_step must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Map absolute controls affinely onto [-1, 1]."""
        return 2.0 * (x - self.min) / (self.max - self.min) - 1.0

    def denormalize(self, u: np.ndarray) -> np.ndarray:
        return self.min + (np.asarray(u) + 1.0) * 0.5 * (self.max - self.min)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.min, self.max)
