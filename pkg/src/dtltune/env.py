"""Markov decision process around the linac surrogate.

The agent observes monitor currents, lost-beam power and its own
normalized set-points, and acts by nudging the active set-points by
bounded increments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beamsim import BeamSpec, LatticeConfig, MonitorReadings, beam_from_spec, track_lattice
from .controls import ACTIVE_INDICES, ActionBounds, ControlSettings, InvalidArgument, ProtocolError


@dataclass(frozen=True)
class RewardParams:
    weights: tuple = (0.1, 0.15, 0.2, 0.25, 0.3)
    loss_weight: float = 0.2
    threshold: float = 0.85
    bonus: float = 1000.0
    # weight of an optional action-norm term; zero keeps the reward action independent
    action_norm_weight: float = 0.0

    @property
    def min_failure_reward(self) -> float:
        return -(sum(self.weights) * self.threshold ** 2 + self.loss_weight * len(self.weights))


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int | None = None
    reset_mode: str = "fixed"
    active_controls: int = 5
    start_point: ControlSettings | None = None
    beam_mode: str = "fixed"

    def __post_init__(self):
        if self.active_controls not in ACTIVE_INDICES:
            raise InvalidArgument("active_controls must be 3 or 5")
        if self.reset_mode not in ("fixed", "random"):
            raise InvalidArgument("reset_mode must be 'fixed' or 'random'")
        if self.beam_mode not in ("fixed", "stochastic"):
            raise InvalidArgument("beam_mode must be 'fixed' or 'stochastic'")
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 5000 if self.active_controls == 3 else 700)
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1")
        if self.start_point is not None:
            self.start_point.validate()


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def reward(readings: MonitorReadings, params: RewardParams = RewardParams()) -> float:
    """Success bonus once the last monitor sees the threshold fraction of
    the input beam; otherwise a weighted squared shortfall plus loss power."""
    i0 = readings.input_current
    if not i0 > 0:
        raise InvalidArgument("input current must be positive")
    frac = np.asarray(readings.current, dtype=float) / i0
    if frac[-1] >= params.threshold:
        return float(params.bonus)
    w = np.asarray(params.weights, dtype=float)
    p = np.asarray(readings.lost_power, dtype=float)
    return float(-np.sum(w * (params.threshold - frac) ** 2 + params.loss_weight * p ** 2))


def feasible_bounds(controls, bounds: ActionBounds = ActionBounds(), active=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension [lo, hi] increments that keep controls in range."""
    x = controls.to_array() if isinstance(controls, ControlSettings) else np.asarray(controls, dtype=float)
    idx = list(range(5)) if active is None else list(active)
    lo = np.maximum(-bounds.max_step, bounds.min - x)[idx]
    hi = np.minimum(bounds.max_step, bounds.max - x)[idx]
    # guard against float residue when x sits exactly on a bound
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def clamp_action(controls, requested, bounds: ActionBounds = ActionBounds(), active=None) -> np.ndarray:
    lo, hi = feasible_bounds(controls, bounds, active)
    requested = np.asarray(requested, dtype=float)
    if requested.shape != lo.shape:
        raise InvalidArgument(f"action must have {lo.shape[0]} components, got {requested.shape}")
    requested = np.where(np.isfinite(requested), requested, 0.0)
    return np.clip(requested, lo, hi)


def apply_action(controls: np.ndarray, delta: np.ndarray, bounds: ActionBounds, active) -> np.ndarray:
    x = np.array(controls, dtype=float)
    x[list(active)] += delta
    # rounding can overshoot a bound by one ulp
    return np.clip(x, bounds.min, bounds.max)


class LinacTuningEnv:
    """Single-owner tuning environment.

    ``reset`` and ``step`` follow the usual gym-like protocol; ``step``
    returns a :class:`StepResult`.  Transitions are deterministic: every
    step tracks a fresh copy of the same seeded beam.
    """

    def __init__(self, lattice: LatticeConfig | None = None, beam: BeamSpec | None = None,
                 episode: EpisodeConfig | None = None, reward_params: RewardParams | None = None,
                 bounds: ActionBounds | None = None, seed: int | None = None):
        self.lattice = lattice or LatticeConfig()
        self.beam_spec = beam or BeamSpec()
        self.episode = episode or EpisodeConfig()
        self.reward_params = reward_params or RewardParams()
        self.bounds = bounds or ActionBounds()
        self.active = ACTIVE_INDICES[self.episode.active_controls]
        self._beam = beam_from_spec(self.beam_spec)
        self._rng = np.random.default_rng(seed)
        self._beam_rng = np.random.default_rng(None if seed is None else seed + 7919)
        self.controls = self.start_point().to_array()
        self.readings = None
        self.last_beam = None
        self.step_index = 0
        self.done = True

    # -- geometry ---------------------------------------------------------
    @property
    def n_actions(self) -> int:
        return len(self.active)

    @property
    def state_dim(self) -> int:
        return 10 + self.n_actions

    @property
    def max_step(self) -> np.ndarray:
        return self.bounds.max_step[list(self.active)]

    def design_point(self) -> ControlSettings:
        return self.lattice.design_point()

    def start_point(self) -> ControlSettings:
        return self.episode.start_point or default_start_point(self.lattice, self.episode.active_controls)

    @property
    def settings(self) -> ControlSettings:
        return ControlSettings.from_array(self.controls)

    # -- observation ------------------------------------------------------
    def observe(self) -> np.ndarray:
        r = self.readings
        frac = np.clip(r.current / r.input_current, 0.0, 1.0)
        u = self.bounds.normalize(self.controls)[list(self.active)]
        return np.concatenate([frac, r.lost_power, u])

    def controls_from_state(self, state: np.ndarray) -> np.ndarray:
        """Invert the control block of a state vector; inactive controls keep their current values."""
        idx = list(self.active)
        x = self.controls.copy()
        x[idx] = self.bounds.min[idx] + (np.asarray(state)[10:] + 1.0) * 0.5 * (self.bounds.max[idx] - self.bounds.min[idx])
        return x

    def feasible_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return feasible_bounds(self.controls, self.bounds, self.active)

    @property
    def transmission(self) -> float:
        return self.readings.transmission

    def _simulate(self):
        beam = self._beam
        if self.episode.beam_mode == "stochastic":
            beam = beam_from_spec(self.beam_spec, seed=int(self._beam_rng.integers(2**31)))
        self.readings, self.last_beam = track_lattice(beam, ControlSettings.from_array(self.controls), self.lattice)

    # -- protocol ---------------------------------------------------------
    def reset(self, seed: int | None = None, start: ControlSettings | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if start is not None:
            x = start.validate(self.bounds).to_array()
        elif self.episode.reset_mode == "random":
            x = self.lattice.design_point().to_array()
            sample = self.bounds.sample(self._rng)
            x[list(self.active)] = sample[list(self.active)]
        else:
            x = self.start_point().to_array()
        self.controls = x
        self.step_index = 0
        self.done = False
        self._simulate()
        return self.observe()

    def step(self, requested) -> StepResult:
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset() first")
        applied = clamp_action(self.controls, requested, self.bounds, self.active)
        self.controls = apply_action(self.controls, applied, self.bounds, self.active)
        self._simulate()
        self.step_index += 1
        r = reward(self.readings, self.reward_params)
        if self.reward_params.action_norm_weight:
            r -= self.reward_params.action_norm_weight * float(np.linalg.norm(applied))
        success = self.readings.transmission >= self.reward_params.threshold
        self.done = bool(success or self.step_index >= self.episode.max_steps)
        info = {
            "transmission": self.readings.transmission,
            "applied": applied,
            "step": self.step_index,
            "success": bool(success),
        }
        return StepResult(self.observe(), r, self.done, info)


def default_start_point(lattice: LatticeConfig, active_controls: int = 5) -> ControlSettings:
    """Fixed training start: active controls displaced below the design point."""
    x = lattice.design_point().to_array()
    offset = np.array([-5.0, -5.0, -100.0, -5.0, -100.0])
    idx = list(ACTIVE_INDICES[active_controls])
    x[idx] += offset[idx]
    return ControlSettings.from_array(np.clip(x, ActionBounds().min, ActionBounds().max))
