"""Run configuration: a sectioned ``key = value`` file with a fixed schema.

Every section and key below is documented in the README.  Unknown
sections or keys are rejected before anything runs.  Keys left empty
take mode-dependent defaults (3-action vs 5-action presets).
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, replace

from .a3c import HyperParams
from .beamsim import BeamSpec, CalibrationTargets, LatticeConfig, TankConfig
from .controls import ActionBounds, ControlSettings, InvalidArgument
from .env import EpisodeConfig, RewardParams


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _mode(text: str) -> str:
    text = text.strip().lower().replace("-", "")
    if text not in ("3action", "5action"):
        raise ValueError("mode must be 3action or 5action")
    return text


_TANK_KEYS = {
    "cells": int, "design_amplitude": float, "design_phase": float,
    "coupling_k": float, "acceptance_psi": float, "acceptance_delta": float,
}

SCHEMA = {
    "run": {"mode": _mode, "seed": int, "output_dir": str, "episodes": int, "workers": int,
            "monitor": _bool, "monitor_cadence": int, "checkpoint_every": int, "round_episodes": int,
            "record_wall_time": _bool},
    "lattice": {"gain": float, "sync_phase": float, "input_current": float},
    "tank1": _TANK_KEYS, "tank2": _TANK_KEYS, "tank3": _TANK_KEYS,
    "segment4": _TANK_KEYS, "segment5": _TANK_KEYS,
    "beam": {"count": int, "seed": int, "psi_sigma": float, "delta_sigma": float,
             "truncation": float, "mode": str},
    "bounds": {"min": _floats, "max": _floats, "max_step": _floats},
    "reward": {"weights": _floats, "loss_weight": float, "threshold": float, "bonus": float,
               "action_norm_weight": float},
    "env": {"max_steps": int, "reset_mode": str, "start": _floats},
    "network": {"hidden": _ints, "dropout": float, "shared": _bool},
    "a3c": {"gamma": float, "t_max": int, "lr_policy": float, "lr_value": float, "c1": float, "c2": float,
            "epsilon0": float, "epsilon_min": float, "epsilon_decay": float, "loss_variant": str,
            "grad_clip": float, "rms_decay": float, "reward_scale": float, "value_coef": float},
    "eval": {"sample_size": int, "max_steps": int, "seed": int, "bin_width": int},
    "calibration": {"design_min": float, "random_max": float, "n_random": int, "seed": int, "budget": int},
}

MODE_DEFAULTS = {
    "3action": dict(active=3, max_steps=5000, hidden=(10,), workers=1, reset_mode="fixed",
                    episodes=500, monitor=False, eval_sample=50, eval_steps=300, lr_policy=1e-3),
    "5action": dict(active=5, max_steps=700, hidden=(40, 20), workers=4, reset_mode="random",
                    episodes=3000, monitor=True, eval_sample=200, eval_steps=700, lr_policy=3e-4),
}



@dataclass
class RunConfig:
    mode: str = "3action"
    seed: int = 0
    output_dir: str = "runs/latest"
    episodes: int | None = None
    workers: int | None = None
    monitor: bool | None = None
    monitor_cadence: int = 20
    checkpoint_every: int = 100
    round_episodes: int | None = None
    record_wall_time: bool = True
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    beam: BeamSpec = field(default_factory=BeamSpec)
    beam_mode: str = "fixed"
    bounds: ActionBounds = field(default_factory=ActionBounds)
    reward: RewardParams = field(default_factory=RewardParams)
    max_steps: int | None = None
    reset_mode: str | None = None
    start: ControlSettings | None = None
    hidden: tuple | None = None
    dropout: float = 0.1
    shared: bool = False
    # None takes HyperParams defaults with the mode's policy learning rate
    hp: HyperParams | None = None
    eval_sample_size: int | None = None
    eval_max_steps: int | None = None
    eval_seed: int = 1
    eval_bin_width: int = 50
    calibration: CalibrationTargets = field(default_factory=CalibrationTargets)
    calibration_budget: int = 200

    def __post_init__(self):
        d = MODE_DEFAULTS[self.mode]
        for name, key in (("episodes", "episodes"), ("workers", "workers"), ("monitor", "monitor"),
                          ("max_steps", "max_steps"), ("reset_mode", "reset_mode"), ("hidden", "hidden"),
                          ("eval_sample_size", "eval_sample"), ("eval_max_steps", "eval_steps")):
            if getattr(self, name) is None:
                setattr(self, name, d[key])
        if self.hp is None:
            self.hp = HyperParams(lr_policy=d["lr_policy"])
        if self.round_episodes is None:
            self.round_episodes = max(1, self.episodes // 2)
        self.hp = replace(self.hp, workers=self.workers, seed=self.seed)

    @property
    def active_controls(self) -> int:
        return MODE_DEFAULTS[self.mode]["active"]

    def episode_config(self, reset_mode: str | None = None) -> EpisodeConfig:
        return EpisodeConfig(max_steps=self.max_steps, reset_mode=reset_mode or self.reset_mode,
                             active_controls=self.active_controls, start_point=self.start,
                             beam_mode=self.beam_mode)

    def make_env(self, worker_id: int = 0, reset_mode: str | None = None):
        from .env import LinacTuningEnv
        return LinacTuningEnv(self.lattice, self.beam, self.episode_config(reset_mode), self.reward,
                              self.bounds, seed=self.seed * 1000 + worker_id)

    # -- serialization ----------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        fmt = lambda seq: ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in seq)
        cp["run"] = {"mode": self.mode, "seed": str(self.seed), "output_dir": self.output_dir,
                     "episodes": str(self.episodes), "workers": str(self.workers),
                     "monitor": str(self.monitor).lower(), "monitor_cadence": str(self.monitor_cadence),
                     "checkpoint_every": str(self.checkpoint_every), "round_episodes": str(self.round_episodes),
                     "record_wall_time": str(self.record_wall_time).lower()}
        lat = self.lattice
        cp["lattice"] = {"gain": repr(lat.gain), "sync_phase": repr(lat.sync_phase),
                         "input_current": repr(lat.input_current)}
        for name, tank in zip(("tank1", "tank2", "tank3", "segment4", "segment5"), lat.tanks):
            cp[name] = {k: repr(getattr(tank, k)) for k in _TANK_KEYS}
        b = self.beam
        cp["beam"] = {"count": str(b.count), "seed": str(b.seed), "psi_sigma": repr(b.psi_sigma),
                      "delta_sigma": repr(b.delta_sigma), "truncation": repr(b.truncation), "mode": self.beam_mode}
        cp["bounds"] = {"min": fmt(self.bounds.min.tolist()), "max": fmt(self.bounds.max.tolist()),
                        "max_step": fmt(self.bounds.max_step.tolist())}
        r = self.reward
        cp["reward"] = {"weights": fmt(r.weights), "loss_weight": repr(r.loss_weight),
                        "threshold": repr(r.threshold), "bonus": repr(r.bonus),
                        "action_norm_weight": repr(r.action_norm_weight)}
        cp["env"] = {"max_steps": str(self.max_steps), "reset_mode": self.reset_mode,
                     "start": fmt(self.start.to_array().tolist()) if self.start else ""}
        cp["network"] = {"hidden": fmt(self.hidden), "dropout": repr(self.dropout),
                         "shared": str(self.shared).lower()}
        hp = self.hp
        cp["a3c"] = {k: (repr(getattr(hp, k)) if not isinstance(getattr(hp, k), str) else getattr(hp, k))
                     for k in SCHEMA["a3c"]}
        cp["eval"] = {"sample_size": str(self.eval_sample_size), "max_steps": str(self.eval_max_steps),
                      "seed": str(self.eval_seed), "bin_width": str(self.eval_bin_width)}
        c = self.calibration
        cp["calibration"] = {"design_min": repr(c.design_min), "random_max": repr(c.random_max),
                             "n_random": str(c.n_random), "seed": str(c.seed),
                             "budget": str(self.calibration_budget)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Validate and convert config text; raises :class:`ConfigError` on any schema violation."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            if raw.strip() == "":
                continue
            try:
                values[(section, key)] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc
    try:
        return _build(values)
    except (InvalidArgument, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _build(v: dict) -> RunConfig:
    get = lambda s, k, default=None: v.get((s, k), default)
    base = LatticeConfig()
    tanks = []
    for i, name in enumerate(("tank1", "tank2", "tank3", "segment4", "segment5")):
        t = base.tanks[i]
        tanks.append(TankConfig(**{k: get(name, k, getattr(t, k)) for k in _TANK_KEYS}))
    lattice = LatticeConfig(tuple(tanks), gain=get("lattice", "gain", base.gain),
                            sync_phase=get("lattice", "sync_phase", base.sync_phase),
                            input_current=get("lattice", "input_current", base.input_current))
    bs = BeamSpec()
    beam = BeamSpec(**{k: get("beam", k, getattr(bs, k)) for k in ("count", "seed", "psi_sigma", "delta_sigma", "truncation")})
    beam_mode = get("beam", "mode", "fixed")
    if beam_mode not in ("fixed", "stochastic"):
        raise ValueError("[beam] mode must be fixed or stochastic")
    bounds = ActionBounds(get("bounds", "min"), get("bounds", "max"), get("bounds", "max_step"))
    rp = RewardParams()
    reward = RewardParams(**{k: get("reward", k, getattr(rp, k))
                             for k in ("weights", "loss_weight", "threshold", "bonus", "action_norm_weight")})
    if len(reward.weights) != 5:
        raise ValueError("[reward] weights needs 5 values")
    start = get("env", "start")
    if start is not None:
        start = ControlSettings.from_array(start).validate(bounds)
    reset_mode = get("env", "reset_mode")
    if reset_mode not in (None, "fixed", "random"):
        raise ValueError("[env] reset_mode must be fixed or random")
    mode = get("run", "mode", "3action")
    hp_defaults = HyperParams(lr_policy=MODE_DEFAULTS[mode]["lr_policy"])
    hp = replace(hp_defaults, **{k: get("a3c", k) for k in SCHEMA["a3c"] if ("a3c", k) in v})
    ct = CalibrationTargets()
    calibration = CalibrationTargets(**{k: get("calibration", k, getattr(ct, k))
                                        for k in ("design_min", "random_max", "n_random", "seed")})
    dropout = get("network", "dropout", 0.1)
    if not 0.0 <= dropout < 1.0 or math.isnan(dropout):
        raise ValueError("[network] dropout must be in [0, 1)")
    cfg = RunConfig(
        mode=mode,
        seed=get("run", "seed", 0),
        output_dir=get("run", "output_dir", "runs/latest"),
        episodes=get("run", "episodes"),
        workers=get("run", "workers"),
        monitor=get("run", "monitor"),
        monitor_cadence=get("run", "monitor_cadence", 20),
        checkpoint_every=get("run", "checkpoint_every", 100),
        round_episodes=get("run", "round_episodes"),
        record_wall_time=get("run", "record_wall_time", True),
        lattice=lattice, beam=beam, beam_mode=beam_mode, bounds=bounds, reward=reward,
        max_steps=get("env", "max_steps"), reset_mode=reset_mode, start=start,
        hidden=get("network", "hidden"), dropout=dropout, shared=get("network", "shared", False),
        hp=hp,
        eval_sample_size=get("eval", "sample_size"), eval_max_steps=get("eval", "max_steps"),
        eval_seed=get("eval", "seed", 1), eval_bin_width=get("eval", "bin_width", 50),
        calibration=calibration, calibration_budget=get("calibration", "budget", 200),
    )
    if cfg.workers < 1 or cfg.episodes < 1:
        raise ValueError("[run] workers and episodes must be >= 1")
    cfg.episode_config()
    return cfg
