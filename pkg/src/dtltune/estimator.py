"""scikit-learn style wrapper around the A3C tuner.

``fit`` trains against the simulated linac described by the estimator's
parameters; ``predict`` maps observation rows to greedy control steps and
``score`` is the random-start success rate.
"""
from __future__ import annotations

import threading

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import a3c
from .config import MODE_DEFAULTS, RunConfig
from .controls import ControlSettings, InvalidArgument
from .evalkit import greedy_rollout, random_start_eval
from .neural import GaussianHead, forward, load_checkpoint, save_checkpoint


class A3CTuner(BaseEstimator):
    """Actor-critic controller for the three-tank linac surrogate.

    Parameters left as ``None`` take the preset of ``mode``.  Set
    ``warm_start=True`` to continue training the current networks on the
    next ``fit`` call.
    """

    def __init__(self, mode="3action", n_episodes=None, n_workers=None, hidden_layers=None,
                 dropout=0.1, shared_network=False, gamma=0.99, t_max=20,
                 lr_policy=None, lr_value=1e-3, c1=10.0, c2=0.0,
                 epsilon0=0.5, epsilon_min=0.02, epsilon_decay=0.995, loss_variant="eq7",
                 grad_clip=5.0, reward_scale=1e-3, max_steps=None, reset_mode=None,
                 start=None, lattice=None, beam=None, reward=None, bounds=None,
                 monitor=False, monitor_cadence=20, eval_sample_size=None, eval_max_steps=None,
                 eval_seed=1, random_state=0, warm_start=False):
        self.mode = mode
        self.n_episodes = n_episodes
        self.n_workers = n_workers
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.shared_network = shared_network
        self.gamma = gamma
        self.t_max = t_max
        self.lr_policy = lr_policy
        self.lr_value = lr_value
        self.c1 = c1
        self.c2 = c2
        self.epsilon0 = epsilon0
        self.epsilon_min = epsilon_min
        self.epsilon_decay = epsilon_decay
        self.loss_variant = loss_variant
        self.grad_clip = grad_clip
        self.reward_scale = reward_scale
        self.max_steps = max_steps
        self.reset_mode = reset_mode
        self.start = start
        self.lattice = lattice
        self.beam = beam
        self.reward = reward
        self.bounds = bounds
        self.monitor = monitor
        self.monitor_cadence = monitor_cadence
        self.eval_sample_size = eval_sample_size
        self.eval_max_steps = eval_max_steps
        self.eval_seed = eval_seed
        self.random_state = random_state
        self.warm_start = warm_start

    @classmethod
    def from_config(cls, cfg: RunConfig, **overrides) -> "A3CTuner":
        hp = cfg.hp
        params = dict(
            mode=cfg.mode, n_episodes=cfg.episodes, n_workers=cfg.workers, hidden_layers=tuple(cfg.hidden),
            dropout=cfg.dropout, shared_network=cfg.shared, gamma=hp.gamma, t_max=hp.t_max,
            lr_policy=hp.lr_policy, lr_value=hp.lr_value, c1=hp.c1, c2=hp.c2, epsilon0=hp.epsilon0,
            epsilon_min=hp.epsilon_min, epsilon_decay=hp.epsilon_decay, loss_variant=hp.loss_variant,
            grad_clip=hp.grad_clip, reward_scale=hp.reward_scale, max_steps=cfg.max_steps,
            reset_mode=cfg.reset_mode, start=cfg.start, lattice=cfg.lattice, beam=cfg.beam,
            reward=cfg.reward, bounds=cfg.bounds, monitor=cfg.monitor, monitor_cadence=cfg.monitor_cadence,
            eval_sample_size=cfg.eval_sample_size, eval_max_steps=cfg.eval_max_steps,
            eval_seed=cfg.eval_seed, random_state=cfg.seed,
        )
        params.update(overrides)
        est = cls(**params)
        est._extra = {"beam_mode": cfg.beam_mode, "rms_decay": hp.rms_decay, "rms_eps": hp.rms_eps,
                      "value_coef": hp.value_coef}
        return est

    # -- helpers ------------------------------------------------------------
    def _config(self) -> RunConfig:
        extra = getattr(self, "_extra", {})
        if self.mode not in ("3action", "5action"):
            raise InvalidArgument(f"mode must be '3action' or '5action', got {self.mode!r}")
        hp = a3c.HyperParams(
            gamma=self.gamma, t_max=self.t_max, lr_value=self.lr_value,
            lr_policy=MODE_DEFAULTS[self.mode]["lr_policy"] if self.lr_policy is None else self.lr_policy,
            c1=self.c1, c2=self.c2, epsilon0=self.epsilon0, epsilon_min=self.epsilon_min,
            epsilon_decay=self.epsilon_decay, loss_variant=self.loss_variant, grad_clip=self.grad_clip,
            reward_scale=self.reward_scale, rms_decay=extra.get("rms_decay", 0.99),
            rms_eps=extra.get("rms_eps", 1e-8), value_coef=extra.get("value_coef", 0.5),
        )
        kwargs = dict(
            mode=self.mode, seed=int(self.random_state), episodes=self.n_episodes, workers=self.n_workers,
            monitor=self.monitor, monitor_cadence=self.monitor_cadence, max_steps=self.max_steps,
            reset_mode=self.reset_mode, start=self.start, hidden=self.hidden_layers, dropout=self.dropout,
            shared=self.shared_network, hp=hp, eval_sample_size=self.eval_sample_size,
            eval_max_steps=self.eval_max_steps, eval_seed=self.eval_seed,
            beam_mode=extra.get("beam_mode", "fixed"),
        )
        for name in ("lattice", "beam", "reward", "bounds"):
            if getattr(self, name) is not None:
                kwargs[name] = getattr(self, name)
        cfg = RunConfig(**kwargs)
        cfg.episode_config()
        return cfg

    def _init_model(self, cfg: RunConfig, env) -> None:
        nets = a3c.build_networks(env.state_dim, env.n_actions, cfg.hidden, cfg.dropout, cfg.shared, cfg.seed)
        self.global_model_ = a3c.make_global_model(nets, cfg.hp)
        self.episode_records_ = []
        self.monitor_records_ = []

    def _set_fitted(self, env) -> None:
        self.networks_ = self.global_model_.networks
        self.n_features_in_ = env.state_dim
        self.n_actions_ = env.n_actions
        self.max_step_ = env.max_step.copy()

    # -- estimator API --------------------------------------------------
    def fit(self, X=None, y=None, on_episode=None, on_monitor=None, stop: threading.Event | None = None):
        """Train for ``n_episodes`` global episodes.  ``X`` and ``y`` are ignored;
        the training data come from the simulator."""
        cfg = self._config()
        env0 = cfg.make_env(0)
        if not (self.warm_start and hasattr(self, "global_model_")):
            self._init_model(cfg, env0)
        gm = self.global_model_
        gm.hp = cfg.hp
        gm.learning_rates = {k: (cfg.hp.lr_value if k == "value" else cfg.hp.lr_policy) for k in gm.networks}
        first = [env0]

        def factory(i):
            return first.pop() if (i == 0 and first) else cfg.make_env(i)

        monitor_env = cfg.make_env(10_000, reset_mode="fixed") if cfg.monitor else None
        records, mon = a3c.train(factory, gm, cfg.hp, cfg.episodes, on_episode=on_episode,
                                 monitor_env=monitor_env, monitor_cadence=cfg.monitor_cadence,
                                 on_monitor=on_monitor, stop=stop)
        self.episode_records_ = list(self.episode_records_) + records
        self.monitor_records_ = list(self.monitor_records_) + mon
        self._set_fitted(env0)
        return self

    def predict(self, X) -> np.ndarray:
        """Greedy control increments (policy means) for each observation row."""
        check_is_fitted(self, "networks_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        raw, _ = forward(a3c._policy_net(self.networks_), X, train=False)
        return GaussianHead(self.max_step_)(raw).mu

    def value(self, X) -> np.ndarray:
        check_is_fitted(self, "networks_")
        X = check_array(X, dtype=np.float64)
        return a3c.state_value(self.networks_, X)

    def evaluate(self, sample_size=None, max_steps=None, seed=None, return_trajectories=False):
        check_is_fitted(self, "networks_")
        cfg = self._config()
        return random_start_eval(self.networks_, lambda: cfg.make_env(0),
                                 sample_size or cfg.eval_sample_size, max_steps or cfg.eval_max_steps,
                                 seed=cfg.eval_seed if seed is None else seed, bin_width=cfg.eval_bin_width,
                                 return_trajectories=return_trajectories)

    def score(self, X=None, y=None) -> float:
        """Random-start success rate with the configured evaluation settings."""
        return self.evaluate().success_rate

    def rollout(self, start: ControlSettings | None = None, max_steps=None):
        check_is_fitted(self, "networks_")
        cfg = self._config()
        env = cfg.make_env(0)
        return greedy_rollout(self.networks_, env, start or env.start_point(), max_steps or cfg.max_steps)

    # -- persistence ------------------------------------------------------
    def save(self, path, extras: dict | None = None) -> None:
        check_is_fitted(self, "networks_")
        arrays = self.global_model_.state_arrays()
        arrays.update(extras or {})
        save_checkpoint(path, self.networks_, arrays)

    def load(self, path) -> "A3CTuner":
        """Restore networks, optimizer state and counters from a checkpoint.

        Raises :class:`InvalidArgument` when the checkpoint networks do not
        fit this estimator's environment.
        """
        cfg = self._config()
        env = cfg.make_env(0)
        nets, arrays = load_checkpoint(path)
        expected = a3c.build_networks(env.state_dim, env.n_actions, cfg.hidden, cfg.dropout, cfg.shared)
        if set(nets) != set(expected):
            raise InvalidArgument(f"checkpoint holds networks {sorted(nets)}, expected {sorted(expected)}")
        for name, p in nets.items():
            if p.spec != expected[name].spec:
                raise InvalidArgument(
                    f"checkpoint network '{name}' is [{p.spec.header()}], "
                    f"the configuration needs [{expected[name].spec.header()}]")
        self.global_model_ = a3c.make_global_model(nets, cfg.hp)
        self.global_model_.load_state_arrays(arrays)
        self.episode_records_ = []
        self.monitor_records_ = []
        self._set_fitted(env)
        return self
