"""Asynchronous advantage actor-critic over the linac tuning environment.

Workers own an environment and a private copy of the networks, collect
short rollouts, and push gradients into a lock-protected global model that
applies them with per-parameter RMS scaling.  With a single worker the
whole run is deterministic given its seeds.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .controls import InvalidArgument
from .neural import (
    GaussianHead,
    NetworkParams,
    NetworkSpec,
    backward,
    forward,
    gaussian_density,
    gaussian_density_grad,
    gaussian_entropy,
    gaussian_log_density,
    gaussian_log_density_grad,
    init_params,
    sample_action,
    tail_mass_outside,
    tail_mass_outside_grad,
)

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("eq6", "eq7")


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.99
    t_max: int = 20
    lr_policy: float = 1e-4
    lr_value: float = 1e-3
    c1: float = 10.0
    c2: float = 0.0
    epsilon0: float = 0.5
    epsilon_min: float = 0.02
    epsilon_decay: float = 0.995
    loss_variant: str = "eq7"
    workers: int = 1
    grad_clip: float = 5.0
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    # learning-side scaling of the environment reward (the bonus is 1000)
    reward_scale: float = 1e-3
    # weight of the value loss when actor and critic share one trunk
    value_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument("gamma must lie in (0, 1)")
        if self.t_max < 1 or self.workers < 1:
            raise InvalidArgument("t_max and workers must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise InvalidArgument(f"unknown loss variant {self.loss_variant!r}")
        if not 0.0 <= self.epsilon_min <= self.epsilon0 <= 1.0:
            raise InvalidArgument("need 0 <= epsilon_min <= epsilon0 <= 1")
        if self.grad_clip <= 0:
            raise InvalidArgument("grad_clip must be positive")


@dataclass
class RolloutBuffer:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    mus: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    lows: list = field(default_factory=list)
    highs: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    bootstrap_value: float = 0.0

    def add(self, state, action, mu, sigma, reward, lo, hi, done):
        self.states.append(state)
        self.actions.append(action)
        self.mus.append(mu)
        self.sigmas.append(sigma)
        self.rewards.append(reward)
        self.lows.append(lo)
        self.highs.append(hi)
        self.dones.append(done)

    def __len__(self):
        return len(self.rewards)


@dataclass
class EpisodeRecord:
    episode: int
    worker: int
    length: int
    total_reward: float
    success: bool
    epsilon: float
    wall_ms: float

    CSV_HEADER = "episode,worker,length,total_reward,success,epsilon,wall_ms"

    def csv_row(self) -> str:
        return (f"{self.episode},{self.worker},{self.length},{self.total_reward!r},"
                f"{int(self.success)},{self.epsilon!r},{self.wall_ms:.3f}")


# --- returns, losses ----------------------------------------------------

def compute_returns_advantages(rewards, gamma: float, values, bootstrap: float = 0.0, dones=None):
    """n-step discounted returns by backward recursion and advantages ``R - V``.

    A done flag cuts the recursion so no value leaks across an episode end.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise InvalidArgument("empty rollout")
    dones = np.zeros(len(rewards), bool) if dones is None else np.asarray(dones, bool)
    returns = np.empty_like(rewards)
    running = 0.0 if dones[-1] else float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns, returns - np.asarray(values, dtype=np.float64)


def policy_loss_terms(mu, sigma, actions, lows, highs, advantages, variant="eq7", c1=0.0, c2=0.0):
    """Mean policy loss over a batch and its gradient with respect to (mu, sigma).

    ``eq6`` weights the log-likelihood by the advantage, ``eq7`` the
    likelihood itself.  The penalty is the policy mass falling outside
    the feasible step bounds.
    """
    n = len(advantages)
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    if variant == "eq6":
        first = -gaussian_log_density(actions, mu, sigma) * adv[:, 0]
        gmu, gsig = gaussian_log_density_grad(actions, mu, sigma)
    elif variant == "eq7":
        first = -gaussian_density(actions, mu, sigma) * adv[:, 0]
        gmu, gsig = gaussian_density_grad(actions, mu, sigma)
    else:
        raise InvalidArgument(f"unknown loss variant {variant!r}")
    dmu, dsigma = -adv * gmu, -adv * gsig
    loss = first.sum()
    if c1:
        loss += c1 * tail_mass_outside(lows, highs, mu, sigma).sum()
        pmu, psig = tail_mass_outside_grad(lows, highs, mu, sigma)
        dmu, dsigma = dmu + c1 * pmu, dsigma + c1 * psig
    if c2:
        loss -= c2 * gaussian_entropy(sigma).sum()
        dsigma = dsigma - c2 / sigma
    return loss / n, dmu / n, dsigma / n


def policy_loss(params: NetworkParams, head: GaussianHead, buffer: RolloutBuffer, advantages,
                variant="eq7", c1=0.0, c2=0.0, dropout_seed=None, masks=None):
    """Policy loss and its gradient with respect to the flat policy parameters.

    Advantages enter as constants.  For a combined trunk only the policy
    outputs receive gradient here.
    """
    raw, trace = forward(params, np.asarray(buffer.states), train=True, dropout_seed=dropout_seed, masks=masks)
    pol = head(raw)
    loss, dmu, dsig = policy_loss_terms(pol.mu, pol.sigma, np.asarray(buffer.actions),
                                        np.asarray(buffer.lows), np.asarray(buffer.highs),
                                        advantages, variant, c1, c2)
    g_out = np.zeros_like(raw)
    g_out[:, :2 * head.dim] = head.backward(raw, dmu, dsig)
    return loss, backward(trace, params, g_out)


def value_loss(params: NetworkParams, buffer: RolloutBuffer, returns, dropout_seed=None, masks=None):
    """Mean squared error between critic outputs and returns, gradient through V only."""
    out, trace = forward(params, np.asarray(buffer.states), train=True, dropout_seed=dropout_seed, masks=masks)
    v = out[:, -1]
    diff = v - np.asarray(returns, dtype=np.float64)
    g_out = np.zeros_like(out)
    g_out[:, -1] = 2.0 * diff / len(diff)
    return float(np.mean(diff ** 2)), backward(trace, params, g_out)


def shared_loss(params: NetworkParams, head: GaussianHead, buffer: RolloutBuffer, advantages, returns,
                variant="eq7", c1=0.0, c2=0.0, value_coef=0.5, dropout_seed=None, masks=None):
    """Combined actor-critic objective on one trunk: policy loss + value_coef * value loss."""
    out, trace = forward(params, np.asarray(buffer.states), train=True, dropout_seed=dropout_seed, masks=masks)
    pol = head(out)
    ploss, dmu, dsig = policy_loss_terms(pol.mu, pol.sigma, np.asarray(buffer.actions),
                                         np.asarray(buffer.lows), np.asarray(buffer.highs),
                                         advantages, variant, c1, c2)
    diff = out[:, -1] - np.asarray(returns, dtype=np.float64)
    g_out = np.zeros_like(out)
    g_out[:, :2 * head.dim] = head.backward(out, dmu, dsig)
    g_out[:, -1] = value_coef * 2.0 * diff / len(diff)
    return ploss + value_coef * float(np.mean(diff ** 2)), backward(trace, params, g_out)


# --- exploration --------------------------------------------------------

def epsilon_schedule(episode_index: int, hp: HyperParams) -> float:
    return max(hp.epsilon_min, hp.epsilon0 * hp.epsilon_decay ** episode_index)


def select_action(policy, epsilon: float, lows, highs, rng) -> tuple[np.ndarray, bool]:
    """Epsilon-greedy: a uniform feasible step with probability epsilon,
    otherwise a sample from the Gaussian policy."""
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidArgument("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return rng.uniform(lows, highs), True
    return sample_action(policy, rng)[0], False


# --- shared model -------------------------------------------------------

class GlobalModel:
    """Parameters shared by all workers plus RMS accumulators and counters.

    One lock guards every update and snapshot, so a reader never sees a
    half-applied tensor.
    """

    def __init__(self, networks: dict, learning_rates: dict, hp: HyperParams):
        self.networks = networks
        self.learning_rates = learning_rates
        self.hp = hp
        self.accumulators = {k: np.zeros_like(v.flat) for k, v in networks.items()}
        self.lock = threading.Lock()
        self.episodes = 0
        self.completed = 0
        self.steps = 0
        self.submitted = 0
        self.updates = 0
        self.skipped = 0

    def snapshot(self) -> dict:
        with self.lock:
            return {k: v.flat.copy() for k, v in self.networks.items()}

    def sync_into(self, local: dict) -> None:
        with self.lock:
            for k, v in self.networks.items():
                local[k].assign(v.flat)

    def claim_episode(self, limit: int | None = None) -> int | None:
        """Next global episode index, or None once ``limit`` episodes are claimed."""
        with self.lock:
            if limit is not None and self.episodes >= limit:
                return None
            idx = self.episodes
            self.episodes += 1
            return idx

    def finish_episode(self) -> None:
        with self.lock:
            self.completed += 1

    def add_steps(self, n: int) -> None:
        with self.lock:
            self.steps += n

    def checksum(self) -> float:
        with self.lock:
            return float(sum(np.sum(v.flat) for v in self.networks.values()))

    def apply_gradients(self, grads: dict) -> bool:
        """Clip each network's gradient by its norm and apply an RMS-scaled step.

        Returns False (and counts a skip) when any gradient is non-finite.
        """
        for k, g in grads.items():
            if k not in self.networks or np.shape(g) != self.networks[k].flat.shape:
                raise InvalidArgument(f"gradient '{k}' does not match the global model")
        with self.lock:
            self.submitted += 1
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                self.skipped += 1
                return False
            rho, eps = self.hp.rms_decay, self.hp.rms_eps
            for k, g in grads.items():
                norm = float(np.linalg.norm(g))
                if norm > self.hp.grad_clip:
                    g = g * (self.hp.grad_clip / norm)
                acc = self.accumulators[k]
                acc *= rho
                acc += (1.0 - rho) * g * g
                params = self.networks[k]
                params.flat -= self.learning_rates[k] * g / np.sqrt(acc + eps)
                params.version += 1
            self.updates += 1
            return True

    def state_arrays(self) -> dict:
        with self.lock:
            out = {f"accum.{k}": v.copy() for k, v in self.accumulators.items()}
            out["counters"] = np.array([self.completed, self.steps, self.submitted, self.updates, self.skipped], float)
            return out

    def load_state_arrays(self, arrays: dict) -> None:
        with self.lock:
            for k in self.accumulators:
                if f"accum.{k}" in arrays:
                    self.accumulators[k][:] = arrays[f"accum.{k}"]
            if "counters" in arrays:
                c = [int(v) for v in arrays["counters"]]
                self.completed, self.steps, self.submitted, self.updates, self.skipped = c
                # episodes claimed but never finished are rerun after a resume
                self.episodes = self.completed


def build_networks(state_dim: int, n_actions: int, hidden, dropout: float = 0.1,
                   shared: bool = False, seed: int = 0) -> dict:
    if shared:
        spec = NetworkSpec(state_dim, tuple(hidden), policy_dim=n_actions, value_head=True, dropout=dropout)
        return {"shared": init_params(spec, [seed, 0])}
    return {
        "policy": init_params(NetworkSpec(state_dim, tuple(hidden), policy_dim=n_actions, dropout=dropout), [seed, 1]),
        "value": init_params(NetworkSpec(state_dim, tuple(hidden), value_head=True, dropout=dropout), [seed, 2]),
    }


def make_global_model(networks: dict, hp: HyperParams) -> GlobalModel:
    lrs = {k: (hp.lr_value if k == "value" else hp.lr_policy) for k in networks}
    return GlobalModel(networks, lrs, hp)


def _policy_net(nets: dict) -> NetworkParams:
    return nets["shared"] if "shared" in nets else nets["policy"]


def _value_net(nets: dict) -> NetworkParams:
    return nets["shared"] if "shared" in nets else nets["value"]


def greedy_action(nets: dict, head: GaussianHead, state) -> np.ndarray:
    raw, _ = forward(_policy_net(nets), state, train=False)
    return head(raw).mu


def state_value(nets: dict, state) -> np.ndarray:
    out, _ = forward(_value_net(nets), state, train=False)
    return out[..., -1]


def compute_gradients(local: dict, head: GaussianHead, buffer: RolloutBuffer, hp: HyperParams,
                      dropout_seed) -> tuple[dict, dict]:
    states = np.asarray(buffer.states)
    values = state_value(local, states)
    rewards = np.asarray(buffer.rewards) * hp.reward_scale
    returns, adv = compute_returns_advantages(rewards, hp.gamma, values, buffer.bootstrap_value, buffer.dones)
    # c1 and c2 are weights relative to unscaled rewards; keep that balance
    c1, c2 = hp.c1 * hp.reward_scale, hp.c2 * hp.reward_scale
    if "shared" in local:
        loss, g = shared_loss(local["shared"], head, buffer, adv, returns, hp.loss_variant,
                              c1, c2, hp.value_coef, dropout_seed)
        return {"shared": g}, {"loss": loss}
    ploss, gp = policy_loss(local["policy"], head, buffer, adv, hp.loss_variant, c1, c2, [dropout_seed, 1])
    vloss, gv = value_loss(local["value"], buffer, returns, [dropout_seed, 2])
    return {"policy": gp, "value": gv}, {"policy_loss": ploss, "value_loss": vloss}


# --- worker and monitor -------------------------------------------------

def run_worker(worker_id: int, env, global_model: GlobalModel, hp: HyperParams, stop: threading.Event,
               max_episodes: int, on_episode=None) -> list[EpisodeRecord]:
    """Train against ``env`` until ``stop`` is set or the global episode budget is spent.

    Each episode yields an :class:`EpisodeRecord` (also passed to
    ``on_episode``).  Environment errors propagate after setting ``stop``.
    """
    rng = np.random.default_rng([hp.seed, worker_id, 17])
    local = {k: v.copy() for k, v in global_model.networks.items()}
    head = GaussianHead(env.max_step)
    records = []
    try:
        while not stop.is_set():
            episode = global_model.claim_episode(max_episodes)
            if episode is None:
                break
            eps = epsilon_schedule(episode, hp)
            t0 = time.perf_counter()
            state = env.reset(seed=int(rng.integers(2**31)))
            total, length, done, success = 0.0, 0, False, False
            while not done and not stop.is_set():
                global_model.sync_into(local)
                buf = RolloutBuffer()
                while len(buf) < hp.t_max and not done:
                    raw, _ = forward(_policy_net(local), state, train=False)
                    pol = head(raw)
                    lo, hi = env.feasible_bounds()
                    action, _ = select_action(pol, eps, lo, hi, rng)
                    result = env.step(action)
                    buf.add(state, action, pol.mu, pol.sigma, result.reward, lo, hi, result.done)
                    total += result.reward
                    length += 1
                    done = result.done
                    success = result.info["success"]
                    state = result.next_state
                buf.bootstrap_value = 0.0 if done else float(state_value(local, state))
                grads, _ = compute_gradients(local, head, buf, hp, int(rng.integers(2**31)))
                global_model.apply_gradients(grads)
                global_model.add_steps(len(buf))
            if not done:
                break
            global_model.finish_episode()
            rec = EpisodeRecord(episode, worker_id, length, total, success, eps,
                                (time.perf_counter() - t0) * 1e3)
            records.append(rec)
            if on_episode is not None:
                on_episode(rec)
    except Exception:
        stop.set()
        logger.exception("worker %d aborted", worker_id)
        raise
    return records


def run_monitor(env, global_model: GlobalModel, cadence: int, stop: threading.Event,
                on_record=None, poll: float = 0.05) -> list[EpisodeRecord]:
    """Every ``cadence`` global episodes run one greedy episode from the env's
    fixed start on a snapshot of the global policy.  Never writes to the model."""
    from .evalkit import greedy_rollout

    records = []
    next_at = cadence
    head = GaussianHead(env.max_step)
    while True:
        finished = stop.is_set()
        if global_model.episodes >= next_at or finished:
            snap = global_model.snapshot()
            nets = {k: NetworkParams(v.spec, snap[k]) for k, v in global_model.networks.items()}
            t0 = time.perf_counter()
            traj = greedy_rollout(nets, env, env.start_point(), env.episode.max_steps, head=head)
            rec = EpisodeRecord(global_model.episodes, -1, traj.length, traj.total_reward, traj.success,
                                0.0, (time.perf_counter() - t0) * 1e3)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            next_at = (global_model.episodes // cadence + 1) * cadence
        if finished:
            return records
        stop.wait(poll)


def train(env_factory, global_model: GlobalModel, hp: HyperParams, max_episodes: int,
          on_episode=None, monitor_env=None, monitor_cadence: int | None = None, on_monitor=None,
          stop: threading.Event | None = None) -> tuple[list, list]:
    """Run ``hp.workers`` workers (plus an optional monitor) to the episode budget.

    With one worker it runs in the calling thread, which keeps episode
    records reproducible; the monitor always runs on its own thread.
    """
    stop = stop or threading.Event()
    lock = threading.Lock()

    def emit(rec):
        if on_episode is not None:
            with lock:
                on_episode(rec)

    monitor_records = []
    monitor_thread = None
    monitor_stop = threading.Event()
    if monitor_env is not None and monitor_cadence:
        def _monitor():
            monitor_records.extend(run_monitor(monitor_env, global_model, monitor_cadence, monitor_stop, on_monitor))
        monitor_thread = threading.Thread(target=_monitor, name="monitor", daemon=True)
        monitor_thread.start()

    errors = []
    try:
        if hp.workers == 1:
            records = run_worker(0, env_factory(0), global_model, hp, stop, max_episodes, emit)
        else:
            results = [[] for _ in range(hp.workers)]

            def _work(i):
                try:
                    results[i] = run_worker(i, env_factory(i), global_model, hp, stop, max_episodes, emit)
                except Exception as exc:  # re-raised in the caller below
                    errors.append(exc)

            threads = [threading.Thread(target=_work, args=(i,), name=f"worker-{i}") for i in range(hp.workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            records = sorted((r for rs in results for r in rs), key=lambda r: r.episode)
    finally:
        monitor_stop.set()
        if monitor_thread is not None:
            monitor_thread.join()
    if errors:
        raise errors[0]
    return records, monitor_records
