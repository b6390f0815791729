"""Greedy evaluation of a trained controller.

Rollouts always act with the policy mean from an eval-mode forward pass,
so the results depend only on the parameters and the start point.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .beamsim import MONITOR_COUNT, beam_from_spec, dump_phase_space, track_lattice
from .controls import CONTROL_NAMES, ActionBounds, ControlSettings, InvalidArgument
from .neural import GaussianHead, forward

logger = logging.getLogger(__name__)

UNDER_N = (100, 300, 700)


@dataclass
class Trajectory:
    start: ControlSettings
    controls: list = field(default_factory=list)
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    success: bool = False

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def status(self) -> str:
        return "success" if self.success else "step-limit"

    @property
    def final(self) -> ControlSettings:
        return ControlSettings.from_array(self.controls[-1])

    def to_csv(self, path) -> None:
        """Row 0 is the start; row k holds the controls after step k and the action taken."""
        n_act = len(self.actions[0]) if self.actions else 0
        head = ["step", *CONTROL_NAMES, *(f"action_{i}" for i in range(n_act)), "reward", "transmission"]
        with open(path, "w") as fh:
            fh.write(",".join(head) + "\n")
            for k, (x, s) in enumerate(zip(self.controls, self.states)):
                act = self.actions[k - 1] if k else np.full(n_act, np.nan)
                rew = self.rewards[k - 1] if k else np.nan
                vals = [k, *x, *act, rew, s[4]]
                fh.write(",".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in vals) + "\n")


@dataclass
class EvalSummary:
    sample_size: int
    success_rate: float
    bin_edges: list
    counts: list
    under_n_steps: dict
    lengths: list
    solution_points: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def percentiles(self, qs=(10, 50, 90)) -> dict:
        return {q: float(np.percentile(self.lengths, q)) for q in qs}


def _policy_net(nets):
    if isinstance(nets, dict):
        return nets["shared"] if "shared" in nets else nets["policy"]
    return nets


def greedy_rollout(params, env, start: ControlSettings, max_steps: int, head: GaussianHead | None = None) -> Trajectory:
    """Follow the policy mean from ``start`` until success or ``max_steps``.

    A start that already meets the threshold counts as success after zero steps.
    """
    net = _policy_net(params)
    head = head or GaussianHead(env.max_step)
    state = env.reset(start=start)
    traj = Trajectory(start=start, controls=[env.controls.copy()], states=[state])
    if env.transmission >= env.reward_params.threshold:
        traj.success = True
        return traj
    for _ in range(max_steps):
        raw, _ = forward(net, state, train=False)
        try:
            result = env.step(head(raw).mu)
        except Exception:
            break
        state = result.next_state
        traj.controls.append(env.controls.copy())
        traj.states.append(state)
        traj.actions.append(result.info["applied"])
        traj.rewards.append(result.reward)
        if result.info["success"]:
            traj.success = True
            break
        if result.done:
            break
    return traj


def sample_starts(env, sample_size: int, seed) -> list[ControlSettings]:
    rng = np.random.default_rng(seed)
    bounds = env.bounds
    starts = []
    idx = list(env.active)
    for _ in range(sample_size):
        x = env.design_point().to_array()
        x[idx] = bounds.sample(rng)[idx]
        starts.append(ControlSettings.from_array(x))
    return starts


def summarize(trajectories, max_steps: int, bin_width: int = 50) -> EvalSummary:
    n = len(trajectories)
    lengths = [t.length if t.success else max_steps for t in trajectories]
    successes = sum(t.success for t in trajectories)
    # failures get their own rightmost bin at max_steps
    edges = list(range(0, max_steps, bin_width)) + [max_steps, max_steps + 1]
    counts, _ = np.histogram(lengths, bins=edges)
    under = {
        str(k): float(sum(t.success and t.length <= k for t in trajectories) / n) for k in UNDER_N
    }
    return EvalSummary(
        sample_size=n,
        success_rate=successes / n,
        bin_edges=edges,
        counts=[int(c) for c in counts],
        under_n_steps=under,
        lengths=lengths,
        solution_points=[t.final.to_array().tolist() for t in trajectories if t.success],
    )


def random_start_eval(params, env_factory, sample_size: int, max_steps: int, seed=0,
                      bin_width: int = 50, return_trajectories: bool = False):
    """Greedy rollouts from ``sample_size`` seeded uniform starts, aggregated.

    Episodes that fail are counted at ``max_steps`` in the histogram.
    """
    if sample_size < 1:
        raise InvalidArgument("sample_size must be >= 1")
    env = env_factory()
    trajectories = [greedy_rollout(params, env, s, max_steps) for s in sample_starts(env, sample_size, seed)]
    summary = summarize(trajectories, max_steps, bin_width)
    return (summary, trajectories) if return_trajectories else summary


def export_solution_band(summaries, design: ControlSettings, path=None) -> list[list[float]]:
    """Terminal set-points of every successful rollout plus the design point (last row)."""
    if isinstance(summaries, EvalSummary):
        summaries = [summaries]
    rows = [list(p) for s in summaries for p in s.solution_points]
    if not rows:
        warnings.warn("no successful rollouts; solution band holds only the design point")
    rows.append(design.to_array().tolist())
    if path is not None:
        with open(path, "w") as fh:
            fh.write("kind," + ",".join(CONTROL_NAMES) + "\n")
            for i, r in enumerate(rows):
                kind = "design" if i == len(rows) - 1 else "rl"
                fh.write(kind + "," + ",".join(repr(float(v)) for v in r) + "\n")
    return rows


@dataclass
class PhaseSpaceComparison:
    rl_settings: ControlSettings
    expert_settings: ControlSettings
    rl: dict
    expert: dict
    stats: list

    def write(self, outdir) -> None:
        for label, dumps in (("rl", self.rl), ("expert", self.expert)):
            for m, pts in dumps.items():
                with open(f"{outdir}/phase_space_{label}_{m}.csv", "w") as fh:
                    fh.write("monitor,psi,delta\n")
                    for p, d in pts:
                        fh.write(f"{m},{p!r},{d!r}\n")
        with open(f"{outdir}/phase_space_summary.csv", "w") as fh:
            fh.write("source,monitor,alive_fraction,psi_std,delta_std\n")
            for row in self.stats:
                fh.write(",".join(str(v) for v in row) + "\n")


def _phase_dumps(env, settings: ControlSettings):
    beam = beam_from_spec(env.beam_spec)
    _, tracked = track_lattice(beam, settings, env.lattice)
    dumps = {m: dump_phase_space(tracked, m) for m in range(1, MONITOR_COUNT + 1)}
    return dumps, beam.count


def compare_phase_space(params, env, expert: ControlSettings | None = None, start: ControlSettings | None = None,
                        max_steps: int | None = None) -> PhaseSpaceComparison:
    """Phase-space dumps at every monitor for the policy's solution and the expert point."""
    expert = expert or env.design_point()
    start = start or env.start_point()
    traj = greedy_rollout(params, env, start, max_steps or env.episode.max_steps)
    if not traj.success:
        raise RuntimeError(f"greedy rollout failed to reach the threshold by step {traj.length}")
    rl_dumps, n = _phase_dumps(env, traj.final)
    ex_dumps, _ = _phase_dumps(env, expert)
    stats = []
    for label, dumps in (("rl", rl_dumps), ("expert", ex_dumps)):
        for m, pts in dumps.items():
            sd = pts.std(axis=0) if len(pts) else np.array([np.nan, np.nan])
            stats.append((label, m, len(pts) / n, float(sd[0]), float(sd[1])))
    return PhaseSpaceComparison(traj.final, expert, rl_dumps, ex_dumps, stats)
