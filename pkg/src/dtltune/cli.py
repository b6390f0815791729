"""Command-line entry point: ``dtltune {calibrate,train,eval,rollout,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
The output directory comes from ``--out``, else ``$DTLTUNE_OUTPUT_DIR``,
else ``[run] output_dir`` in the config.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import threading
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .a3c import EpisodeRecord
from .beamsim import CalibrationError, calibrate
from .config import MODE_DEFAULTS, ConfigError, RunConfig, load_config, parse_config
from .controls import CONTROL_NAMES, ControlSettings, InvalidArgument
from .estimator import A3CTuner
from .evalkit import compare_phase_space, export_solution_band, greedy_rollout, sample_starts
from .neural import NetworkParams, save_checkpoint
from . import plots

logger = logging.getLogger("dtltune")

OUTPUT_ENV = "DTLTUNE_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MAX_SKIP_FRACTION = 0.01
CHECKPOINT_NAME = "checkpoint.txt"


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(flag, cfg: RunConfig | None, default: str | None = None) -> Path:
    out = flag or os.environ.get(OUTPUT_ENV) or default or (cfg.output_dir if cfg else "runs/latest")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config_or_manifest(path) -> RunConfig:
    p = Path(path)
    if p.suffix == ".json":
        try:
            manifest = json.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid manifest JSON: {exc}") from exc
        if "config" not in manifest:
            raise ConfigError(f"{path}: manifest has no 'config' entry")
        return parse_config(manifest["config"], str(path))
    return load_config(path)


def _find_run_config(checkpoint: Path, explicit) -> RunConfig:
    if explicit:
        return load_config(explicit)
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "config.ini").exists():
            return load_config(d / "config.ini")
    raise ConfigError(f"no --config given and no config.ini next to {checkpoint}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# --- calibrate ------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        print(f"{args.config}: configuration valid (mode {cfg.mode}, digest {cfg.digest()})")
        return EXIT_OK
    try:
        lattice, report = calibrate(cfg.lattice, cfg.beam, cfg.calibration, cfg.calibration_budget)
    except CalibrationError as exc:
        print(exc.report.summary(), file=sys.stderr)
        raise RuntimeFailure("calibration did not meet its targets") from exc
    new_cfg = replace(cfg, lattice=lattice)
    out = Path(args.out) if args.out else _output_dir(None, cfg) / "calibrated.ini"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(new_cfg.to_ini())
    print(report.summary())
    print(f"design-point transmission: {report.design_transmission:.4f}")
    print(f"calibrated config written to {out}")
    return EXIT_OK


# --- train -----------------------------------------------------------------

def _manifest(cfg: RunConfig, argv, resumed_from=None) -> dict:
    digest = cfg.digest()
    return {
        "version": f"{__version__}-g{digest[:7]}",
        "package_version": __version__,
        "config_digest": digest,
        "config": cfg.to_ini(),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "worker_seeds": [cfg.seed * 1000 + i for i in range(cfg.workers)],
        "beam_seed": cfg.beam.seed,
        "workers": cfg.workers,
        "episodes": cfg.episodes,
        "record_wall_time": cfg.record_wall_time,
        "resumed_from": str(resumed_from) if resumed_from else None,
        "argv": list(argv),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _snapshot_checkpoint(est: A3CTuner, path) -> None:
    gm = est.global_model_
    with gm.lock:
        nets = {k: NetworkParams(v.spec, v.flat.copy()) for k, v in gm.networks.items()}
    save_checkpoint(path, nets, gm.state_arrays())


def _write_counters(path, gm) -> None:
    with gm.lock:
        data = {"episodes_completed": gm.completed, "steps": gm.steps, "updates_submitted": gm.submitted,
                "updates_applied": gm.updates, "updates_skipped": gm.skipped}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _load_config_or_manifest(args.config)
    over = {}
    if args.mode and args.mode != cfg.mode:
        # switching mode re-derives the mode presets unless set explicitly
        over.update(mode=args.mode, episodes=None, workers=None, monitor=None, max_steps=None,
                    reset_mode=None, hidden=None, eval_sample_size=None, eval_max_steps=None,
                    round_episodes=None)
        if cfg.hp.lr_policy == MODE_DEFAULTS[cfg.mode]["lr_policy"]:
            over["hp"] = replace(cfg.hp, lr_policy=MODE_DEFAULTS[args.mode]["lr_policy"])
    for flag, key in ((args.workers, "workers"), (args.episodes, "episodes"), (args.seed, "seed")):
        if flag is not None:
            over[key] = flag
    if args.monitor is not None:
        over["monitor"] = args.monitor
    if args.no_wall_time:
        over["record_wall_time"] = False
    if over:
        if "episodes" in over and "round_episodes" not in over:
            over["round_episodes"] = None
        cfg = replace(cfg, **over)
    if args.rounds is not None:
        if args.rounds < 1:
            raise UsageError("--rounds must be >= 1")
        cfg = replace(cfg, round_episodes=max(1, cfg.episodes // args.rounds))
    if cfg.workers < 1 or cfg.episodes < 1:
        raise UsageError("workers and episodes must be >= 1")
    outdir = _output_dir(args.out, cfg)

    est = A3CTuner.from_config(cfg)
    resumed = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        try:
            est.load(ckpt)
        except InvalidArgument as exc:
            raise UsageError(f"checkpoint does not match the configuration: {exc}") from exc
        est.warm_start = True
        resumed = ckpt
        logger.info("resuming from %s at episode %d", ckpt, est.global_model_.completed)
    else:
        est.warm_start = False

    (outdir / "config.ini").write_text(cfg.to_ini())
    (outdir / "manifest.json").write_text(json.dumps(_manifest(cfg, sys.argv[1:], resumed), indent=2) + "\n")
    ckdir = outdir / "checkpoints"
    ckdir.mkdir(exist_ok=True)

    append = resumed is not None and (outdir / "episodes.csv").exists()
    ep_fh = open(outdir / "episodes.csv", "a" if append else "w")
    mon_fh = open(outdir / "monitor.csv", "a" if append and (outdir / "monitor.csv").exists() else "w")
    if not append:
        ep_fh.write(EpisodeRecord.CSV_HEADER + "\n")
        mon_fh.write(EpisodeRecord.CSV_HEADER + "\n")
    stop = threading.Event()
    aborted = []
    state = {"since_ckpt": 0}

    def row(rec):
        if not cfg.record_wall_time:
            rec = replace(rec, wall_ms=0.0)
        return rec.csv_row() + "\n"

    def on_episode(rec):
        ep_fh.write(row(rec))
        ep_fh.flush()
        gm = est.global_model_
        if gm.submitted >= 100 and gm.skipped > MAX_SKIP_FRACTION * gm.submitted:
            aborted.append((gm.skipped, gm.submitted))
            stop.set()
        state["since_ckpt"] += 1
        if state["since_ckpt"] >= cfg.checkpoint_every:
            state["since_ckpt"] = 0
            _snapshot_checkpoint(est, ckdir / f"ckpt_{gm.completed:06d}.txt")
            _write_counters(outdir / "counters.json", gm)
        if rec.episode % 50 == 0:
            logger.info("episode %d worker %d length %d success %s", rec.episode, rec.worker, rec.length, rec.success)

    def on_monitor(rec):
        mon_fh.write(row(rec))
        mon_fh.flush()

    try:
        est.fit(on_episode=on_episode, on_monitor=on_monitor, stop=stop)
    except KeyboardInterrupt:
        stop.set()
        logger.warning("interrupted; writing checkpoint")
    finally:
        ep_fh.close()
        mon_fh.close()
    gm = est.global_model_
    _snapshot_checkpoint(est, outdir / CHECKPOINT_NAME)
    _write_counters(outdir / "counters.json", gm)
    frac = gm.skipped / gm.submitted if gm.submitted else 0.0
    if aborted or frac > MAX_SKIP_FRACTION:
        raise RuntimeFailure(
            f"training aborted: {gm.skipped} of {gm.submitted} updates had non-finite gradients "
            f"({100 * frac:.2f}% > {100 * MAX_SKIP_FRACTION:.0f}%); try a lower learning rate or tighter grad_clip")
    recs = est.episode_records_
    succ = sum(r.success for r in recs)
    print(f"trained {len(recs)} episodes ({succ} successful), {gm.updates} updates; run directory {outdir}")
    return EXIT_OK


# --- eval ------------------------------------------------------------------

def _load_estimator(checkpoint, config_path) -> tuple[A3CTuner, RunConfig]:
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg = _find_run_config(ckpt, config_path)
    est = A3CTuner.from_config(cfg)
    try:
        est.load(ckpt)
    except InvalidArgument as exc:
        raise UsageError(f"checkpoint does not match the configuration: {exc}") from exc
    return est, cfg


def cmd_eval(args) -> int:
    est, cfg = _load_estimator(args.checkpoint, args.config)
    outdir = _output_dir(args.out, None, str(Path(args.checkpoint).resolve().parent / "eval"))
    size = args.sample_size or cfg.eval_sample_size
    steps = args.max_steps or cfg.eval_max_steps
    seed = cfg.eval_seed if args.seed is None else args.seed
    if size < 1 or steps < 1:
        raise UsageError("--sample-size and --max-steps must be >= 1")
    summary, trajs = est.evaluate(size, steps, seed, return_trajectories=True)
    (outdir / "eval_summary.json").write_text(summary.to_json() + "\n")
    rows = [(lo, hi, c) for lo, hi, c in zip(summary.bin_edges[:-1], summary.bin_edges[1:], summary.counts)]
    _write_csv(outdir / "eval_summary.csv", ["bin_lo", "bin_hi", "count"], rows)
    tdir = outdir / "trajectories"
    tdir.mkdir(exist_ok=True)
    for k, t in enumerate(trajs):
        t.to_csv(tdir / f"trajectory_{k}.csv")
    env = cfg.make_env(0)
    export_solution_band(summary, env.design_point(), outdir / "solution_band.csv")
    if not args.no_phase_space:
        try:
            cmp = compare_phase_space(est.networks_, env, max_steps=cfg.max_steps)
            cmp.write(outdir)
        except RuntimeError as exc:
            logger.warning("phase-space comparison skipped: %s", exc)
    pct = summary.percentiles() if summary.lengths else {}
    print(f"success rate: {summary.success_rate:.4f} ({round(summary.success_rate * size)}/{size})")
    print("steps percentiles (failures counted at max steps): "
          + ", ".join(f"p{q}={v:g}" for q, v in pct.items()))
    print("success within N steps: " + ", ".join(f"<= {k}: {v:.3f}" for k, v in summary.under_n_steps.items()))
    print(f"artifacts written to {outdir}")
    return EXIT_OK


# --- rollout -----------------------------------------------------------------

def _parse_start(tokens, env, seed) -> ControlSettings:
    if len(tokens) == 1 and tokens[0] in ("random", "expert"):
        if tokens[0] == "expert":
            return env.design_point()
        return sample_starts(env, 1, seed)[0]
    if len(tokens) != 5:
        raise UsageError("--start takes 'random', 'expert' or five control values")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise UsageError(f"--start: {exc}") from exc
    try:
        return ControlSettings.from_array(values).validate(env.bounds)
    except InvalidArgument as exc:
        raise UsageError(f"--start outside the control ranges: {exc}") from exc


def cmd_rollout(args) -> int:
    est, cfg = _load_estimator(args.checkpoint, args.config)
    env = cfg.make_env(0)
    start = _parse_start(args.start, env, args.seed)
    outdir = _output_dir(args.out, None, str(Path(args.checkpoint).resolve().parent / "rollout"))
    traj = greedy_rollout(est.networks_, env, start, args.max_steps or cfg.max_steps)
    traj.to_csv(outdir / "trajectory.csv")
    x = np.asarray(traj.controls)
    u = (x - env.bounds.min) / (env.bounds.max - env.bounds.min)
    steps = np.arange(len(x))
    plots.line_plot(outdir / "trajectory.svg",
                    {name: (steps, u[:, i]) for i, name in enumerate(CONTROL_NAMES)},
                    title="greedy rollout", xlabel="step", ylabel="control (fraction of range)")
    plots.scatter_plot(outdir / "trajectory_projection.svg",
                       {"path": x[:, [0, 2]], "design": env.design_point().to_array()[[0, 2]][None]},
                       title="path projection", xlabel="t1_amp", ylabel="t2_phase")
    print(f"{traj.status} after {traj.length} steps; final transmission {traj.states[-1][4]:.4f}")
    print(f"trajectory written to {outdir / 'trajectory.csv'}")
    return EXIT_OK


# --- report ------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _rolling(values, window):
    v = np.asarray(values, dtype=float)
    if not len(v):
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    required = ["episodes.csv", "config.ini"]
    missing = [name for name in required if not (run / name).exists()]
    if missing:
        raise RuntimeFailure(f"{run}: missing run artifacts: {', '.join(missing)}")
    cfg = load_config(run / "config.ini")
    rows = _read_csv(run / "episodes.csv")
    if not rows:
        raise RuntimeFailure(f"{run}: episodes.csv holds no episodes")
    out = run / "report"
    out.mkdir(exist_ok=True)
    rows.sort(key=lambda r: int(r["episode"]))
    ep = np.array([int(r["episode"]) for r in rows])
    length = np.array([int(r["length"]) for r in rows], float)
    rew = np.array([float(r["total_reward"]) for r in rows])
    window = max(1, len(rows) // 20)
    written = []

    for name, vals, label in (("episode_length", length, "steps"), ("reward", rew, "total reward")):
        smooth = _rolling(vals, window)
        _write_csv(out / f"{name}.csv", ["episode", name, f"rolling_mean_{window}"],
                   [(e, _fmt(v), _fmt(s)) for e, v, s in zip(ep, vals, smooth)])
        plots.line_plot(out / f"{name}.svg", {"episode": (ep, vals), f"mean of {window}": (ep, smooth)},
                        title=f"{name.replace('_', ' ')} per episode", xlabel="episode", ylabel=label)
        written += [f"{name}.csv", f"{name}.svg"]

    if (run / "monitor.csv").exists():
        mon = _read_csv(run / "monitor.csv")
        if mon:
            me = np.array([int(r["episode"]) for r in mon])
            ml = np.array([int(r["length"]) for r in mon], float)
            _write_csv(out / "monitor_length.csv", ["episode", "length", "success"],
                       [(r["episode"], r["length"], r["success"]) for r in mon])
            plots.line_plot(out / "monitor_length.svg", {"monitor": (me, ml)},
                            title="monitoring agent episode length", xlabel="global episode", ylabel="steps")
            written += ["monitor_length.csv", "monitor_length.svg"]

    # first vs last round histograms
    per_round = max(1, cfg.round_episodes)
    n_rounds = int(np.ceil(len(rows) / per_round))
    first = slice(0, per_round)
    last = slice((n_rounds - 1) * per_round, len(rows))
    hist_rows = []
    for name, vals, bins in (("length", length, np.linspace(0, cfg.max_steps + 1, 21)),
                             ("reward", rew, np.histogram_bin_edges(rew, 20))):
        counts = {}
        for label, sl in (("first round", first), ("last round", last)):
            c, _ = np.histogram(vals[sl], bins=bins)
            counts[label] = c
            hist_rows += [(label.split()[0], name, _fmt(lo), _fmt(hi), int(n))
                          for lo, hi, n in zip(bins[:-1], bins[1:], c)]
        plots.histogram_plot(out / f"{name}_histograms.svg", bins, counts,
                             title=f"episode {name}: first vs last round ({n_rounds} rounds)", xlabel=name)
        written.append(f"{name}_histograms.svg")
    _write_csv(out / "round_histograms.csv", ["round", "quantity", "bin_lo", "bin_hi", "count"], hist_rows)
    written.append("round_histograms.csv")

    eval_dir = next((d for d in (run, run / "eval") if (d / "solution_band.csv").exists()), None)
    if eval_dir is not None:
        band = _read_csv(eval_dir / "solution_band.csv")
        pts = np.array([[float(r[n]) for n in CONTROL_NAMES] for r in band])
        kinds = [r["kind"] for r in band]
        rl = pts[[k == "rl" for k in kinds]]
        design = pts[[k == "design" for k in kinds]]
        for a, b in ((0, 1), (0, 2), (1, 2), (2, 4), (1, 3)):
            tag = f"{CONTROL_NAMES[a]}_{CONTROL_NAMES[b]}"
            _write_csv(out / f"solution_band_{tag}.csv", ["kind", CONTROL_NAMES[a], CONTROL_NAMES[b]],
                       [(k, _fmt(p[a]), _fmt(p[b])) for k, p in zip(kinds, pts)])
            plots.scatter_plot(out / f"solution_band_{tag}.svg",
                               {"policy solutions": rl[:, [a, b]], "design": design[:, [a, b]]},
                               title="solution band", xlabel=CONTROL_NAMES[a], ylabel=CONTROL_NAMES[b])
            written += [f"solution_band_{tag}.csv", f"solution_band_{tag}.svg"]
        for m in range(1, 6):
            pair = {lab: eval_dir / f"phase_space_{lab}_{m}.csv" for lab in ("rl", "expert")}
            if all(p.exists() for p in pair.values()):
                groups = {}
                csv_rows = []
                for lab, p in pair.items():
                    data = _read_csv(p)
                    groups[lab] = np.array([[float(r["psi"]), float(r["delta"])] for r in data]).reshape(-1, 2)
                    csv_rows += [(lab, r["psi"], r["delta"]) for r in data]
                _write_csv(out / f"phase_space_{m}.csv", ["source", "psi", "delta"], csv_rows)
                plots.scatter_plot(out / f"phase_space_{m}.svg", groups, title=f"phase space at monitor {m}",
                                   xlabel="psi (rad)", ylabel="delta")
                written += [f"phase_space_{m}.csv", f"phase_space_{m}.svg"]
    else:
        logger.info("no evaluation artifacts in %s; solution band and phase space skipped", run)
    print(f"report written to {out} ({len(written)} files)")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtltune", description="Train and evaluate an actor-critic tuner on a simulated linac.")
    p.add_argument("--version", action="version", version=f"dtltune {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="fit lattice constants so the design point transmits and random points do not")
    c.add_argument("config", help="run configuration file")
    c.add_argument("--out", help="path of the calibrated config (default: <output dir>/calibrated.ini)")
    c.add_argument("--dry-run", action="store_true", help="validate the configuration only")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", help="train the actor-critic agents")
    t.add_argument("config", help="run configuration file, or a manifest.json from an earlier run")
    t.add_argument("--mode", choices=("3action", "5action"), help="control preset (overrides the config)")
    t.add_argument("--workers", type=int, help="number of learning workers")
    t.add_argument("--episodes", type=int, help="global episode budget")
    t.add_argument("--rounds", type=int, help="split the budget into this many rounds for reporting")
    t.add_argument("--seed", type=int, help="run seed")
    t.add_argument("--monitor", dest="monitor", action="store_true", default=None,
                   help="run the greedy monitoring agent")
    t.add_argument("--no-monitor", dest="monitor", action="store_false")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    t.add_argument("--no-wall-time", action="store_true",
                   help="write wall_ms as 0 so repeated single-worker runs give byte-identical logs")
    t.add_argument("--out", help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy rollouts from random starts")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="run configuration (default: config.ini of the run)")
    e.add_argument("--sample-size", type=int)
    e.add_argument("--max-steps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--no-phase-space", action="store_true", help="skip the phase-space comparison")
    e.add_argument("--out", help="output directory (default: <run>/eval)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="one greedy rollout from a given start")
    r.add_argument("checkpoint")
    r.add_argument("--start", nargs="+", required=True, metavar="X",
                   help="'random', 'expert', or five values: t1_amp t2_amp t2_phase t3_amp t3_phase")
    r.add_argument("--config", help="run configuration (default: config.ini of the run)")
    r.add_argument("--max-steps", type=int)
    r.add_argument("--seed", type=int, default=0, help="seed for --start random")
    r.add_argument("--out", help="output directory (default: <run>/rollout)")
    r.set_defaults(func=cmd_rollout)

    rp = sub.add_parser("report", help="CSV and SVG figures from a run directory")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, InvalidArgument) as exc:
        print(f"dtltune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"dtltune {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # unexpected failure inside a run
        logger.debug("traceback", exc_info=True)
        print(f"dtltune {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
