"""Longitudinal macro-particle surrogate of a three-tank drift-tube linac.

Each particle carries a phase deviation ``psi`` (radians) and a relative
energy deviation ``delta`` from the design synchronous particle.  Every
accelerating cell applies one RF-gap kick followed by a drift::

    delta' = delta + g * (r * cos(phi_s + off + psi) - cos(phi_s))
    psi'   = psi - K * delta'

``r`` is the tank amplitude relative to its design value and ``off`` the
tank phase offset.  At ``r = 1, off = 0`` the synchronous particle
(``psi = 0``) gets no net kick.  Any other setting gives the centroid an
energy error per cell, which the fixed drift lengths turn into phase slip
until the beam leaves the bucket.  Particles outside the longitudinal
acceptance are lost.

Monitors sit at the exit of each of the five segments: the three tunable
tanks followed by two fixed downstream segments run at design settings.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .controls import ActionBounds, ControlSettings, InvalidArgument, ProtocolError

logger = logging.getLogger(__name__)

MONITOR_COUNT = 5


@dataclass
class Particle:
    psi: float
    delta: float
    alive: bool = True
    loss_region: int | None = None


@dataclass(frozen=True)
class TankConfig:
    cells: int
    design_amplitude: float
    design_phase: float
    coupling_k: float
    acceptance_psi: float
    acceptance_delta: float

    def __post_init__(self):
        if int(self.cells) != self.cells or self.cells < 1:
            raise InvalidArgument("cells must be a positive integer")
        if not (0.0 < self.acceptance_psi <= math.pi):
            raise InvalidArgument("acceptance_psi must lie in (0, pi]")
        if self.acceptance_delta <= 0:
            raise InvalidArgument("acceptance_delta must be positive")
        if self.coupling_k <= 0:
            raise InvalidArgument("coupling_k must be positive")
        if self.design_amplitude <= 0:
            raise InvalidArgument("design_amplitude must be positive")


def _default_tanks() -> tuple[TankConfig, ...]:
    common = dict(coupling_k=2.0, acceptance_psi=math.pi, acceptance_delta=0.15)
    return (
        TankConfig(cells=10, design_amplitude=44.5, design_phase=0.0, **common),
        TankConfig(cells=10, design_amplitude=71.8, design_phase=270.0, **common),
        TankConfig(cells=10, design_amplitude=70.0, design_phase=260.0, **common),
        TankConfig(cells=6, design_amplitude=1.0, design_phase=0.0, **common),
        TankConfig(cells=6, design_amplitude=1.0, design_phase=0.0, **common),
    )


@dataclass(frozen=True)
class LatticeConfig:
    """Three controllable tanks plus two fixed segments.

    ``gain`` is the per-cell kick strength and ``sync_phase`` the design
    synchronous phase in degrees (negative means the stable side of the
    RF wave).
    """

    tanks: tuple[TankConfig, ...] = field(default_factory=_default_tanks)
    gain: float = 0.02
    sync_phase: float = -30.0
    input_current: float = 1.0
    monitor_count: int = MONITOR_COUNT

    def __post_init__(self):
        object.__setattr__(self, "tanks", tuple(self.tanks))
        if self.monitor_count != MONITOR_COUNT or len(self.tanks) != MONITOR_COUNT:
            raise InvalidArgument("lattice needs exactly 3 tanks + 2 fixed segments (5 monitors)")
        if self.input_current <= 0:
            raise InvalidArgument("input_current must be positive")
        if self.gain <= 0:
            raise InvalidArgument("gain must be positive")

    def design_point(self) -> ControlSettings:
        t1, t2, t3 = self.tanks[:3]
        return ControlSettings(
            t1.design_amplitude, t2.design_amplitude, t2.design_phase,
            t3.design_amplitude, t3.design_phase,
        )

    def effective_settings(self, controls: ControlSettings) -> tuple[np.ndarray, np.ndarray]:
        """Relative amplitudes and phase offsets (radians) for the five segments."""
        t1, t2, t3 = self.tanks[:3]
        amps = np.array([
            controls.t1_amp / t1.design_amplitude,
            controls.t2_amp / t2.design_amplitude,
            controls.t3_amp / t3.design_amplitude,
            1.0,
            1.0,
        ])
        offsets = np.radians([
            0.0,
            controls.t2_phase - t2.design_phase,
            controls.t3_phase - t3.design_phase,
            0.0,
            0.0,
        ])
        return amps, offsets

    def reference_energy(self) -> np.ndarray:
        """Normalized reference energy at the end of each segment."""
        cells = np.cumsum([t.cells for t in self.tanks], dtype=float)
        return cells / cells[-1]


@dataclass(frozen=True)
class BeamSpec:
    count: int = 1024
    seed: int = 12345
    psi_sigma: float = 0.15
    delta_sigma: float = 0.01
    truncation: float = 3.0


@dataclass
class BeamEnsemble:
    """Macro-particles stored column-wise; ``loss_region`` is -1 while alive."""

    psi: np.ndarray
    delta: np.ndarray
    alive: np.ndarray
    loss_region: np.ndarray
    seed: int | None = None
    snapshots: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.psi)

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())

    def lost_counts(self) -> np.ndarray:
        regions = self.loss_region[~self.alive]
        return np.bincount(regions, minlength=MONITOR_COUNT)

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(float(p), float(d), bool(a), None if r < 0 else int(r))
            for p, d, a, r in zip(self.psi, self.delta, self.alive, self.loss_region)
        ]

    def copy(self) -> "BeamEnsemble":
        return BeamEnsemble(
            self.psi.copy(), self.delta.copy(), self.alive.copy(), self.loss_region.copy(),
            seed=self.seed,
        )


@dataclass(frozen=True)
class MonitorReadings:
    current: np.ndarray
    lost_power: np.ndarray
    input_current: float = 1.0

    @property
    def transmission(self) -> float:
        return float(self.current[-1] / self.input_current)


def make_initial_beam(count: int, seed: int, spread: tuple[float, float], truncation: float = 3.0) -> BeamEnsemble:
    """Draw a truncated bivariate Gaussian beam, all particles alive.

    Samples beyond ``truncation`` standard deviations in either coordinate
    are redrawn, so the result is an exact truncated distribution.
    """
    psi_sigma, delta_sigma = spread
    if int(count) != count or count < 1:
        raise InvalidArgument("count must be a positive integer")
    if psi_sigma <= 0 or delta_sigma <= 0:
        raise InvalidArgument("beam spreads must be positive")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, 2))
    bad = np.any(np.abs(z) > truncation, axis=1)
    while bad.any():
        z[bad] = rng.standard_normal((int(bad.sum()), 2))
        bad = np.any(np.abs(z) > truncation, axis=1)
    return BeamEnsemble(
        psi=z[:, 0] * psi_sigma,
        delta=z[:, 1] * delta_sigma,
        alive=np.ones(count, dtype=bool),
        loss_region=np.full(count, -1, dtype=np.int64),
        seed=seed,
    )


def beam_from_spec(spec: BeamSpec, seed: int | None = None) -> BeamEnsemble:
    return make_initial_beam(
        spec.count, spec.seed if seed is None else seed,
        (spec.psi_sigma, spec.delta_sigma), spec.truncation,
    )


def cell_map(particle: Particle, amp: float, phi_offset: float, tank: TankConfig,
             *, gain: float = 0.02, sync_phase: float = math.radians(-30.0),
             region: int = 0) -> Particle:
    """Advance one particle through one cell. ``sync_phase`` is in radians."""
    if not particle.alive:
        return particle
    delta = particle.delta + gain * (amp * math.cos(sync_phase + phi_offset + particle.psi) - math.cos(sync_phase))
    psi = particle.psi - tank.coupling_k * delta
    alive = abs(psi) <= tank.acceptance_psi and abs(delta) <= tank.acceptance_delta
    return Particle(psi, delta, alive, None if alive else region)


def track_lattice(beam: BeamEnsemble, controls: ControlSettings,
                  lattice: LatticeConfig) -> tuple[MonitorReadings, BeamEnsemble]:
    """Track every particle through the lattice cell by cell.

    Returns the monitor readings and a new ensemble holding final
    coordinates plus per-monitor snapshots; ``beam`` is left untouched.
    """
    if not isinstance(controls, ControlSettings):
        controls = ControlSettings.from_array(controls)
    controls.validate()
    amps, offsets = lattice.effective_settings(controls)
    out = beam.copy()
    n_total = beam.count
    phis = math.radians(lattice.sync_phase)
    ref_kick = lattice.gain * math.cos(phis)
    e_ref = lattice.reference_energy()
    d_max = max(t.acceptance_delta for t in lattice.tanks)

    idx = np.flatnonzero(out.alive)
    p = out.psi[idx]
    d = out.delta[idx]
    current = np.empty(MONITOR_COUNT)
    power = np.zeros(MONITOR_COUNT)
    for k, tank in enumerate(lattice.tanks):
        phase = phis + offsets[k]
        kick = lattice.gain * amps[k]
        for _ in range(tank.cells):
            d = d + (kick * np.cos(phase + p) - ref_kick)
            p = p - tank.coupling_k * d
            lost = (np.abs(p) > tank.acceptance_psi) | (np.abs(d) > tank.acceptance_delta)
            if lost.any():
                gone = idx[lost]
                out.psi[gone] = p[lost]
                out.delta[gone] = d[lost]
                out.alive[gone] = False
                out.loss_region[gone] = k
                weight = np.clip(1.0 + d[lost], 0.0, 1.0 + d_max) / (1.0 + d_max)
                power[k] += e_ref[k] * weight.sum()
                keep = ~lost
                idx, p, d = idx[keep], p[keep], d[keep]
        current[k] = lattice.input_current * len(idx) / n_total
        out.snapshots[k + 1] = (idx.copy(), p.copy(), d.copy())
    out.psi[idx] = p
    out.delta[idx] = d
    readings = MonitorReadings(current, np.clip(power / n_total, 0.0, 1.0), lattice.input_current)
    return readings, out


def dump_phase_space(beam: BeamEnsemble, at_monitor: int) -> np.ndarray:
    """(psi, delta) rows of the particles alive at a monitor, in input order."""
    if int(at_monitor) != at_monitor or not 1 <= at_monitor <= MONITOR_COUNT:
        raise InvalidArgument(f"monitor index must be in 1..{MONITOR_COUNT}, got {at_monitor}")
    if at_monitor not in beam.snapshots:
        raise ProtocolError("beam has no recorded snapshots; run track_lattice first")
    _, p, d = beam.snapshots[at_monitor]
    return np.column_stack([p, d])


def write_phase_space_csv(path, beam: BeamEnsemble, monitors=range(1, MONITOR_COUNT + 1)) -> None:
    with open(path, "w") as fh:
        fh.write("monitor,psi,delta\n")
        for m in monitors:
            for p, d in dump_phase_space(beam, m):
                fh.write(f"{m},{p!r},{d!r}\n")


# --- calibration --------------------------------------------------------

class CalibrationError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class CalibrationTargets:
    design_min: float = 0.95
    random_max: float = 0.5
    n_random: int = 64
    seed: int = 2024


@dataclass
class CalibrationReport:
    accepted: bool
    candidates_tried: int
    design_transmission: float
    random_mean_transmission: float
    lattice: LatticeConfig
    history: list = field(default_factory=list)

    def summary(self) -> str:
        status = "accepted" if self.accepted else "FAILED"
        return (
            f"calibration {status} after {self.candidates_tried} candidate(s): "
            f"design transmission {self.design_transmission:.4f}, "
            f"mean random-point transmission {self.random_mean_transmission:.4f}"
        )


def evaluate_lattice(lattice: LatticeConfig, beam: BeamEnsemble, random_points: np.ndarray) -> tuple[float, float]:
    design = track_lattice(beam, lattice.design_point(), lattice)[0].transmission
    rand = [track_lattice(beam, ControlSettings.from_array(x), lattice)[0].transmission for x in random_points]
    return design, float(np.mean(rand)) if len(rand) else 0.0


def _candidates(lattice: LatticeConfig):
    yield lattice
    gains = (1.0, 0.75, 1.25, 0.5, 1.5)
    k_scales = (1.0, 0.75, 1.25)
    acc_scales = (1.0, 0.8)
    phase_shifts = (0.0, 20.0, -20.0)
    for gs, ks, acc, dp in itertools.product(gains, k_scales, acc_scales, phase_shifts):
        if (gs, ks, acc, dp) == (1.0, 1.0, 1.0, 0.0):
            continue
        tanks = []
        for i, t in enumerate(lattice.tanks):
            phase = t.design_phase
            if i in (1, 2):
                phase = float(np.clip(phase + dp, 0.0, 360.0))
            tanks.append(replace(
                t, coupling_k=t.coupling_k * ks,
                acceptance_psi=min(math.pi, t.acceptance_psi * acc),
                acceptance_delta=t.acceptance_delta * acc, design_phase=phase,
            ))
        yield replace(lattice, tanks=tuple(tanks), gain=lattice.gain * gs)


def calibrate(lattice: LatticeConfig, beam_spec: BeamSpec,
              targets: CalibrationTargets = CalibrationTargets(), budget: int = 200) -> tuple[LatticeConfig, CalibrationReport]:
    """Sweep lattice constants until both transmission targets hold.

    The supplied lattice is tried first, then a grid over gain, phase-slip
    coefficient, acceptances and tank design phases.  Raises
    :class:`CalibrationError` carrying the best report if the budget runs out.
    """
    beam = beam_from_spec(beam_spec)
    rng = np.random.default_rng(targets.seed)
    random_points = ActionBounds().sample(rng) if targets.n_random == 1 else np.array(
        [ActionBounds().sample(rng) for _ in range(targets.n_random)])
    random_points = np.atleast_2d(random_points)
    history = []
    best = None
    for i, cand in enumerate(_candidates(lattice)):
        if i >= budget:
            break
        if not cand.design_point().in_range():
            continue
        design, rand = evaluate_lattice(cand, beam, random_points)
        history.append((design, rand))
        ok = design >= targets.design_min and rand <= targets.random_max
        score = min(design - targets.design_min, targets.random_max - rand)
        if best is None or score > best[0]:
            best = (score, cand, design, rand)
        logger.debug("candidate %d: design %.4f random %.4f", i, design, rand)
        if ok:
            report = CalibrationReport(True, len(history), design, rand, cand, history)
            logger.info(report.summary())
            return cand, report
    _, cand, design, rand = best if best else (None, lattice, float("nan"), float("nan"))
    report = CalibrationReport(False, len(history), design, rand, cand, history)
    raise CalibrationError(report.summary(), report)
