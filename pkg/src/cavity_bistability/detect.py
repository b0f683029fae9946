"""Fluctuation detectors built on a hysteresis loop.

The system is parked on one branch inside a bistable region. A Gaussian
pulse on the swept parameter pushes it across the branch boundary; if the
pulse lasts long enough for the transmission to follow, the system ends up
on the other branch once the parameter has returned to its base value.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .integrate import Schedule, Trajectory, evolve
from .model import PhysicalParams, SemiclassicalState, free_indices, stability_indices
from .steady import classify, leading_rate_vector, newton_vector
from .sweep import SweepNumerics, SweepSpec, _pass, apply_axis, relative_gap, run_sweep

LATCH_THRESHOLD = 0.5
N_FLOOR = 1e-6
WINDOW = 20.0
GUARD_SIGMAS = 5.0
BRANCHES = ("upper", "lower")

# swept axis -> parameter carried by the pulse
_PULSED = {"delta_p": "delta_p", "omega_c": "omega_c", "epsilon_sq": "epsilon"}


class PreparationError(ValueError):
    """Target is not inside a bistable region; ``nearest`` is the closest one, if any."""

    def __init__(self, message: str, nearest: tuple[float, float] | None):
        super().__init__(message)
        self.nearest = nearest


@dataclass(frozen=True)
class Preparation:
    """Steady state on the requested branch at the target point, plus its partner."""

    parameter: str
    target: float
    branch: str
    direction: str  # sweep direction that populated the branch: "up" | "down"
    region: tuple[float, float]
    state: SemiclassicalState
    other: SemiclassicalState
    leading_rate: float

    @property
    def n_prepared(self) -> float:
        return self.state.n_photons

    @property
    def n_other(self) -> float:
        return self.other.n_photons


def _nearest(regions, target):
    if not regions:
        return None
    lo, hi, _ = min(regions, key=lambda r: 0.0 if r[0] <= target <= r[1] else min(abs(target - r[0]),
                                                                                    abs(target - r[1])))
    return (lo, hi)


def _approach(params, spec: SweepSpec, target: float, direction: str, num: SweepNumerics) -> np.ndarray:
    axis = spec.axis()
    path = axis[axis < target] if direction == "up" else axis[axis > target][::-1]
    values = np.append(path, target)
    states, ok = _pass(params, spec.parameter, values, spec.mode, num)
    if not ok[-1]:
        raise PreparationError(f"{direction} sweep did not converge at target {target}", None)
    return states[-1]


def prepare_on_branch(params: PhysicalParams, spec: SweepSpec, target: float, branch: str,
                      numerics: SweepNumerics | None = None) -> Preparation:
    """Park the system on ``branch`` at ``target`` by warm-start sweeping toward it.

    The full up/down sweep of ``spec`` locates the bistable regions first;
    the target must lie strictly inside one of them. Both approach
    directions are then run up to the target and the one ending on the
    requested branch is kept. The result is Newton-polished and must be
    linearly stable.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    num = numerics or SweepNumerics()
    lo_ax, hi_ax = sorted((spec.start, spec.stop))
    if not lo_ax < target < hi_ax:
        raise PreparationError(f"target {target} outside the sweep range [{lo_ax}, {hi_ax}]", None)
    curve = run_sweep(params, spec, num)
    region = next(((lo, hi) for lo, hi, _ in curve.regions if lo < target < hi), None)
    if region is None:
        near = _nearest(curve.regions, target)
        where = f"nearest bistable interval is [{near[0]:.6g}, {near[1]:.6g}]" if near \
            else "the sweep found no bistable interval"
        raise PreparationError(f"{spec.parameter}={target} is not bistable; {where}", near)

    pt = apply_axis(params, spec.parameter, target)
    p, free = pt.as_array(), free_indices(pt)
    ends = {d: _approach(params, spec, target, d, num) for d in ("up", "down")}
    n = {d: y[0] ** 2 + y[1] ** 2 for d, y in ends.items()}
    if relative_gap(np.array([n["up"]]), np.array([n["down"]]), num.n_floor)[0] <= num.gap_threshold:
        raise PreparationError(f"both approaches reach the same branch at {spec.parameter}={target}", region)
    hi_dir = "up" if n["up"] > n["down"] else "down"
    direction = hi_dir if branch == "upper" else ("down" if hi_dir == "up" else "up")
    other_dir = "down" if direction == "up" else "up"

    ok, y, _, _ = newton_vector(ends[direction], p, free, num.newton_tol)
    if not ok:
        raise PreparationError(f"could not polish the {branch} branch at {spec.parameter}={target}", region)
    lead = leading_rate_vector(y, p, stability_indices(pt))
    if classify(lead) != "stable":
        raise PreparationError(f"{branch} branch at {spec.parameter}={target} is not stable "
                               f"(leading rate {lead:.3e})", region)
    ok_o, y_o, _, _ = newton_vector(ends[other_dir], p, free, num.newton_tol)
    return Preparation(
        parameter=spec.parameter, target=float(target), branch=branch, direction=direction,
        region=(float(region[0]), float(region[1])), state=SemiclassicalState.from_vector(y),
        other=SemiclassicalState.from_vector(y_o if ok_o else ends[other_dir]), leading_rate=lead,
    )


@dataclass(frozen=True)
class DetectorSpec:
    """Everything needed to set up and run one detector simulation."""

    params: PhysicalParams
    sweep: SweepSpec
    target: float
    branch: str
    amplitude: float
    fwhm: float
    center: float
    t_end: float | None = None
    sigma_convention: str = "paper"
    dt: float = 0.1
    pulse_samples: int = 401
    latch_threshold: float = LATCH_THRESHOLD
    n_floor: float = N_FLOOR
    window: float = WINDOW
    numerics: SweepNumerics = field(default_factory=SweepNumerics)

    def schedule(self) -> Schedule:
        base = self.target if self.sweep.parameter != "epsilon_sq" else math.sqrt(self.target)
        return Schedule(_PULSED[self.sweep.parameter], base, self.amplitude, self.center, self.fwhm,
                        self.sigma_convention)

    def resolved_t_end(self) -> float:
        if self.t_end is not None:
            return float(self.t_end)
        return self.center + max(10.0 * self.schedule().sigma, 100.0)

    def with_fwhm(self, fwhm: float) -> "DetectorSpec":
        return replace(self, fwhm=float(fwhm))


@dataclass
class DetectorRun:
    params: PhysicalParams
    schedule: Schedule
    preparation: Preparation
    trajectory: Trajectory
    latched: bool
    n_before: float
    n_after: float
    windows: tuple[tuple[float, float], tuple[float, float]]
    latch_threshold: float
    n_floor: float

    @property
    def relative_change(self) -> float:
        return abs(self.n_after - self.n_before) / max(self.n_before, self.n_after, self.n_floor)

    def tail_deviation(self, reference: float, span: float | None = None) -> float:
        """Largest relative distance of <n> from ``reference`` over the last ``span`` of the run."""
        t = self.trajectory.times
        span = self.windows[1][1] - self.windows[1][0] if span is None else span
        n = self.trajectory.n_photons[t >= t[-1] - span]
        return float(np.max(np.abs(n - reference)) / max(abs(reference), self.n_floor))

    def verdict(self) -> dict:
        prep = self.preparation
        return {
            "params": self.params.to_dict(),
            "schedule": {
                "target": self.schedule.target, "base": self.schedule.base,
                "amplitude": self.schedule.amplitude, "center": self.schedule.center,
                "fwhm": self.schedule.fwhm, "sigma": self.schedule.sigma,
                "sigma_convention": self.schedule.sigma_convention,
            },
            "preparation": {
                "parameter": prep.parameter, "target": prep.target, "branch": prep.branch,
                "direction": prep.direction, "region": list(prep.region),
                "n_prepared": prep.n_prepared, "n_other": prep.n_other,
                "leading_rate": prep.leading_rate,
            },
            "t_end": float(self.trajectory.times[-1]),
            "window_before": list(self.windows[0]),
            "window_after": list(self.windows[1]),
            "n_before": self.n_before,
            "n_after": self.n_after,
            "relative_change": self.relative_change,
            "latch_threshold": self.latch_threshold,
            "latched": self.latched,
        }


def _sample_grid(t_end: float, dt: float, center: float, sigma: float, pulse_samples: int) -> np.ndarray:
    base = np.linspace(0.0, t_end, max(int(round(t_end / dt)), 1) + 1)
    lo, hi = max(center - GUARD_SIGMAS * sigma, 0.0), min(center + GUARD_SIGMAS * sigma, t_end)
    dense = np.linspace(lo, hi, pulse_samples) if hi > lo else np.empty(0)
    return np.unique(np.concatenate([base, dense]))


def _window_mean(traj: Trajectory, lo: float, hi: float) -> float:
    t = traj.times
    sel = (t >= lo) & (t <= hi)
    if not sel.any():
        raise ValueError(f"no samples in averaging window [{lo}, {hi}]")
    return float(np.mean(traj.n_photons[sel]))


def run_detector(spec: DetectorSpec, prepared: Preparation | None = None) -> DetectorRun:
    """Evolve the prepared branch through the pulse and decide whether it latched.

    ``n_before`` and ``n_after`` are mean photon numbers over windows of
    length ``spec.window`` ending 5 sigma before and starting 5 sigma after
    the pulse centre.
    """
    prep = prepared or prepare_on_branch(spec.params, spec.sweep, spec.target, spec.branch, spec.numerics)
    sched = spec.schedule()
    sigma = sched.sigma
    t_end = spec.resolved_t_end()
    pre_hi = spec.center - GUARD_SIGMAS * sigma
    post_lo = spec.center + GUARD_SIGMAS * sigma
    if pre_hi <= 0:
        raise ValueError(f"pulse centre {spec.center} leaves no quiet time before the pulse "
                         f"(needs > {GUARD_SIGMAS} sigma = {GUARD_SIGMAS * sigma:.6g})")
    if post_lo >= t_end:
        raise ValueError(f"t_end {t_end} leaves no time after the pulse (needs > {post_lo:.6g})")
    windows = ((max(pre_hi - spec.window, 0.0), pre_hi), (post_lo, min(post_lo + spec.window, t_end)))

    base = apply_axis(spec.params, spec.sweep.parameter, spec.target)
    times = _sample_grid(t_end, spec.dt, spec.center, sigma, spec.pulse_samples)
    traj = evolve(prep.state, base, (sched,), t_end=t_end, times=times)
    n_before = _window_mean(traj, *windows[0])
    n_after = _window_mean(traj, *windows[1])
    rel = abs(n_after - n_before) / max(n_before, n_after, spec.n_floor)
    return DetectorRun(
        params=base, schedule=sched, preparation=prep, trajectory=traj,
        latched=bool(rel > spec.latch_threshold), n_before=n_before, n_after=n_after,
        windows=windows, latch_threshold=spec.latch_threshold, n_floor=spec.n_floor,
    )


@dataclass
class SpeedLimitScan:
    fwhm: np.ndarray
    latched: np.ndarray
    runs: list[DetectorRun] = field(repr=False)
    smallest_latching: float | None
    findings: list[str]

    def rows(self):
        return zip(self.fwhm, self.latched)


def _scan_cell(args):
    spec, prep = args
    return run_detector(spec, prep)


def speed_limit_scan(spec: DetectorSpec, fwhm_values, jobs: int = 1,
                     prepared: Preparation | None = None) -> SpeedLimitScan:
    """Repeat the detector run across pulse widths at fixed amplitude.

    Latching is expected to be monotone in the width; any wider pulse that
    fails to latch after a narrower one did is reported in ``findings``.
    """
    w = np.asarray(fwhm_values, dtype=float)
    if w.size == 0 or np.any(w <= 0) or np.any(np.diff(w) <= 0):
        raise ValueError("fwhm_values must be nonempty, positive and strictly ascending")
    prep = prepared or prepare_on_branch(spec.params, spec.sweep, spec.target, spec.branch, spec.numerics)
    items = [(spec.with_fwhm(x), prep) for x in w]
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_scan_cell, items))
    else:
        runs = [_scan_cell(it) for it in items]
    latched = np.array([r.latched for r in runs], dtype=bool)
    findings = []
    for i in np.flatnonzero(latched):
        for j in range(i + 1, w.size):
            if not latched[j]:
                findings.append(f"fwhm={w[i]:.6g} latches but wider fwhm={w[j]:.6g} does not")
    hit = np.flatnonzero(latched)
    return SpeedLimitScan(w, latched, runs, float(w[hit[0]]) if hit.size else None, findings)
