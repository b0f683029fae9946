"""Time evolution of the semiclassical equations.

The integrator is an adaptive Dormand-Prince 5(4) pair compiled with numba.
Parameters may carry Gaussian time dependence (a fluctuation of the probe
detuning, control Rabi frequency or pump strength); those are evaluated at
the integrator's internal stage times. Steps never straddle the start of a
pulse window and are capped at a fraction of the pulse width inside it, so
narrow pulses are resolved even when the system sits at a steady state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .model import (
    SCHEDULABLE,
    STATE_DIM,
    PhysicalParams,
    SemiclassicalState,
    rhs_into,
)

RTOL = 1e-9
ATOL = 1e-12
STEADY_TOL = 1e-8
STEADY_T_MAX = 1e4
STEADY_WINDOW = 10.0
POPULATION_TOL = 1e-9
H_MAX = 1.0
MAX_STEPS = 50_000_000

# kernel exit codes
_DONE, _STEADY, _UNDERFLOW, _BREACH, _MAXSTEPS = range(5)

_SQRT_2LN2 = math.sqrt(2.0 * math.log(2.0))


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot continue; ``time`` is the last good time."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class Schedule:
    """Gaussian fluctuation of one parameter around its equilibrium value.

    ``sigma_convention="paper"`` uses sigma = sqrt(2 ln 2) * fwhm;
    ``"standard"`` uses sigma = fwhm / (2 sqrt(2 ln 2)).
    """

    target: str
    base: float
    amplitude: float
    center: float
    fwhm: float
    sigma_convention: str = "paper"

    def __post_init__(self):
        if self.target not in SCHEDULABLE:
            raise ValueError(f"cannot schedule {self.target!r}; choose from {sorted(SCHEDULABLE)}")
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")
        if self.sigma_convention not in ("paper", "standard"):
            raise ValueError("sigma_convention must be 'paper' or 'standard'")

    @property
    def sigma(self) -> float:
        if self.sigma_convention == "paper":
            return _SQRT_2LN2 * self.fwhm
        return self.fwhm / (2.0 * _SQRT_2LN2)

    def value(self, t):
        return self.base + self.amplitude * np.exp(-((t - self.center) ** 2) / (2.0 * self.sigma ** 2))

    def row(self) -> np.ndarray:
        return np.array([SCHEDULABLE[self.target], self.base, self.amplitude, self.center, self.sigma])


def gaussian_value(schedule: Schedule, t):
    """Scheduled parameter value at time(s) ``t``."""
    return schedule.value(t)


@njit(cache=True)
def _params_at(p0, sched, t, out):
    for i in range(p0.shape[0]):
        out[i] = p0[i]
    for k in range(sched.shape[0]):
        idx = int(sched[k, 0])
        sig = sched[k, 4]
        out[idx] = sched[k, 1] + sched[k, 2] * math.exp(-((t - sched[k, 3]) ** 2) / (2.0 * sig * sig))


@njit(cache=True)
def _populations_ok(y, tol):
    s11 = y[8]
    s22 = y[9]
    s33 = 1.0 - s11 - s22
    return s11 >= -tol and s22 >= -tol and s33 >= -tol


@njit(cache=True)
def _dopri(y0, p0, sched, t0, t_end, sample_times, rtol, atol, h_max,
           steady_mode, steady_tol, steady_window, pop_tol, max_steps):
    n = y0.shape[0]
    samples = np.empty((sample_times.shape[0], n))
    n_samples = 0

    # Dormand-Prince 5(4) tableau
    c2, c3, c4, c5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
    a21 = 1.0 / 5.0
    a31, a32 = 3.0 / 40.0, 9.0 / 40.0
    a41, a42, a43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
    a51, a52, a53, a54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
    a61, a62, a63, a64, a65 = (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0,
                               49.0 / 176.0, -5103.0 / 18656.0)
    b1, b3, b4, b5, b6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
    e1, e3, e4, e5, e6, e7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                              -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)

    p = np.empty(p0.shape[0])
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    ytmp = np.empty(n)
    ynew = np.empty(n)

    y = y0.copy()
    t = t0
    if not _populations_ok(y, pop_tol):
        return _BREACH, t, y, samples, n_samples, 0, np.inf

    while n_samples < sample_times.shape[0] and sample_times[n_samples] <= t0:
        samples[n_samples, :] = y
        n_samples += 1

    _params_at(p0, sched, t, p)
    rhs_into(y, p, k1)
    h = min(h_max, 1e-2)
    below_since = -1.0
    residual = np.inf
    steps = 0
    status = _DONE

    while t < t_end:
        if steps >= max_steps:
            status = _MAXSTEPS
            break

        # next hard stop: sample time, pulse window start, or end of run
        stop = t_end
        if n_samples < sample_times.shape[0] and sample_times[n_samples] < stop:
            stop = sample_times[n_samples]
        # pulses are resolved over center +/- 8 sigma with steps <= sigma / 5
        h_cap = h_max
        for k in range(sched.shape[0]):
            sig = sched[k, 4]
            ws = sched[k, 3] - 8.0 * sig
            we = sched[k, 3] + 8.0 * sig
            if t < ws and ws < stop:
                stop = ws
            if ws <= t and t < we:
                h_cap = min(h_cap, 0.2 * sig)
        h = min(h, h_cap)
        h_free = h
        landing = False
        if t + h >= stop:
            h = stop - t
            landing = True
            if h <= 1e-14 * max(1.0, abs(t)):
                # stop coincides with t up to rounding: snap instead of taking a null step
                t = stop
                while n_samples < sample_times.shape[0] and sample_times[n_samples] <= t:
                    samples[n_samples, :] = y
                    n_samples += 1
                h = h_free
                continue

        if h < 1e-14 * max(1.0, abs(t)):
            status = _UNDERFLOW
            break

        for i in range(n):
            ytmp[i] = y[i] + h * a21 * k1[i]
        _params_at(p0, sched, t + c2 * h, p)
        rhs_into(ytmp, p, k2)
        for i in range(n):
            ytmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i])
        _params_at(p0, sched, t + c3 * h, p)
        rhs_into(ytmp, p, k3)
        for i in range(n):
            ytmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i])
        _params_at(p0, sched, t + c4 * h, p)
        rhs_into(ytmp, p, k4)
        for i in range(n):
            ytmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i])
        _params_at(p0, sched, t + c5 * h, p)
        rhs_into(ytmp, p, k5)
        for i in range(n):
            ytmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i])
        _params_at(p0, sched, t + h, p)
        rhs_into(ytmp, p, k6)
        for i in range(n):
            ynew[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i])
        rhs_into(ynew, p, k7)

        err = 0.0
        for i in range(n):
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            ei = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i])
            err += (ei / sc) ** 2
        err = math.sqrt(err / n)

        if err <= 1.0:
            t = stop if landing else t + h
            for i in range(n):
                y[i] = ynew[i]
                k1[i] = k7[i]
            steps += 1
            if not _populations_ok(y, pop_tol):
                status = _BREACH
                break
            while n_samples < sample_times.shape[0] and sample_times[n_samples] <= t:
                samples[n_samples, :] = y
                n_samples += 1
            if steady_mode:
                fmax = 0.0
                ymax = 0.0
                for i in range(n):
                    fmax = max(fmax, abs(k1[i]))
                    ymax = max(ymax, abs(y[i]))
                residual = fmax / (1.0 + ymax)
                if residual < steady_tol:
                    if below_since < 0.0:
                        below_since = t
                    elif t - below_since >= steady_window:
                        status = _STEADY
                        break
                else:
                    below_since = -1.0
            fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
            # a step shortened to land on a stop says nothing about the next one
            h = max(h * max(0.2, fac), h_free) if landing else h * max(0.2, fac)
        else:
            h = h * max(0.2, 0.9 * err ** -0.2)

    return status, t, y, samples, n_samples, steps, residual


def _schedule_table(schedules: Sequence[Schedule]) -> np.ndarray:
    targets = [s.target for s in schedules]
    if len(set(targets)) != len(targets):
        raise ValueError("at most one schedule per parameter")
    if not schedules:
        return np.zeros((0, 5))
    return np.array([s.row() for s in schedules])


def _raise_for(status: int, t: float):
    if status == _UNDERFLOW:
        raise IntegrationError(f"step size underflow (stiff failure) at t={t:.6g}", t)
    if status == _BREACH:
        raise IntegrationError(f"population left the simplex beyond {POPULATION_TOL:g} at t={t:.6g}", t)
    if status == _MAXSTEPS:
        raise IntegrationError(f"step budget exhausted at t={t:.6g}", t)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # shape (len(times), STATE_DIM)
    params: PhysicalParams
    schedules: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> SemiclassicalState:
        return SemiclassicalState.from_vector(self.states[i])

    @property
    def alpha(self) -> np.ndarray:
        return self.states[:, 0] + 1j * self.states[:, 1]

    @property
    def n_photons(self) -> np.ndarray:
        return self.states[:, 0] ** 2 + self.states[:, 1] ** 2

    @property
    def populations(self) -> np.ndarray:
        s11 = self.states[:, 8]
        s22 = self.states[:, 9]
        return np.column_stack([s11, s22, 1.0 - s11 - s22])

    def transmission_norm(self) -> np.ndarray:
        """Photon number over (epsilon/kappa)^2, using the scheduled pump if any."""
        eps = np.full(len(self.times), self.params.epsilon)
        for s in self.schedules:
            if s.target == "epsilon":
                eps = s.value(self.times)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(eps > 0, self.n_photons / (eps / self.params.kappa) ** 2, np.nan)

    def population_drift(self) -> float:
        return float(np.max(np.abs(self.populations.sum(axis=1) - 1.0))) if len(self) else 0.0

    def columns(self) -> dict[str, np.ndarray]:
        st = self.states
        pops = self.populations
        return {
            "t": self.times,
            "re_alpha": st[:, 0],
            "im_alpha": st[:, 1],
            "n": self.n_photons,
            "transmission_norm": self.transmission_norm(),
            "s11": pops[:, 0],
            "s22": pops[:, 1],
            "s33": pops[:, 2],
            "abs_s13": np.hypot(st[:, 2], st[:, 3]),
            "abs_s12": np.hypot(st[:, 4], st[:, 5]),
            "abs_s23": np.hypot(st[:, 6], st[:, 7]),
        }

    def to_csv(self, path) -> None:
        from .io import write_csv

        cols = self.columns()
        write_csv(path, list(cols), zip(*cols.values()))


def _sample_times(t_end: float, dt: float | None, times) -> np.ndarray:
    if times is not None:
        ts = np.asarray(times, dtype=float)
        if ts.ndim != 1 or ts.size == 0:
            raise ValueError("times must be a nonempty 1-d sequence")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("times must be strictly increasing")
        if ts[0] < 0 or ts[-1] > t_end:
            raise ValueError("sample times must lie in [0, t_end]")
        return ts
    if dt is None:
        dt = t_end / 1000.0
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = int(math.floor(t_end / dt + 1e-9))
    ts = np.arange(m + 1) * dt
    if t_end - ts[-1] > 1e-9 * t_end:
        ts = np.append(ts, t_end)
    return ts


def evolve(initial: SemiclassicalState, params: PhysicalParams, schedules: Sequence[Schedule] = (),
           t_end: float = 100.0, dt: float | None = None, times=None,
           rtol: float = RTOL, atol: float = ATOL, h_max: float = H_MAX) -> Trajectory:
    """Integrate from t=0 to ``t_end`` and sample the state.

    Sampling is either uniform with spacing ``dt`` (default t_end/1000) or
    at the explicit ``times``. The integrator lands exactly on each sample
    time, so samples carry the full integration accuracy.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    sched = _schedule_table(schedules)
    ts = _sample_times(t_end, dt, times)
    status, t, _, samples, n_filled, _, _ = _dopri(
        initial.to_vector(), params.as_array(), sched, 0.0, float(t_end), ts,
        rtol, atol, h_max, False, 0.0, 0.0, POPULATION_TOL, MAX_STEPS)
    _raise_for(status, t)
    return Trajectory(times=ts[:n_filled], states=samples[:n_filled].copy(), params=params,
                      schedules=tuple(schedules))


@dataclass(frozen=True)
class Relaxation:
    state: SemiclassicalState
    converged: bool
    time: float
    residual: float


def relax_vector(y0: np.ndarray, p: np.ndarray, tol: float = STEADY_TOL, t_max: float = STEADY_T_MAX,
                 window: float = STEADY_WINDOW, rtol: float = RTOL, atol: float = ATOL,
                 h_max: float = H_MAX):
    """Array-level relaxation used by the sweep loops. Returns (y, converged, t, residual)."""
    status, t, y, _, _, _, res = _dopri(
        np.asarray(y0, dtype=float), p, np.zeros((0, 5)), 0.0, float(t_max), np.zeros(0),
        rtol, atol, h_max, True, tol, window, POPULATION_TOL, MAX_STEPS)
    _raise_for(status, t)
    return y, status == _STEADY, t, res


def evolve_to_steady(initial: SemiclassicalState, params: PhysicalParams, tol: float = STEADY_TOL,
                     t_max: float = STEADY_T_MAX, window: float = STEADY_WINDOW,
                     rtol: float = RTOL, atol: float = ATOL) -> Relaxation:
    """Integrate until max|dy/dt| < tol * (1 + max|y|) holds for ``window`` time units.

    Non-convergence within ``t_max`` is reported through ``converged=False``.
    """
    y, ok, t, res = relax_vector(initial.to_vector(), params.as_array(), tol, t_max, window, rtol, atol)
    return Relaxation(SemiclassicalState.from_vector(y), ok, t, res)


__all__ = [
    "IntegrationError",
    "Relaxation",
    "Schedule",
    "Trajectory",
    "evolve",
    "evolve_to_steady",
    "gaussian_value",
    "relax_vector",
]
