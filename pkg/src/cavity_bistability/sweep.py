"""Hysteresis protocols: warm-start sweeps up and down a parameter axis.

Each pass seeds every point with the steady state of the previous point,
so the system follows whichever branch it is on until that branch ends.
Where the ascending and descending passes disagree the system is bistable;
the width of the widest such interval is the hysteresis width.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .integrate import STEADY_T_MAX, STEADY_TOL, IntegrationError, relax_vector
from .model import PhysicalParams, free_indices, ground_state, stability_indices, with_cooperativity
from .steady import NEWTON_TOL, classify, leading_rate_vector, newton_vector

AXES = ("epsilon_sq", "delta_p", "omega_c")
MODES = ("newton", "integrate")
GRID_PARAMS = ("epsilon", "delta_p", "omega_c")


class SweepError(RuntimeError):
    pass


class GridScanError(RuntimeError):
    """Too many grid cells failed; ``partial`` holds the scan with missing cells."""

    def __init__(self, message: str, partial: "GridScan"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    start: float
    stop: float
    points: int
    mode: str = "newton"

    def __post_init__(self):
        if self.parameter not in AXES:
            raise ValueError(f"parameter must be one of {AXES}, got {self.parameter!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.points) != self.points or self.points < 2:
            raise ValueError("points must be an integer >= 2")
        if not (math.isfinite(self.start) and math.isfinite(self.stop)):
            raise ValueError("sweep bounds must be finite")
        if self.start == self.stop:
            raise ValueError("start and stop must differ")
        if self.parameter in ("epsilon_sq", "omega_c") and min(self.start, self.stop) < 0:
            raise ValueError(f"{self.parameter} sweep must stay nonnegative")

    def axis(self) -> np.ndarray:
        """Sample values in increasing order (uniform in the swept quantity)."""
        lo, hi = sorted((self.start, self.stop))
        return np.linspace(lo, hi, int(self.points))

    @property
    def step(self) -> float:
        return abs(self.stop - self.start) / (self.points - 1)


@dataclass(frozen=True)
class SweepNumerics:
    gap_threshold: float = 1e-2
    jump_factor: float = 5.0
    jump_rel: float = 0.25
    n_floor: float = 1e-6
    steady_tol: float = STEADY_TOL
    t_max: float = STEADY_T_MAX
    # second relaxation budget for points stuck in the slow passage just beyond a fold
    t_max_extended: float = 1e6
    newton_tol: float = NEWTON_TOL
    # a warm-started Newton root whose <n> moved by more than this fraction, or whose atomic
    # variables moved by more than this amount, is re-checked by integration
    verify_change: float = 0.05
    max_gap_fraction: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)


def apply_axis(params: PhysicalParams, parameter: str, value: float) -> PhysicalParams:
    if parameter == "epsilon_sq":
        return params.replace(epsilon=math.sqrt(value))
    return params.replace(**{parameter: float(value)})


@dataclass
class HysteresisCurve:
    parameter: str
    axis: np.ndarray
    n_up: np.ndarray
    n_down: np.ndarray
    jumps_up: list[float]
    jumps_down: list[float]
    regions: list[tuple[float, float, float]]
    states_up: np.ndarray = field(repr=False)
    states_down: np.ndarray = field(repr=False)
    failures: int = 0

    @property
    def width(self) -> float:
        return max((r[2] for r in self.regions), default=0.0)

    def relative_gap(self, floor: float = 1e-6) -> np.ndarray:
        return relative_gap(self.n_up, self.n_down, floor)

    def curve_rows(self):
        return zip(self.axis, self.n_up, self.n_down)

    def region_rows(self):
        return iter(self.regions)


def relative_gap(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.abs(a - b) / np.maximum(np.maximum(a, b), floor)


def detect_jumps(axis: np.ndarray, n: np.ndarray, factor: float = 5.0, rel: float = 0.25,
                 floor: float = 1e-6) -> list[float]:
    """Locations (interval midpoints) where <n> changes abruptly between neighbours.

    A jump needs both |dn| > factor * median |dn| of the pass and
    |dn| > rel * min(n_i, n_i+1), so up and down jumps are judged alike.
    """
    dn = np.abs(np.diff(n))
    ok = np.isfinite(dn)
    if not ok.any():
        return []
    med = float(np.median(dn[ok]))
    scale = np.maximum(np.minimum(n[:-1], n[1:]), floor)
    with np.errstate(invalid="ignore"):
        hit = ok & (dn > factor * med) & (dn > rel * scale)
    return [float(0.5 * (axis[i] + axis[i + 1])) for i in np.flatnonzero(hit)]


def bistable_regions(axis: np.ndarray, n_up: np.ndarray, n_down: np.ndarray,
                     threshold: float = 1e-2, floor: float = 1e-6) -> list[tuple[float, float, float]]:
    """Maximal runs of branch disagreement as (lo, hi, width).

    Edges sit halfway between the last agreeing and first disagreeing sample,
    which is where the bounding jumps of the two passes are located.
    """
    gap = relative_gap(n_up, n_down, floor)
    mask = np.isfinite(gap) & (gap > threshold)
    regions = []
    i, m = 0, len(axis)
    while i < m:
        if not mask[i]:
            i += 1
            continue
        j = i
        while j + 1 < m and mask[j + 1]:
            j += 1
        lo = axis[0] if i == 0 else 0.5 * (axis[i - 1] + axis[i])
        hi = axis[-1] if j == m - 1 else 0.5 * (axis[j] + axis[j + 1])
        regions.append((float(lo), float(hi), float(hi - lo)))
        i = j + 1
    return regions


def _moved(y, y_ref, num: SweepNumerics) -> bool:
    n = y[0] ** 2 + y[1] ** 2
    n_ref = y_ref[0] ** 2 + y_ref[1] ** 2
    if abs(n - n_ref) > num.verify_change * max(n, n_ref, num.n_floor):
        return True
    return bool(np.max(np.abs(y[2:] - y_ref[2:])) > num.verify_change)


def _solve_point(y_prev, p, free, modes, mode, num: SweepNumerics):
    """Steady state at parameters ``p`` reached from ``y_prev``. Returns (y, ok).

    Newton mode accepts the warm-started root when it is not unstable and
    stays close to the seed; anything else (including every integrate-mode
    point) is settled by time evolution, then refined by Newton.
    """
    if mode == "newton":
        ok, y, _, _ = newton_vector(y_prev, p, free, num.newton_tol)
        if ok and not _moved(y, y_prev, num) and classify(leading_rate_vector(y, p, modes)) != "unstable":
            return y, True
    y_rel = y_prev
    for t_max in (num.t_max, num.t_max_extended):
        try:
            y_rel, converged, _, _ = relax_vector(y_rel, p, num.steady_tol, t_max)
        except IntegrationError:
            return y_prev, False
        ok, y, _, _ = newton_vector(y_rel, p, free, num.newton_tol)
        if ok and classify(leading_rate_vector(y, p, modes)) != "unstable":
            # an unconverged run is still crossing the bottleneck left by a vanished branch,
            # so the nearby root it heads for is accepted without the proximity check
            if not converged or not _moved(y, y_rel, num):
                return y, True
        if converged:
            break
    return y_rel, converged


def _pass(params: PhysicalParams, parameter: str, values: np.ndarray, mode: str, num: SweepNumerics):
    y = ground_state().to_vector()
    states = np.empty((len(values), y.size))
    ok = np.empty(len(values), dtype=bool)
    for k, v in enumerate(values):
        pk = apply_axis(params, parameter, v)
        y, ok[k] = _solve_point(y, pk.as_array(), free_indices(pk), stability_indices(pk), mode, num)
        states[k] = y
    return states, ok


def run_sweep(params: PhysicalParams, spec: SweepSpec, numerics: SweepNumerics | None = None) -> HysteresisCurve:
    """Ascending and descending warm-start passes over ``spec``'s axis.

    Both passes begin from the cold-start state (all atoms in |1>, empty
    field). A point that fails to converge is recorded as NaN; more than
    ``max_gap_fraction`` failures in a pass raises SweepError.
    """
    num = numerics or SweepNumerics()
    axis = spec.axis()
    st_up, ok_up = _pass(params, spec.parameter, axis, spec.mode, num)
    st_dn, ok_dn = _pass(params, spec.parameter, axis[::-1], spec.mode, num)
    st_dn, ok_dn = st_dn[::-1].copy(), ok_dn[::-1].copy()
    for ok, label in ((ok_up, "ascending"), (ok_dn, "descending")):
        bad = int((~ok).sum())
        if bad > num.max_gap_fraction * len(axis):
            raise SweepError(f"{label} pass: {bad}/{len(axis)} points failed to converge")
    n_up = st_up[:, 0] ** 2 + st_up[:, 1] ** 2
    n_dn = st_dn[:, 0] ** 2 + st_dn[:, 1] ** 2
    n_up[~ok_up] = np.nan
    n_dn[~ok_dn] = np.nan
    return HysteresisCurve(
        parameter=spec.parameter,
        axis=axis,
        n_up=n_up,
        n_down=n_dn,
        jumps_up=detect_jumps(axis, n_up, num.jump_factor, num.jump_rel, num.n_floor),
        jumps_down=detect_jumps(axis, n_dn, num.jump_factor, num.jump_rel, num.n_floor),
        regions=bistable_regions(axis, n_up, n_dn, num.gap_threshold, num.n_floor),
        states_up=st_up,
        states_down=st_dn,
        failures=int((~ok_up).sum() + (~ok_dn).sum()),
    )


def hysteresis_width(curve: HysteresisCurve) -> float:
    """Width of the widest bistable region, 0 when there is none."""
    return curve.width


@dataclass
class GridScan:
    row_param: str
    rows: np.ndarray
    col_param: str
    cols: np.ndarray
    width: np.ndarray  # (len(rows), len(cols)); NaN marks a failed cell

    @property
    def missing(self) -> int:
        return int(np.isnan(self.width).sum())

    def long_rows(self):
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                yield r, c, self.width[i, j]


def _cell(args):
    params, spec, num = args
    try:
        return run_sweep(params, spec, num).width
    except SweepError:
        return math.nan


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def grid_scan(params: PhysicalParams, spec: SweepSpec, row_param: str, rows, col_param: str, cols,
              numerics: SweepNumerics | None = None, jobs: int = 1,
              max_missing_fraction: float = 0.05) -> GridScan:
    """Hysteresis width of ``spec``'s sweep on every (row, col) parameter pair."""
    for name in (row_param, col_param):
        if name not in GRID_PARAMS:
            raise ValueError(f"grid parameters must be among {GRID_PARAMS}, got {name!r}")
        if name == spec.parameter or (name == "epsilon" and spec.parameter == "epsilon_sq"):
            raise ValueError(f"grid parameter {name!r} is the swept axis")
    if row_param == col_param:
        raise ValueError("row and column parameters must differ")
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if rows.size == 0 or cols.size == 0:
        raise ValueError("grid axes must be nonempty")
    num = numerics or SweepNumerics()
    items = [(params.replace(**{row_param: float(r), col_param: float(c)}), spec, num)
             for r in rows for c in cols]
    width = np.array(_map(_cell, items, jobs), dtype=float).reshape(rows.size, cols.size)
    scan = GridScan(row_param, rows, col_param, cols, width)
    if scan.missing > max_missing_fraction * width.size:
        raise GridScanError(f"{scan.missing}/{width.size} grid cells failed", scan)
    return scan


@dataclass
class ThresholdScan:
    c_values: np.ndarray
    widths: np.ndarray
    width_floor: float
    threshold: float | None  # smallest C whose width exceeds the floor

    @property
    def missing(self) -> int:
        return int(np.isnan(self.widths).sum())

    def rows(self):
        return zip(self.c_values, self.widths)


def threshold_scan(base: PhysicalParams, spec: SweepSpec, c_values, numerics: SweepNumerics | None = None,
                   width_floor: float | None = None, jobs: int = 1) -> ThresholdScan:
    """Hysteresis width versus cooperativity (g adjusted, everything else fixed).

    ``width_floor`` defaults to two grid steps of the swept axis. A
    cooperativity whose sweep fails is recorded as NaN.
    """
    c_values = np.asarray(c_values, dtype=float)
    if c_values.size == 0 or np.any(c_values < 0) or np.any(np.diff(c_values) < 0):
        raise ValueError("c_values must be nonempty, nonnegative and sorted")
    floor = 2 * spec.step if width_floor is None else width_floor
    num = numerics or SweepNumerics()
    items = [(with_cooperativity(base, float(c)), spec, num) for c in c_values]
    widths = np.array(_map(_cell, items, jobs), dtype=float)
    above = np.flatnonzero(widths > floor)
    thr = float(c_values[above[0]]) if above.size else None
    return ThresholdScan(c_values, widths, floor, thr)
