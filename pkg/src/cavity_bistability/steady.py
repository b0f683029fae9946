"""Steady states by damped Newton iteration, with linear stability."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .model import (
    STATE_DIM,
    PhysicalParams,
    SemiclassicalState,
    empty_cavity_alpha,
    free_indices,
    ground_state,
    stability_indices,
    jacobian_fd,
    rhs_into,
    rhs_vec,
)

NEWTON_TOL = 1e-10
MAX_ITER = 200
MAX_HALVINGS = 30
FD_STEP = 1e-7
STABILITY_MARGIN = 1e-6
DEDUP_TOL = 1e-6

_OK, _MAXITER, _STALLED = range(3)


class SteadyStateError(RuntimeError):
    """Newton failed; ``best`` is the iterate with the smallest residual."""

    def __init__(self, message: str, best: SemiclassicalState, residual: float):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class SteadyPoint:
    state: SemiclassicalState
    residual: float
    stability: str  # "stable" | "unstable" | "marginal"
    leading_rate: float
    iterations: int = 0

    @property
    def n_photons(self) -> float:
        return self.state.n_photons


@njit(cache=True)
def _norm2(v):
    s = 0.0
    for x in v:
        s += x * x
    return np.sqrt(s)


@njit(cache=True)
def _newton(y0, p, free, tol, max_iter, rel_step, max_halvings):
    n = y0.shape[0]
    m = free.shape[0]
    y = y0.copy()
    f = np.empty(n)
    ftry = np.empty(n)
    ytry = np.empty(n)
    rhs_into(y, p, f)
    best = y.copy()
    best_res = np.max(np.abs(f))
    it = 0
    while it < max_iter:
        res = np.max(np.abs(f))
        if not np.isfinite(res):
            return _STALLED, best, best_res, it
        if res < best_res:
            best_res = res
            best[:] = y
        if res <= tol:
            return _OK, y, res, it
        full = jacobian_fd(y, p, rel_step)
        jac = np.empty((m, m))
        rhs = np.empty(m)
        for i in range(m):
            rhs[i] = -f[free[i]]
            for j in range(m):
                jac[i, j] = full[free[i], free[j]]
        # least squares keeps the step finite across residual degenerate directions
        dx = np.linalg.lstsq(jac, rhs, 1e-13)[0]
        f2 = _norm2(f)
        lam = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            ytry[:] = y
            for i in range(m):
                ytry[free[i]] = y[free[i]] + lam * dx[i]
            rhs_into(ytry, p, ftry)
            if _norm2(ftry) < f2:
                accepted = True
                break
            lam *= 0.5
        it += 1
        if not accepted:
            return _STALLED, best, best_res, it
        y[:] = ytry
        f[:] = ftry
    res = np.max(np.abs(f))
    if res <= tol:
        return _OK, y, res, it
    if res < best_res:
        best_res = res
        best[:] = y
    return _MAXITER, best, best_res, it


@njit(cache=True)
def _spectrum(y, p, free, rel_step):
    full = jacobian_fd(y, p, rel_step)
    m = free.shape[0]
    jac = np.empty((m, m), dtype=np.complex128)
    for i in range(m):
        for j in range(m):
            jac[i, j] = full[free[i], free[j]]
    return np.linalg.eigvals(jac)


@njit(cache=True)
def _leading_rate(y, p, free, rel_step):
    return np.max(_spectrum(y, p, free, rel_step).real)


def classify(leading_rate: float, margin: float = STABILITY_MARGIN) -> str:
    if leading_rate < -margin:
        return "stable"
    if leading_rate > margin:
        return "unstable"
    return "marginal"


def newton_vector(y0: np.ndarray, p: np.ndarray, free: np.ndarray, tol: float = NEWTON_TOL,
                  max_iter: int = MAX_ITER):
    """Array-level Newton solve. Returns (ok, y, residual, iterations)."""
    status, y, res, it = _newton(np.asarray(y0, dtype=float), p, free, tol, max_iter, FD_STEP, MAX_HALVINGS)
    return status == _OK, y, res, it


def leading_rate_vector(y: np.ndarray, p: np.ndarray, free: np.ndarray) -> float:
    return float(_leading_rate(y, p, free, FD_STEP))


def linearization_spectrum(point: SemiclassicalState, params: PhysicalParams) -> np.ndarray:
    """Eigenvalues of the reduced real Jacobian, sorted by decreasing real part.

    Normally 10 values; when the |2> population is conserved (no control
    field, no decay into |2>) its trivial zero mode is left out and the
    spectrum describes the dynamics at fixed s22.
    """
    ev = _spectrum(point.to_vector(), params.as_array(), free_indices(params), FD_STEP)
    return ev[np.lexsort((ev.imag, -ev.real))]


def solve_steady(params: PhysicalParams, guess: SemiclassicalState | None = None,
                 tol: float = NEWTON_TOL, max_iter: int = MAX_ITER,
                 margin: float = STABILITY_MARGIN) -> SteadyPoint:
    """Damped Newton on the 10 real unknowns, then classify the root.

    Raises SteadyStateError (carrying the best iterate) when the iteration
    does not reach ``tol`` in max-norm of the right-hand side.
    """
    guess = ground_state() if guess is None else guess
    p = params.as_array()
    free = free_indices(params)
    status, y, res, it = _newton(guess.to_vector(), p, free, tol, max_iter, FD_STEP, MAX_HALVINGS)
    if status != _OK:
        reason = "line search stalled (singular or ill-conditioned Jacobian)" if status == _STALLED \
            else f"no convergence in {max_iter} iterations"
        raise SteadyStateError(f"{reason}; best residual {res:.3e}", SemiclassicalState.from_vector(y), res)
    lead = float(_leading_rate(y, p, stability_indices(params), FD_STEP))
    return SteadyPoint(SemiclassicalState.from_vector(y), float(res), classify(lead, margin), lead, it)


def atoms_at_field(alpha: complex, params: PhysicalParams) -> SemiclassicalState:
    """Atomic steady state for a cavity amplitude held fixed at ``alpha``.

    The atomic equations are affine in the atomic variables at fixed field,
    so this is one linear solve. A conserved s22 is held at zero.
    """
    p = params.as_array()
    idx = free_indices(params)[2:]
    base = ground_state(alpha).to_vector()
    base[2:] = 0.0
    f0 = rhs_vec(base, p)[idx]
    a = np.empty((len(idx), len(idx)))
    for col, j in enumerate(idx):
        y = base.copy()
        y[j] = 1.0
        a[:, col] = rhs_vec(y, p)[idx] - f0
    y = base.copy()
    y[idx] = np.linalg.lstsq(a, -f0, rcond=None)[0]
    return SemiclassicalState.from_vector(y)


def default_seeds(params: PhysicalParams) -> list[SemiclassicalState]:
    """Cold start, empty-cavity field with ground-state atoms, and that field with atoms relaxed to it."""
    a0 = empty_cavity_alpha(params)
    return [ground_state(), ground_state(a0), atoms_at_field(a0, params)]


def _distinct(points: Iterable[SteadyPoint], tol: float, idx: np.ndarray) -> list[SteadyPoint]:
    kept: list[SteadyPoint] = []
    vecs: list[np.ndarray] = []
    for pt in points:
        v = pt.state.to_vector()[idx]
        if all(np.max(np.abs(v - w)) >= tol for w in vecs):
            kept.append(pt)
            vecs.append(v)
    return kept


def find_all_branches(params: PhysicalParams, seeds: Sequence[SemiclassicalState] | None = None,
                      dedup_tol: float = DEDUP_TOL, margin: float = STABILITY_MARGIN,
                      fractions: Sequence[float] = (0.25, 0.5, 0.75), rounds: int = 3) -> list[SteadyPoint]:
    """Multi-start Newton; returns distinct roots sorted by photon number.

    Besides the seeds, each pair of adjacent roots spawns guesses between
    them: the interpolated state, and the atoms relaxed to the interpolated
    field. This is how middle (unstable) branches are reached. Repeated
    until a round adds nothing. Failed starts are dropped.

    Roots are told apart on the components that decide stability, so with
    no atoms only the field counts.
    """
    seeds = list(seeds) if seeds is not None else default_seeds(params)
    if not seeds:
        raise ValueError("find_all_branches needs at least one seed")

    def attempt(guess):
        try:
            return solve_steady(params, guess, margin=margin)
        except SteadyStateError:
            return None

    idx = stability_indices(params)

    def ordered(points):
        points = _distinct(points, dedup_tol, idx)
        points.sort(key=lambda r: (r.n_photons, r.state.to_vector().tolist()))
        return points

    roots = ordered([r for r in map(attempt, seeds) if r is not None])
    tried: set[tuple[int, int]] = set()
    for _ in range(rounds):
        extra = []
        for lo, hi in zip(roots, roots[1:]):
            key = (id(lo), id(hi))
            if key in tried:
                continue
            tried.add(key)
            vlo, vhi = lo.state.to_vector(), hi.state.to_vector()
            for f in fractions:
                a = lo.state.alpha + f * (hi.state.alpha - lo.state.alpha)
                for guess in (SemiclassicalState.from_vector(vlo + f * (vhi - vlo)), atoms_at_field(a, params)):
                    r = attempt(guess)
                    if r is not None:
                        extra.append(r)
        grown = ordered(roots + extra)
        if len(grown) == len(roots):
            break
        roots = grown
    return roots
