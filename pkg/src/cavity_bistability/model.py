"""Semiclassical Maxwell-Bloch model of N Lambda atoms in a driven cavity.

All rates, detunings and couplings are in units of the cavity amplitude
decay rate kappa; times are in units of 1/kappa.

The state is stored in per-atom variables s_ij = <S_ij>/N so that every
component is O(1); the atom number only enters through the collective
term g*N*s13 of the cavity equation. Only the independent components are
evolved and s33 = 1 - s11 - s22 is eliminated, giving a real vector of
length 10::

    [Re a, Im a, Re s13, Im s13, Re s12, Im s12, Re s23, Im s23, s11, s22]
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from numba import njit

STATE_DIM = 10

# positions in the packed parameter array handed to compiled kernels
P_KAPPA, P_G31, P_G32, P_DEPH2, P_DEPH3, P_G, P_N, P_OMEGA, P_EPS, P_DP, P_D1, P_D2 = range(12)
N_PARAMS = 12

# parameters that a time-dependent schedule may modulate
SCHEDULABLE = {"delta_p": P_DP, "omega_c": P_OMEGA, "epsilon": P_EPS}


@dataclass(frozen=True)
class PhysicalParams:
    """One configuration of the atom-cavity system, in units of kappa."""

    gamma31: float = 0.5
    gamma32: float = 0.5
    deph2: float = 0.0
    deph3: float = 0.0
    g: float = 0.0
    n_atoms: int = 0
    omega_c: float = 0.0
    epsilon: float = 0.0
    delta_p: float = 0.0
    delta1: float = 0.0
    delta2: float = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v!r}")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        for name in ("gamma31", "gamma32", "deph2", "deph3", "g", "omega_c", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_atoms < 0 or int(self.n_atoms) != self.n_atoms:
            raise ValueError("n_atoms must be a nonnegative integer")
        object.__setattr__(self, "n_atoms", int(self.n_atoms))
        if self.n_atoms > 0 and self.gamma3_total <= 0:
            raise ValueError("gamma31 + gamma32 must be positive when atoms are present")

    @property
    def gamma3_total(self) -> float:
        return self.gamma31 + self.gamma32

    def replace(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)

    def as_array(self) -> np.ndarray:
        p = np.empty(N_PARAMS)
        p[P_KAPPA] = self.kappa
        p[P_G31] = self.gamma31
        p[P_G32] = self.gamma32
        p[P_DEPH2] = self.deph2
        p[P_DEPH3] = self.deph3
        p[P_G] = self.g
        p[P_N] = self.n_atoms
        p[P_OMEGA] = self.omega_c
        p[P_EPS] = self.epsilon
        p[P_DP] = self.delta_p
        p[P_D1] = self.delta1
        p[P_D2] = self.delta2
        return p

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SemiclassicalState:
    """Cavity amplitude plus per-atom coherences and populations."""

    alpha: complex = 0j
    s13: complex = 0j
    s12: complex = 0j
    s23: complex = 0j
    s11: float = 1.0
    s22: float = 0.0

    @property
    def s33(self) -> float:
        return 1.0 - self.s11 - self.s22

    @property
    def n_photons(self) -> float:
        return abs(self.alpha) ** 2

    def to_vector(self) -> np.ndarray:
        return np.array([
            self.alpha.real, self.alpha.imag,
            self.s13.real, self.s13.imag,
            self.s12.real, self.s12.imag,
            self.s23.real, self.s23.imag,
            self.s11, self.s22,
        ])

    @classmethod
    def from_vector(cls, y) -> "SemiclassicalState":
        y = np.asarray(y, dtype=float)
        if y.shape != (STATE_DIM,):
            raise ValueError(f"state vector must have shape ({STATE_DIM},), got {y.shape}")
        return cls(
            alpha=complex(y[0], y[1]),
            s13=complex(y[2], y[3]),
            s12=complex(y[4], y[5]),
            s23=complex(y[6], y[7]),
            s11=float(y[8]),
            s22=float(y[9]),
        )

    def conjugate(self) -> "SemiclassicalState":
        return SemiclassicalState(
            self.alpha.conjugate(), self.s13.conjugate(), self.s12.conjugate(),
            self.s23.conjugate(), self.s11, self.s22,
        )


@dataclass(frozen=True)
class StateDerivative:
    """Time derivatives of all seven dynamical expectation values."""

    alpha: complex
    s13: complex
    s12: complex
    s23: complex
    s11: float
    s22: float
    s33: float


def free_indices(params: PhysicalParams) -> np.ndarray:
    """Components solved for in steady-state problems.

    With no control field and no decay into |2>, the population of |2> is
    exactly conserved and its equation vanishes identically; it is then held
    at its initial value and dropped from the unknowns.
    """
    if params.omega_c == 0.0 and params.gamma32 == 0.0:
        return np.arange(STATE_DIM - 1)
    return np.arange(STATE_DIM)


def stability_indices(params: PhysicalParams) -> np.ndarray:
    """Components whose linear response decides stability.

    Without atoms the field does not feel the atomic variables at all, and
    their undamped ground-state modes say nothing about the transmission, so
    only the cavity block is examined.
    """
    if params.n_atoms == 0:
        return np.arange(2)
    return free_indices(params)


def ground_state(alpha: complex = 0j) -> SemiclassicalState:
    """All atoms in |1>, the default cold start."""
    return SemiclassicalState(alpha=complex(alpha))


def empty_cavity_alpha(params: PhysicalParams) -> complex:
    """Steady field amplitude of the cavity with no atoms."""
    return params.epsilon / complex(params.delta_p, params.kappa)


@njit(cache=True)
def rhs_into(y, p, out):
    kappa = p[P_KAPPA]
    g31 = p[P_G31]
    g32 = p[P_G32]
    gam3 = g31 + g32
    deph2 = p[P_DEPH2]
    deph3 = p[P_DEPH3]
    g = p[P_G]
    n_at = p[P_N]
    om = p[P_OMEGA]
    eps = p[P_EPS]
    dp = p[P_DP]
    d1 = p[P_D1]
    d2 = p[P_D2]

    a = complex(y[0], y[1])
    s13 = complex(y[2], y[3])
    s12 = complex(y[4], y[5])
    s23 = complex(y[6], y[7])
    s11 = y[8]
    s22 = y[9]
    s33 = 1.0 - s11 - s22
    ga = g * a

    da = 1j * complex(dp, kappa) * a - 1j * eps - 1j * g * n_at * s13
    d13 = 1j * complex(dp - d1, gam3 + deph3) * s13 - 1j * om * s12 + 1j * ga * (s33 - s11)
    d12 = 1j * complex(dp + d2 - d1, deph2) * s12 - 1j * om * s13 + 1j * ga * s23.conjugate()
    d23 = (1j * complex(-d2, gam3 + deph2 + deph3) * s23 - 1j * ga * s12.conjugate()
           + 1j * om * (s33 - s22))
    # -i g a* s13 + c.c. and -i om s23 + c.c.
    d11 = -2.0 * (ga * s13.conjugate()).imag + 2.0 * g31 * s33
    d22 = 2.0 * om * s23.imag + 2.0 * g32 * s33

    out[0] = da.real
    out[1] = da.imag
    out[2] = d13.real
    out[3] = d13.imag
    out[4] = d12.real
    out[5] = d12.imag
    out[6] = d23.real
    out[7] = d23.imag
    out[8] = d11
    out[9] = d22


@njit(cache=True)
def rhs_vec(y, p):
    out = np.empty(10)
    rhs_into(y, p, out)
    return out


@njit(cache=True)
def jacobian_fd(y, p, rel_step):
    """Central-difference Jacobian of the reduced right-hand side."""
    n = y.shape[0]
    jac = np.empty((n, n))
    yp = y.copy()
    fp = np.empty(n)
    fm = np.empty(n)
    for j in range(n):
        h = rel_step * (1.0 + abs(y[j]))
        yp[j] = y[j] + h
        rhs_into(yp, p, fp)
        yp[j] = y[j] - h
        rhs_into(yp, p, fm)
        yp[j] = y[j]
        for i in range(n):
            jac[i, j] = (fp[i] - fm[i]) / (2.0 * h)
    return jac


def bloch_rhs(state: SemiclassicalState, params: PhysicalParams) -> StateDerivative:
    """Time derivative of every component of ``state`` under ``params``."""
    d = rhs_vec(state.to_vector(), params.as_array())
    return StateDerivative(
        alpha=complex(d[0], d[1]),
        s13=complex(d[2], d[3]),
        s12=complex(d[4], d[5]),
        s23=complex(d[6], d[7]),
        s11=float(d[8]),
        s22=float(d[9]),
        s33=float(-d[8] - d[9]),
    )


def cooperativity(params: PhysicalParams) -> float:
    """C = N g^2 / (2 kappa Gamma_3)."""
    if params.gamma3_total <= 0:
        raise ValueError("cooperativity undefined for gamma31 + gamma32 = 0")
    return params.n_atoms * params.g ** 2 / (2.0 * params.kappa * params.gamma3_total)


def cooperativity_to_g(c: float, params: PhysicalParams) -> float:
    """Coupling g that gives cooperativity ``c`` at the other parameters of ``params``."""
    if c < 0:
        raise ValueError("cooperativity must be nonnegative")
    if params.n_atoms <= 0:
        raise ValueError("cooperativity_to_g needs n_atoms > 0")
    if params.gamma3_total <= 0:
        raise ValueError("cooperativity_to_g needs gamma31 + gamma32 > 0")
    return math.sqrt(2.0 * c * params.kappa * params.gamma3_total / params.n_atoms)


def with_cooperativity(params: PhysicalParams, c: float) -> PhysicalParams:
    return params.replace(g=cooperativity_to_g(c, params))


def transmission_norm(state: SemiclassicalState, params: PhysicalParams) -> float:
    """<n> / (epsilon/kappa)^2, the transmission relative to the empty resonant cavity."""
    if params.epsilon <= 0:
        raise ValueError("normalized transmission needs epsilon > 0")
    return state.n_photons / (params.epsilon / params.kappa) ** 2


@dataclass(frozen=True)
class DerivedQuantities:
    cooperativity: float
    n_photons: float
    transmission_norm: float | None


def derived_quantities(state: SemiclassicalState, params: PhysicalParams) -> DerivedQuantities:
    c = cooperativity(params) if params.gamma3_total > 0 else 0.0
    t = transmission_norm(state, params) if params.epsilon > 0 else None
    return DerivedQuantities(cooperativity=c, n_photons=state.n_photons, transmission_norm=t)
