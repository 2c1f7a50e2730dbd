"""Hamiltonian of the truncated nonlinear wave equation

    u_tt = u_xx - (m + M_xi) u + eps * u^3,   u(t, 0) = u(t, pi) = 0,

in complex and action-angle coordinates: eigendata, quartic coupling
coefficients, complexification, action-angle lift, and the parameter box.

The stored Hamiltonian generates exactly this equation:

    H = 1/2 sum_j lambda_j (q_j^2 + qt_j^2) - (eps/4) * int u^4 dx

with lambda_j = sqrt(j^2 + m + xi_j).  Complex coordinates are chosen as
w_j = (q_j - i qt_j)/sqrt(2) so that the linear flow of mode j is
w_j(t) = exp(i lambda_j t) w_j(0) under the package's vector-field
convention.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import binom

from .errors import CapError, DimensionError, ParameterDomainError
from .polynomials import PolyHamiltonian

SQRT2 = np.sqrt(2.0)


# -- parameter box -----------------------------------------------------


def box_bounds(n_total):
    """Lower/upper bounds of the parameter box: xi_j in [1/j, 2/j]."""
    j = np.arange(1, n_total + 1, dtype=float)
    return 1.0 / j, 2.0 / j


@dataclass(frozen=True)
class ParameterPoint:
    """A point of the truncated parameter box."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        object.__setattr__(self, "xi", xi)
        lo, hi = box_bounds(len(xi))
        if np.any(xi < lo - 1e-15) or np.any(xi > hi + 1e-15):
            j = int(np.argmax((xi < lo - 1e-15) | (xi > hi + 1e-15))) + 1
            raise ParameterDomainError(
                f"xi_{j} = {xi[j - 1]} outside [1/{j}, 2/{j}]")

    def __len__(self):
        return len(self.xi)

    @classmethod
    def midpoint(cls, n_total):
        lo, hi = box_bounds(n_total)
        return cls(0.5 * (lo + hi))

    @classmethod
    def random(cls, rng, n_total):
        lo, hi = box_bounds(n_total)
        return cls(lo + (hi - lo) * rng.random(n_total))


def xi_extension(index, n_total, xi):
    """Parameter value at a mode index, extended beyond truncation by the
    box midpoint 1.5/index."""
    if index <= n_total:
        return float(np.asarray(xi)[index - 1])
    return 1.5 / index


# -- model configuration ----------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Parameters of the truncated wave model and its polynomial algebra.

    Attributes
    ----------
    m : float
        Non-negative mass constant.
    n : int
        Number of tangential modes (action-angle pairs).
    J : int
        Number of retained normal modes.
    epsilon : float
        Nonlinearity strength.
    actions : tuple of float
        Nominal actions I_j > 0 of the tangential modes.
    taylor_order : int
        Truncation order of the action-angle square-root expansion.
    s, r : float
        Analyticity/domain radii in (0, 1].
    degree_cap, fourier_cap : int
        Caps of the polynomial algebra.
    track_derivatives : bool
        Carry forward-mode parameter derivatives through the build.
    """

    m: float
    n: int
    J: int
    epsilon: float
    actions: tuple
    taylor_order: int = 3
    s: float = 0.4
    r: float = 0.1
    degree_cap: int = 5
    fourier_cap: int = 12
    track_derivatives: bool = True

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(float(a) for a in self.actions))
        if self.m < 0:
            raise ParameterDomainError("mass m must be non-negative")
        if self.n < 1 or self.J < 1:
            raise DimensionError("need n >= 1 and J >= 1")
        if len(self.actions) != self.n:
            raise DimensionError("actions must have length n")
        if any(a <= 0 for a in self.actions):
            raise ParameterDomainError("actions must be positive")
        if self.taylor_order < 1:
            raise ParameterDomainError("taylor_order must be >= 1")
        if not (0 < self.s <= 1 and 0 < self.r <= 1):
            raise ParameterDomainError("s, r must lie in (0, 1]")

    @property
    def n_total(self):
        return self.n + self.J

    def action_window_ok(self):
        """Whether r^2 < min I_j, so sqrt(I + y) is analytic on |y| < r^2."""
        return self.r ** 2 < min(self.actions)


# -- frequencies -------------------------------------------------------


@dataclass
class FrequencyData:
    """Tangential and normal frequencies, with optional corrections from
    the quadratic normalization stage."""

    m: float
    n: int
    J: int
    xi: np.ndarray
    lam: np.ndarray                      # all n + J eigenfrequencies
    omega: np.ndarray                    # tangential, length n
    Omega: np.ndarray                    # normal, length J
    omega_corr: np.ndarray | None = None
    Omega_corr: np.ndarray | None = None
    deviations: dict = field(default_factory=dict)

    def omega_eff(self):
        return self.omega if self.omega_corr is None else self.omega_corr

    def Omega_eff(self):
        return self.Omega if self.Omega_corr is None else self.Omega_corr

    def Omega_at(self, j):
        """Normal frequency of mode j >= 1, extended analytically beyond
        the truncation; corrections apply only to retained modes."""
        if j <= self.J:
            return float(self.Omega_eff()[j - 1])
        xi_val = xi_extension(j + self.n, self.n + self.J, self.xi)
        return float(np.sqrt((j + self.n) ** 2 + self.m + xi_val))

    def with_corrections(self, omega_corr, Omega_corr, deviations):
        return FrequencyData(self.m, self.n, self.J, self.xi, self.lam,
                             self.omega, self.Omega,
                             np.asarray(omega_corr, dtype=float),
                             np.asarray(Omega_corr, dtype=float),
                             dict(deviations))


def eigen_frequencies(m, xi, n, J):
    """Eigenfrequencies lambda_j = sqrt(j^2 + m + xi_j) and their
    tangential/normal split."""
    xi = np.asarray(xi, dtype=float)
    if len(xi) != n + J:
        raise DimensionError("xi must have length n + J")
    ParameterPoint(xi)  # raises ParameterDomainError outside the box
    j = np.arange(1, n + J + 1, dtype=float)
    lam = np.sqrt(j ** 2 + m + xi)
    return FrequencyData(m, n, J, xi, lam, lam[:n], lam[n:])


# -- quartic coupling --------------------------------------------------

_SIGNS = ((1, -1, -1, 1), (1, -1, 1, -1), (1, -1, -1, -1), (1, -1, 1, 1),
          (1, 1, -1, 1), (1, 1, 1, -1), (1, 1, -1, -1))
_SIGN_WEIGHTS = (1, 1, -1, -1, -1, -1, 1)


def sine_quartic_integral(i, j, k, l):
    """Closed form of int_0^pi phi_i phi_j phi_k phi_l dx with
    phi_j = sqrt(2/pi) sin(j x), by product-to-sum reduction."""
    total = 0
    for signs, w in zip(_SIGNS, _SIGN_WEIGHTS):
        if signs[0] * i + signs[1] * j + signs[2] * k + signs[3] * l == 0:
            total += w
    return total / (2.0 * np.pi)


def quartic_coupling(i, j, k, l, lam):
    """Coupling coefficient G_{ijkl}; exactly zero unless some signed
    combination i +- j +- k +- l vanishes."""
    s = sine_quartic_integral(i, j, k, l)
    if s == 0.0:
        return 0.0
    lam = np.asarray(lam, dtype=float)
    return s / np.sqrt(lam[i - 1] * lam[j - 1] * lam[k - 1] * lam[l - 1])


def coupling_multisets(n_total):
    """All sorted quadruples (i <= j <= k <= l) in [1, n_total]^4 with a
    vanishing signed combination, with their ordered-arrangement counts."""
    out = []
    for i in range(1, n_total + 1):
        for j in range(i, n_total + 1):
            for k in range(j, n_total + 1):
                cands = {i + j + k, i + j - k, i - j + k, -i + j + k}
                for l in cands:
                    if k <= l <= n_total:
                        quad = (i, j, k, l)
                        mult = {}
                        for v in quad:
                            mult[v] = mult.get(v, 0) + 1
                        orderings = 24
                        for c in mult.values():
                            orderings //= math.factorial(c)
                        out.append((quad, mult, orderings))
    return out


# -- Hamiltonian construction ------------------------------------------


def build_complex_hamiltonian(cfg, xi, track_derivatives=None):
    """The wave Hamiltonian in complex coordinates (w, wbar) over all
    n + J modes, as a polynomial with no action-angle pairs.

    Returns (PolyHamiltonian with n=0 and J=n_total, FrequencyData).  The
    quadratic part is sum_j lambda_j w_j wbar_j; the quartic part is
    -(eps/4) int u^4 expressed through q_m = (w_m + wbar_m)/sqrt(2), so
    Hamilton's equations reproduce u_tt = u_xx - (m + M_xi) u + eps u^3.
    """
    if track_derivatives is None:
        track_derivatives = cfg.track_derivatives
    freq = eigen_frequencies(cfg.m, xi, cfg.n, cfg.J)
    nt = cfg.n_total
    lam = freq.lam
    n_params = nt if track_derivatives else None

    width = 2 * nt
    rows, cs = [], []
    ds = [] if track_derivatives else None
    for j in range(nt):
        row = np.zeros(width, dtype=np.int16)
        row[j] = 1
        row[nt + j] = 1
        rows.append(row)
        cs.append(lam[j])
        if track_derivatives:
            dvec = np.zeros(nt, dtype=np.complex128)
            dvec[j] = 1.0 / (2.0 * lam[j])
            ds.append(dvec)

    if cfg.epsilon != 0.0:
        splits = {}
        for mult in range(1, 5):
            splits[mult] = [(b, mult - b, binom(mult, b)) for b in range(mult + 1)]
        for quad, mult, orderings in coupling_multisets(nt):
            g = quartic_coupling(*quad, lam)
            if g == 0.0:
                continue
            base = -(cfg.epsilon / 16.0) * g * orderings
            if track_derivatives:
                dbase = np.zeros(nt, dtype=np.complex128)
                for mode, c in mult.items():
                    dbase[mode - 1] = base * (-c / (4.0 * lam[mode - 1] ** 2))
            modes = sorted(mult)
            for choice in itertools.product(*[splits[mult[mo]] for mo in modes]):
                row = np.zeros(width, dtype=np.int16)
                factor = 1.0
                for mo, (b, gpow, cnt) in zip(modes, choice):
                    row[mo - 1] = b
                    row[nt + mo - 1] = gpow
                    factor *= cnt
                rows.append(row)
                cs.append(base * factor)
                if track_derivatives:
                    ds.append(dbase * factor)

    H = PolyHamiltonian(0, nt, cfg.degree_cap, max(cfg.fourier_cap, 0),
                        np.vstack(rows), np.array(cs, dtype=np.complex128),
                        np.vstack(ds) if track_derivatives else None)
    return H, freq


def action_angle_lift(H_complex, actions, taylor_order, n, degree_cap=None,
                      fourier_cap=None):
    """Lift the first n complex modes to action-angle variables via
    w_j = sqrt(I_j + y_j) exp(i x_j).

    Tangential powers (I_j + y_j)^(mu_j + nu_j)/2 are Taylor-expanded
    around y = 0 up to total order ``taylor_order`` (exact when all
    tangential powers are even); normal modes keep complex coordinates.
    """
    if H_complex.n != 0:
        raise DimensionError("expected a complex-coordinate Hamiltonian (n=0)")
    nt = H_complex.J
    J = nt - n
    if J < 1:
        raise DimensionError("lift requires at least one normal mode")
    D = H_complex.degree_cap if degree_cap is None else degree_cap
    K = H_complex.fourier_cap if fourier_cap is None else fourier_cap
    if taylor_order > D:
        raise CapError(f"taylor_order {taylor_order} exceeds degree cap {D}")
    actions = np.asarray(actions, dtype=float)

    width = 2 * n + 2 * J
    rows, cs = [], []
    track = H_complex.dcoeffs is not None
    ds = [] if track else None

    for idx in range(H_complex.n_terms):
        exp_in = H_complex.exps[idx]
        mu = exp_in[:n].astype(int)
        nu = exp_in[nt:nt + n].astype(int)
        beta = exp_in[n:nt]
        gamma = exp_in[nt + n:]
        coeff = H_complex.coeffs[idx]
        dvec = H_complex.dcoeffs[idx] if track else None
        k = mu - nu
        z_deg = int(beta.sum() + gamma.sum())
        # per-mode Taylor factors of (I_j + y_j)^(m_j/2)
        per_mode = []
        for j in range(n):
            mj = mu[j] + nu[j]
            if mj == 0:
                per_mode.append([(0, 1.0)])
                continue
            half = mj / 2.0
            terms_j = []
            amax = int(half) if mj % 2 == 0 else taylor_order
            for a in range(min(amax, taylor_order) + 1):
                terms_j.append((a, binom(half, a) * actions[j] ** (half - a)))
            per_mode.append(terms_j)
        for combo in itertools.product(*per_mode):
            a_total = sum(a for a, _ in combo)
            if a_total > taylor_order:
                continue
            if 2 * a_total + z_deg > D:
                continue
            factor = 1.0
            row = np.zeros(width, dtype=np.int16)
            row[:n] = k
            for j, (a, f) in enumerate(combo):
                row[n + j] = a
                factor *= f
            row[2 * n:2 * n + J] = beta
            row[2 * n + J:] = gamma
            rows.append(row)
            cs.append(coeff * factor)
            if track:
                ds.append(dvec * factor)

    if not rows:
        return PolyHamiltonian.zero(n, J, D, K,
                                    H_complex.n_params if track else None)
    return PolyHamiltonian(n, J, D, K, np.vstack(rows),
                           np.array(cs, dtype=np.complex128),
                           np.vstack(ds) if track else None)


def build_lifted_hamiltonian(cfg, xi):
    """Full pipeline: complex Hamiltonian, then the action-angle lift.

    Returns (H_lifted, H_complex, FrequencyData).
    """
    H_complex, freq = build_complex_hamiltonian(cfg, xi)
    H = action_angle_lift(H_complex, cfg.actions, cfg.taylor_order, cfg.n,
                          degree_cap=cfg.degree_cap,
                          fourier_cap=cfg.fourier_cap)
    return H, H_complex, freq
