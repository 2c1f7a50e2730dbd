"""Sparse graded polynomial algebra on the phase space (x, y, q, qbar).

A Hamiltonian is stored as a finite sum of monomials

    c * exp(i <k, x>) * y^alpha * q^beta * qbar^gamma,

with k in Z^n (angle-Fourier index), alpha in N^n (action powers) and
beta, gamma in N^J (normal-mode powers).  The weighted degree of a monomial
is 2|alpha| + |beta| + |gamma|; every polynomial carries a degree cap and a
Fourier cap (on |k| in the 1-norm) and is kept in a canonical form: terms
sorted lexicographically on (degree, k, alpha, beta, gamma), duplicate keys
merged, and coefficients below a relative drop tolerance removed.

Each term may optionally carry a vector of directional parameter
derivatives (forward-mode), propagated through every arithmetic operation.

All values are immutable after construction and every operation is a pure
function returning a new polynomial.
"""

from collections.abc import Iterable
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (CapError, ConvergenceError, DimensionError,
                     NonNilpotentGenerator)

# Relative coefficient drop tolerance: keeps the canonical form stable
# under arithmetic noise without touching physically meaningful terms.
DROP_TOL = 1e-16

# Exponent storage type; |k| entries and powers must stay within its range,
# which the caps guarantee at every supported truncation.
EXP_DTYPE = np.int8


class TruncationInfo(NamedTuple):
    """Terms silently dropped by a cap during an arithmetic operation."""

    dropped_terms: int
    dropped_mass: float


NO_TRUNCATION = TruncationInfo(0, 0.0)


def _as_exps(n, J, k, alpha, beta, gamma):
    row = np.zeros(2 * n + 2 * J, dtype=EXP_DTYPE)
    row[:n] = k
    row[n:2 * n] = alpha
    row[2 * n:2 * n + J] = beta
    row[2 * n + J:] = gamma
    return row


def _row_view(exps):
    """Void view of exponent rows for byte-wise grouping and sorting."""
    a = np.ascontiguousarray(exps)
    return a.view(np.dtype((np.void, a.shape[1] * a.itemsize))).ravel()


class PolyHamiltonian:
    """A sparse polynomial Hamiltonian at fixed truncation.

    Parameters
    ----------
    n : int
        Number of angle/action pairs.
    J : int
        Number of normal modes.
    degree_cap : int
        Maximal weighted degree 2|alpha| + |beta| + |gamma| of stored terms.
    fourier_cap : int
        Maximal 1-norm |k| of stored angle-Fourier indices.
    exps : small-integer ndarray, shape (T, 2n + 2J)
        Exponent rows laid out as [k | alpha | beta | gamma].
    coeffs : ndarray of complex, shape (T,)
    dcoeffs : ndarray of complex, shape (T, n_params), optional
        Directional parameter-derivative coefficients per term.
    """

    __slots__ = ("n", "J", "degree_cap", "fourier_cap", "exps", "coeffs",
                 "dcoeffs", "truncation", "_index")

    def __init__(self, n, J, degree_cap, fourier_cap, exps=None, coeffs=None,
                 dcoeffs=None, truncation=NO_TRUNCATION, canonical=False):
        self.n = int(n)
        self.J = int(J)
        self.degree_cap = int(degree_cap)
        self.fourier_cap = int(fourier_cap)
        width = 2 * self.n + 2 * self.J
        if exps is None:
            exps = np.zeros((0, width), dtype=EXP_DTYPE)
            coeffs = np.zeros(0, dtype=np.complex128)
        exps = np.asarray(exps, dtype=EXP_DTYPE)
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if exps.ndim != 2 or exps.shape[1] != width or exps.shape[0] != coeffs.shape[0]:
            raise DimensionError("exponent/coefficient arrays are inconsistent")
        if dcoeffs is not None:
            dcoeffs = np.asarray(dcoeffs, dtype=np.complex128)
            if dcoeffs.shape[0] != coeffs.shape[0]:
                raise DimensionError("derivative array length mismatch")
        self.exps = exps
        self.coeffs = coeffs
        self.dcoeffs = dcoeffs
        self.truncation = truncation
        self._index = None
        if not canonical:
            self._canonicalize()
        self.exps.setflags(write=False)
        self.coeffs.setflags(write=False)
        if self.dcoeffs is not None:
            self.dcoeffs.setflags(write=False)

    # -- construction -------------------------------------------------

    @classmethod
    def zero(cls, n, J, degree_cap, fourier_cap, n_params=None):
        d = None
        if n_params is not None:
            d = np.zeros((0, n_params), dtype=np.complex128)
        return cls(n, J, degree_cap, fourier_cap,
                   np.zeros((0, 2 * n + 2 * J), dtype=EXP_DTYPE),
                   np.zeros(0, dtype=np.complex128), d, canonical=True)

    @classmethod
    def from_terms(cls, n, J, degree_cap, fourier_cap, terms, n_params=None):
        """Build from an iterable of (k, alpha, beta, gamma, coeff[, dcoeff]).

        Raises CapError if a term exceeds the caps (direct construction
        beyond the caps is a usage error; arithmetic drops such terms and
        counts them instead).
        """
        terms = list(terms)
        if n_params is None:
            for term in terms:
                if len(term) > 5 and term[5] is not None:
                    n_params = len(term[5])
                    break
        rows, cs, ds = [], [], []
        for term in terms:
            k, alpha, beta, gamma, c = term[:5]
            row = _as_exps(n, J, k, alpha, beta, gamma)
            deg = 2 * int(np.sum(row[n:2 * n])) + int(np.sum(row[2 * n:]))
            if deg > degree_cap:
                raise CapError(f"term degree {deg} exceeds cap {degree_cap}")
            if int(np.sum(np.abs(row[:n]))) > fourier_cap:
                raise CapError("term |k| exceeds Fourier cap")
            if np.any(row[n:] < 0):
                raise DimensionError("alpha/beta/gamma powers must be non-negative")
            rows.append(row)
            cs.append(complex(c))
            if n_params is not None:
                if len(term) > 5 and term[5] is not None:
                    ds.append(np.asarray(term[5], dtype=np.complex128))
                else:
                    ds.append(np.zeros(n_params, dtype=np.complex128))
        if not rows:
            return cls.zero(n, J, degree_cap, fourier_cap, n_params)
        d = np.vstack(ds) if ds else None
        return cls(n, J, degree_cap, fourier_cap, np.vstack(rows),
                   np.array(cs), d)

    @classmethod
    def constant(cls, n, J, degree_cap, fourier_cap, value, n_params=None):
        zn, zJ = np.zeros(n, dtype=int), np.zeros(J, dtype=int)
        return cls.from_terms(n, J, degree_cap, fourier_cap,
                              [(zn, zn, zJ, zJ, value)], n_params=n_params)

    def _replace(self, exps, coeffs, dcoeffs, truncation=NO_TRUNCATION,
                 canonical=False):
        return PolyHamiltonian(self.n, self.J, self.degree_cap,
                               self.fourier_cap, exps, coeffs, dcoeffs,
                               truncation, canonical=canonical)

    # -- canonical form -----------------------------------------------

    def _canonicalize(self):
        exps, coeffs, dcoeffs = self.exps, self.coeffs, self.dcoeffs
        if exps.shape[0] == 0:
            return
        rows = _row_view(exps)
        order = np.argsort(rows, kind="stable")
        rows = rows[order]
        exps = exps[order]
        coeffs = coeffs[order]
        if dcoeffs is not None:
            dcoeffs = dcoeffs[order]
        new_group = np.ones(len(rows), dtype=bool)
        new_group[1:] = rows[1:] != rows[:-1]
        starts = np.flatnonzero(new_group)
        coeffs = np.add.reduceat(coeffs, starts)
        if dcoeffs is not None:
            dcoeffs = np.add.reduceat(dcoeffs, starts, axis=0)
        exps = exps[starts]
        mag = np.abs(coeffs)
        top = mag.max(initial=0.0)
        keep = mag > DROP_TOL * top
        if dcoeffs is not None:
            # keep terms whose value vanished but whose derivative did not
            dmag = np.abs(dcoeffs).max(axis=1, initial=0.0)
            keep |= dmag > DROP_TOL * max(top, dmag.max(initial=0.0))
        self.exps = np.ascontiguousarray(exps[keep])
        self.coeffs = coeffs[keep]
        self.dcoeffs = dcoeffs[keep] if dcoeffs is not None else None

    # -- basic queries ------------------------------------------------

    @property
    def n_terms(self):
        return self.exps.shape[0]

    @property
    def n_params(self):
        return None if self.dcoeffs is None else self.dcoeffs.shape[1]

    def k_block(self):
        return self.exps[:, :self.n]

    def alpha_block(self):
        return self.exps[:, self.n:2 * self.n]

    def beta_block(self):
        return self.exps[:, 2 * self.n:2 * self.n + self.J]

    def gamma_block(self):
        return self.exps[:, 2 * self.n + self.J:]

    def degrees(self):
        """Weighted degree 2|alpha| + |beta| + |gamma| per term."""
        n = self.n
        return (2 * self.exps[:, n:2 * n].sum(axis=1, dtype=np.int64)
                + self.exps[:, 2 * n:].sum(axis=1, dtype=np.int64))

    def fourier_sizes(self):
        return np.abs(self.exps[:, :self.n]).sum(axis=1, dtype=np.int64)

    def min_degree(self):
        d = self.degrees()
        return int(d.min()) if d.size else None

    def max_abs_coeff(self):
        return float(np.abs(self.coeffs).max(initial=0.0))

    def _build_index(self):
        if self._index is None:
            self._index = {r.tobytes(): i for i, r in enumerate(self.exps)}
        return self._index

    def coefficient(self, k, alpha, beta, gamma):
        row = _as_exps(self.n, self.J, k, alpha, beta, gamma)
        i = self._build_index().get(row.tobytes())
        return 0j if i is None else complex(self.coeffs[i])

    def dcoefficient(self, k, alpha, beta, gamma):
        if self.dcoeffs is None:
            return None
        row = _as_exps(self.n, self.J, k, alpha, beta, gamma)
        i = self._build_index().get(row.tobytes())
        if i is None:
            return np.zeros(self.dcoeffs.shape[1], dtype=np.complex128)
        return self.dcoeffs[i].copy()

    def terms(self):
        """Iterate (k, alpha, beta, gamma, coeff) tuples in canonical order."""
        n, J = self.n, self.J
        for i in range(self.n_terms):
            row = self.exps[i]
            yield (tuple(int(v) for v in row[:n]),
                   tuple(int(v) for v in row[n:2 * n]),
                   tuple(int(v) for v in row[2 * n:2 * n + J]),
                   tuple(int(v) for v in row[2 * n + J:]),
                   complex(self.coeffs[i]))

    def _check_compatible(self, other):
        if (self.n, self.J) != (other.n, other.J):
            raise DimensionError(
                f"incompatible shapes ({self.n},{self.J}) vs ({other.n},{other.J})")

    # -- arithmetic ----------------------------------------------------

    def _merged_dcoeffs(self, other, d_self, d_other):
        if d_self is None and d_other is None:
            return None, None
        p = d_self.shape[1] if d_self is not None else d_other.shape[1]
        if d_self is None:
            d_self = np.zeros((self.n_terms, p), dtype=np.complex128)
        if d_other is None:
            d_other = np.zeros((other.n_terms, p), dtype=np.complex128)
        if d_self.shape[1] != d_other.shape[1]:
            raise DimensionError("derivative parameter counts differ")
        return d_self, d_other

    def __add__(self, other):
        if np.isscalar(other):
            other = PolyHamiltonian.constant(self.n, self.J, self.degree_cap,
                                             self.fourier_cap, other,
                                             n_params=self.n_params)
        self._check_compatible(other)
        ds, do = self._merged_dcoeffs(other, self.dcoeffs, other.dcoeffs)
        d = None if ds is None else np.vstack([ds, do])
        cap = max(self.degree_cap, other.degree_cap)
        kcap = max(self.fourier_cap, other.fourier_cap)
        return PolyHamiltonian(self.n, self.J, cap, kcap,
                               np.vstack([self.exps, other.exps]),
                               np.concatenate([self.coeffs, other.coeffs]), d)

    __radd__ = __add__

    def __neg__(self):
        d = None if self.dcoeffs is None else -self.dcoeffs
        return self._replace(self.exps, -self.coeffs, d, canonical=True)

    def __sub__(self, other):
        return self + (-other if isinstance(other, PolyHamiltonian) else -complex(other))

    def __mul__(self, other):
        if np.isscalar(other):
            c = complex(other)
            d = None if self.dcoeffs is None else c * self.dcoeffs
            return self._replace(self.exps, c * self.coeffs, d)
        self._check_compatible(other)
        return _poly_multiply(self, other)

    __rmul__ = __mul__

    def scale_with_derivative(self, value, dvalue):
        """Multiply by a parameter-dependent scalar (value, gradient)."""
        dvalue = np.asarray(dvalue, dtype=np.complex128)
        d = np.outer(self.coeffs, dvalue)
        if self.dcoeffs is not None:
            d = d + value * self.dcoeffs
        return self._replace(self.exps, value * self.coeffs, d)

    # -- structure ----------------------------------------------------

    def filter(self, mask):
        """Sub-polynomial of the terms selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        d = None if self.dcoeffs is None else self.dcoeffs[mask]
        return self._replace(np.ascontiguousarray(self.exps[mask]),
                             self.coeffs[mask], d, canonical=True)

    def degree_slice(self, lo, hi):
        """Terms with lo <= weighted degree <= hi."""
        d = self.degrees()
        return self.filter((d >= lo) & (d <= hi))

    def with_caps(self, degree_cap=None, fourier_cap=None):
        """Copy with new caps; terms beyond them are dropped and counted."""
        D = self.degree_cap if degree_cap is None else degree_cap
        K = self.fourier_cap if fourier_cap is None else fourier_cap
        keep = (self.degrees() <= D) & (self.fourier_sizes() <= K)
        dropped = int(np.sum(~keep))
        mass = float(np.abs(self.coeffs[~keep]).sum()) if dropped else 0.0
        d = None if self.dcoeffs is None else self.dcoeffs[keep]
        return PolyHamiltonian(self.n, self.J, D, K,
                               np.ascontiguousarray(self.exps[keep]),
                               self.coeffs[keep], d,
                               TruncationInfo(dropped, mass), canonical=True)

    def z_degrees(self):
        return self.exps[:, 2 * self.n:].sum(axis=1, dtype=np.int64)

    def z_homogeneous(self, h):
        """Terms whose total z-degree |beta| + |gamma| equals h."""
        return self.filter(self.z_degrees() == h)

    def derivative(self, kind, index):
        """Partial derivative polynomial.

        kind is one of "x", "y", "q", "qbar"; index is 0-based within the
        corresponding block.  d/dx_j multiplies by i*k_j, the others lower
        the power and multiply by it.
        """
        n, J = self.n, self.J
        if kind == "x":
            col = index
            factor = 1j * self.exps[:, col].astype(np.complex128)
            keep = self.exps[:, col] != 0
            exps = self.exps[keep].copy()
        else:
            col = {"y": n, "q": 2 * n, "qbar": 2 * n + J}[kind] + index
            keep = self.exps[:, col] > 0
            exps = self.exps[keep].copy()
            factor = exps[:, col].astype(np.complex128)
            exps[:, col] -= 1
        if kind == "x":
            factor = factor[keep]
        coeffs = self.coeffs[keep] * factor
        d = None
        if self.dcoeffs is not None:
            d = self.dcoeffs[keep] * factor[:, None]
        return self._replace(exps, coeffs, d)

    def conjugate_reflected(self):
        """The polynomial conj(c) at (-k, alpha, gamma, beta).

        Equals the original exactly when the Hamiltonian is real-valued on
        the real domain.
        """
        n, J = self.n, self.J
        exps = self.exps.copy()
        exps[:, :n] *= -1
        b = exps[:, 2 * n:2 * n + J].copy()
        exps[:, 2 * n:2 * n + J] = exps[:, 2 * n + J:]
        exps[:, 2 * n + J:] = b
        d = None if self.dcoeffs is None else np.conj(self.dcoeffs)
        return self._replace(exps, np.conj(self.coeffs), d)

    def reality_defect(self):
        """Max |c(k,a,b,g) - conj(c(-k,a,g,b))| over all terms."""
        diff = self - self.conjugate_reflected()
        return diff.max_abs_coeff()

    def without_derivatives(self):
        return self._replace(self.exps, self.coeffs, None, canonical=True)

    # -- evaluation ----------------------------------------------------

    def evaluate(self, point):
        """Evaluate at a PhasePoint; complex coordinates are accepted."""
        if (len(point.x) != self.n or len(point.y) != self.n
                or len(point.q) != self.J):
            raise DimensionError("phase point does not match (n, J)")
        out = evaluate_batch(self, np.atleast_2d(point.x), np.atleast_2d(point.y),
                             np.atleast_2d(point.q), np.atleast_2d(point.qbar_array()))
        return complex(out[0])

    def __repr__(self):
        return (f"PolyHamiltonian(n={self.n}, J={self.J}, terms={self.n_terms}, "
                f"D={self.degree_cap}, K={self.fourier_cap})")

    # -- serialization ------------------------------------------------

    def to_text(self):
        """One term per line: ``k|alpha|beta|gamma|re|im`` with sparse
        ``pos:power`` multi-indices (1-based positions)."""
        lines = [f"# n={self.n} J={self.J} degree_cap={self.degree_cap} "
                 f"fourier_cap={self.fourier_cap}"]
        for k, alpha, beta, gamma, c in self.terms():
            fields = [_sparse_str(k), _sparse_str(alpha), _sparse_str(beta),
                      _sparse_str(gamma), repr(c.real), repr(c.imag)]
            lines.append("|".join(fields))
        return "\n".join(lines) + "\n"

    def save_text(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        header = None
        terms = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None:
                    header = dict(kv.split("=") for kv in line[1:].split())
                continue
            ks, als, bes, gas, re_s, im_s = line.split("|")
            terms.append((ks, als, bes, gas, float(re_s) + 1j * float(im_s)))
        if header is None:
            raise ValueError("missing polynomial header line")
        n, J = int(header["n"]), int(header["J"])
        D, K = int(header["degree_cap"]), int(header["fourier_cap"])
        parsed = []
        for ks, als, bes, gas, c in terms:
            parsed.append((_sparse_parse(ks, n), _sparse_parse(als, n),
                           _sparse_parse(bes, J), _sparse_parse(gas, J), c))
        return cls.from_terms(n, J, D, K, parsed)

    @classmethod
    def load_text(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _sparse_str(vec):
    return ",".join(f"{i + 1}:{v}" for i, v in enumerate(vec) if v != 0)


def _sparse_parse(s, length):
    out = np.zeros(length, dtype=int)
    if s:
        for pair in s.split(","):
            pos, power = pair.split(":")
            out[int(pos) - 1] = int(power)
    return out


# -- phase points ------------------------------------------------------


@dataclass(frozen=True)
class PhasePoint:
    """A point (x, y, q, qbar) of the phase space.

    On real slices qbar is the entrywise conjugate of q and may be omitted.
    """

    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    qbar: np.ndarray | None = None

    def qbar_array(self):
        return np.conj(self.q) if self.qbar is None else self.qbar

    @classmethod
    def make(cls, x, y, q, qbar=None):
        return cls(np.asarray(x, dtype=complex), np.asarray(y, dtype=complex),
                   np.asarray(q, dtype=complex),
                   None if qbar is None else np.asarray(qbar, dtype=complex))


def evaluate_batch(poly, x, y, q, qbar):
    """Evaluate a polynomial on a batch of points.

    Parameters are arrays of shape (B, n), (B, n), (B, J), (B, J); the
    return value has shape (B,).  Complex entries are allowed everywhere.
    """
    n, J, T = poly.n, poly.J, poly.n_terms
    x = np.asarray(x, dtype=np.complex128)
    B = x.shape[0]
    if T == 0:
        return np.zeros(B, dtype=np.complex128)
    vals = np.ones((B, T), dtype=np.complex128)
    if n:
        k = poly.k_block().astype(np.float64)
        vals *= np.exp(1j * (x @ k.T))
    _apply_powers(vals, poly.alpha_block(), np.asarray(y, dtype=np.complex128))
    _apply_powers(vals, poly.beta_block(), np.asarray(q, dtype=np.complex128))
    _apply_powers(vals, poly.gamma_block(), np.asarray(qbar, dtype=np.complex128))
    return vals @ poly.coeffs


def _apply_powers(vals, expblock, coords):
    """In-place multiply of monomial values by coords**powers, grouped by
    (column, power) so the inner work stays vectorized."""
    for col in range(expblock.shape[1]):
        powers = expblock[:, col]
        for p in np.unique(powers):
            if p == 0:
                continue
            idx = np.flatnonzero(powers == p)
            vals[:, idx] *= (coords[:, col] ** int(p))[:, None]


# -- vector field ------------------------------------------------------


@dataclass(frozen=True)
class PolyVectorField:
    """The Hamiltonian vector field (H_y, -H_x, i H_qbar, -i H_q) with one
    component polynomial per coordinate."""

    dx: list
    dy: list
    dq: list
    dqbar: list

    def evaluate(self, x, y, q, qbar):
        """Evaluate all components on a batch; returns (B,n),(B,n),(B,J),(B,J)."""
        B = np.atleast_2d(x).shape[0]

        def block(polys):
            out = np.zeros((B, len(polys)), dtype=np.complex128)
            for j, p in enumerate(polys):
                out[:, j] = evaluate_batch(p, x, y, q, qbar)
            return out

        return block(self.dx), block(self.dy), block(self.dq), block(self.dqbar)


def vector_field(H):
    """Component polynomials of X_H per the convention
    (dx, dy, dq, dqbar) = (H_y, -H_x, i H_qbar, -i H_q)."""
    dx = [H.derivative("y", j) for j in range(H.n)]
    dy = [-H.derivative("x", j) for j in range(H.n)]
    dq = [1j * H.derivative("qbar", j) for j in range(H.J)]
    dqbar = [-1j * H.derivative("q", j) for j in range(H.J)]
    return PolyVectorField(dx, dy, dq, dqbar)


# -- Poisson bracket ---------------------------------------------------


def _outer_block(exps_u, c_u, d_u, exps_v, c_v, d_v, factor):
    """All pairwise products of two term blocks; factor scales coefficients."""
    Tu, Tv = exps_u.shape[0], exps_v.shape[0]
    iu = np.repeat(np.arange(Tu), Tv)
    iv = np.tile(np.arange(Tv), Tu)
    exps = exps_u[iu].astype(np.int16) + exps_v[iv]
    coeffs = factor * c_u[iu] * c_v[iv]
    d = None
    if d_u is not None or d_v is not None:
        p = d_u.shape[1] if d_u is not None else d_v.shape[1]
        d = np.zeros((len(coeffs), p), dtype=np.complex128)
        if d_u is not None:
            d += d_u[iu] * (factor * c_v[iv])[:, None]
        if d_v is not None:
            d += d_v[iv] * (factor * c_u[iu])[:, None]
    return exps, coeffs, d


def _poly_multiply(U, V):
    if U.n_terms == 0 or V.n_terms == 0:
        p = U.n_params if U.n_params is not None else V.n_params
        return PolyHamiltonian.zero(U.n, U.J, U.degree_cap, U.fourier_cap, p)
    du, dv = U._merged_dcoeffs(V, U.dcoeffs, V.dcoeffs)
    exps, coeffs, d = _outer_block(U.exps, U.coeffs, du, V.exps, V.coeffs, dv, 1.0)
    return _collect(U, exps, coeffs, d)


def _collect(proto, exps, coeffs, d):
    """Apply caps with truncation accounting, then canonicalize."""
    n = proto.n
    deg = 2 * exps[:, n:2 * n].sum(axis=1, dtype=np.int64) \
        + exps[:, 2 * n:].sum(axis=1, dtype=np.int64)
    ksz = np.abs(exps[:, :n]).sum(axis=1, dtype=np.int64)
    keep = (deg <= proto.degree_cap) & (ksz <= proto.fourier_cap)
    dropped = int(np.sum(~keep))
    mass = float(np.abs(coeffs[~keep]).sum()) if dropped else 0.0
    out = PolyHamiltonian(proto.n, proto.J, proto.degree_cap, proto.fourier_cap,
                          exps[keep], coeffs[keep],
                          None if d is None else d[keep],
                          TruncationInfo(dropped, mass))
    return out


def poisson_bracket(U, V):
    """Poisson bracket {U, V} = <U_x, V_y> - <U_y, V_x>
    + i sum_j (U_{q_j} V_{qbar_j} - U_{qbar_j} V_{q_j}).

    The convention satisfies d/dt (U o flow of V) = {U, V} o flow of V for
    the vector field of ``vector_field``.  Terms beyond the degree or
    Fourier caps are dropped and counted in the result's truncation info.
    """
    U._check_compatible(V)
    n, J = U.n, U.J
    p = U.n_params if U.n_params is not None else V.n_params
    if U.n_terms == 0 or V.n_terms == 0:
        return PolyHamiltonian.zero(n, J, min(U.degree_cap, V.degree_cap),
                                    min(U.fourier_cap, V.fourier_cap), p)
    du, dv = U._merged_dcoeffs(V, U.dcoeffs, V.dcoeffs)
    cap_d = min(U.degree_cap, V.degree_cap)
    cap_k = min(U.fourier_cap, V.fourier_cap)
    proto = PolyHamiltonian.zero(n, J, cap_d, cap_k, p)
    deg_u, deg_v = U.degrees(), V.degrees()

    acc = proto
    chunks = []
    chunk_rows = 0
    dropped, mass = 0, 0.0

    def take(poly, rows, dec_col, factor_from, conj_sign):
        """Rows of poly differentiated in one channel.

        dec_col: column whose power is lowered (None for x-derivatives).
        factor_from: column supplying the multiplicative factor.
        conj_sign: extra scalar multiplying the factor.
        """
        exps = poly.exps[rows].copy()
        factor = exps[:, factor_from].astype(np.complex128) * conj_sign
        if dec_col is not None:
            exps[:, dec_col] -= 1
        return exps, factor

    def emit(eu, fu, rows_u, ev, fv, rows_v):
        nonlocal dropped, mass, chunks, chunk_rows
        if eu.shape[0] == 0 or ev.shape[0] == 0:
            return
        # prefilter pairs by output degree: deg_u + deg_v - 2 <= cap
        dgu = deg_u[rows_u]
        dgv = deg_v[rows_v]
        ok_u = dgu <= cap_d + 2 - dgv.min()
        ok_v = dgv <= cap_d + 2 - dgu.min()
        eu, fu, rows_u = eu[ok_u], fu[ok_u], rows_u[ok_u]
        ev, fv, rows_v = ev[ok_v], fv[ok_v], rows_v[ok_v]
        if eu.shape[0] == 0 or ev.shape[0] == 0:
            return
        cu = U.coeffs[rows_u] * fu
        cv = V.coeffs[rows_v] * fv
        ddu = None if du is None else du[rows_u] * fu[:, None]
        ddv = None if dv is None else dv[rows_v] * fv[:, None]
        exps, coeffs, d = _outer_block(eu, cu, ddu, ev, cv, ddv, 1.0)
        part = _collect(proto, exps, coeffs, d)
        dropped += part.truncation.dropped_terms
        mass += part.truncation.dropped_mass
        chunks.append(part)
        chunk_rows += part.n_terms

    def flush(force=False):
        nonlocal acc, chunks, chunk_rows
        if chunks and (force or chunk_rows > 300_000):
            for c in chunks:
                acc = acc + c
            chunks = []
            chunk_rows = 0

    for j in range(n):
        # <U_x, V_y>: i k_j(U) times alpha_j(V) with the V power lowered
        ru = np.flatnonzero(U.exps[:, j] != 0)
        rv = np.flatnonzero(V.exps[:, n + j] > 0)
        eu, fu = take(U, ru, None, j, 1j)
        ev, fv = take(V, rv, n + j, n + j, 1.0)
        emit(eu, fu, ru, ev, fv, rv)
        # -<U_y, V_x>
        ru = np.flatnonzero(U.exps[:, n + j] > 0)
        rv = np.flatnonzero(V.exps[:, j] != 0)
        eu, fu = take(U, ru, n + j, n + j, 1.0)
        ev, fv = take(V, rv, None, j, -1j)
        emit(eu, fu, ru, ev, fv, rv)
        flush()
    for j in range(J):
        bq, bg = 2 * n + j, 2 * n + J + j
        # +i U_{q_j} V_{qbar_j}
        ru = np.flatnonzero(U.exps[:, bq] > 0)
        rv = np.flatnonzero(V.exps[:, bg] > 0)
        eu, fu = take(U, ru, bq, bq, 1j)
        ev, fv = take(V, rv, bg, bg, 1.0)
        emit(eu, fu, ru, ev, fv, rv)
        # -i U_{qbar_j} V_{q_j}
        ru = np.flatnonzero(U.exps[:, bg] > 0)
        rv = np.flatnonzero(V.exps[:, bq] > 0)
        eu, fu = take(U, ru, bg, bg, -1j)
        ev, fv = take(V, rv, bq, bq, 1.0)
        emit(eu, fu, ru, ev, fv, rv)
        flush()
    flush(force=True)
    return PolyHamiltonian(acc.n, acc.J, cap_d, cap_k, acc.exps, acc.coeffs,
                           acc.dcoeffs, TruncationInfo(dropped, mass),
                           canonical=True)


# -- Lie transforms ----------------------------------------------------


def lie_transform(V, U, t=1.0, degree_cap=None):
    """exp(t ad_U) V = sum_j t^j/j! ad_U^j(V) with ad_U(V) = {V, U}.

    Requires the generator U to have minimum weighted degree >= 3 so the
    graded series terminates at the degree cap.  The result carries the
    termination index in ``truncation`` bookkeeping via attribute
    ``lie_terms`` on the returned polynomial's truncation tuple is not
    enough, so the index is returned alongside.

    Returns
    -------
    (PolyHamiltonian, int)
        Transformed polynomial and the index of the last nonzero series
        term.
    """
    mind = U.min_degree()
    if mind is not None and mind <= 2:
        raise NonNilpotentGenerator(
            f"generator has minimum weighted degree {mind} <= 2")
    cap = V.degree_cap if degree_cap is None else degree_cap
    if degree_cap is not None and degree_cap != V.degree_cap:
        V = V.with_caps(degree_cap=degree_cap)
    if mind is None or V.n_terms == 0:
        return V, 0
    vmin = V.min_degree()
    acc = V
    term = V
    j = 0
    # ad_U^j(V) has min degree >= vmin + j*(mind - 2)
    while vmin + (j + 1) * (mind - 2) <= cap:
        j += 1
        term = poisson_bracket(term, U) * (t / j)
        if term.n_terms == 0:
            j -= 1
            break
        acc = acc + term
    return acc, j


def lie_series(V, U, t=1.0, tol=1e-15, max_terms=40):
    """exp(t ad_U) V truncated by coefficient smallness.

    Used for generators with weighted-degree <= 2 terms (quadratic-stage
    normalization), where the graded argument does not terminate but the
    coefficients contract.  Raises ConvergenceError if the series tail has
    not fallen below ``tol`` relative to V within ``max_terms`` brackets.
    """
    acc = V
    term = V
    scale = max(V.max_abs_coeff(), 1e-300)
    for j in range(1, max_terms + 1):
        term = poisson_bracket(term, U) * (t / j)
        if term.n_terms == 0 or term.max_abs_coeff() <= tol * scale:
            if term.n_terms:
                acc = acc + term
            return acc, j
        acc = acc + term
    raise ConvergenceError(
        f"Lie series did not contract within {max_terms} brackets",
        residual=term.max_abs_coeff() / scale)


# -- random instances (testing, norm ensembles) ------------------------


def random_hamiltonian(rng, n, J, degree_cap, fourier_cap, n_terms,
                       max_k=None, coeff_scale=1.0, real=True,
                       n_params=None):
    """Random polynomial with the given caps, drawn term-by-term.

    With ``real=True`` the reality condition c(-k, a, g, b) = conj(c) is
    enforced by symmetrizing, so the result is real-valued on real slices.
    """
    if max_k is None:
        max_k = min(fourier_cap, 3)
    rows, cs, ds = [], [], []
    width = 2 * n + 2 * J
    for _ in range(n_terms):
        while True:
            k = rng.integers(-max_k, max_k + 1, size=n)
            if np.abs(k).sum() <= fourier_cap:
                break
        while True:
            alpha = rng.integers(0, 2, size=n)
            beta = rng.integers(0, 2, size=J)
            gamma = rng.integers(0, 2, size=J)
            deg = 2 * alpha.sum() + beta.sum() + gamma.sum()
            if deg <= degree_cap:
                break
        row = np.zeros(width, dtype=np.int16)
        row[:n], row[n:2 * n] = k, alpha
        row[2 * n:2 * n + J], row[2 * n + J:] = beta, gamma
        rows.append(row)
        cs.append(coeff_scale * complex(rng.normal(), rng.normal()))
        if n_params is not None:
            ds.append(coeff_scale * (rng.normal(size=n_params)
                                     + 1j * rng.normal(size=n_params)))
    d = np.vstack(ds) if ds else None
    poly = PolyHamiltonian(n, J, degree_cap, fourier_cap, np.vstack(rows),
                           np.array(cs), d)
    if real:
        poly = 0.5 * (poly + poly.conjugate_reflected())
    return poly


def random_phase_point(rng, n, J, scale=0.1, real=True):
    x = rng.uniform(0.0, 2 * np.pi, size=n)
    y = scale * rng.normal(size=n)
    q = scale * (rng.normal(size=J) + 1j * rng.normal(size=J))
    if real:
        return PhasePoint.make(x, y, q)
    xc = x + 1j * scale * rng.normal(size=n)
    qbar = scale * (rng.normal(size=J) + 1j * rng.normal(size=J))
    return PhasePoint.make(xc, y + 0j, q, qbar)
