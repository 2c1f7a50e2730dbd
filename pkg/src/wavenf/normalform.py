"""Homological-equation solver and the two normalization pipelines.

The quadratic stage removes every non-integrable term of weighted degree
<= 2 from the lifted wave Hamiltonian by repeated small generating flows
(sweeps), reading off corrected tangential/normal frequencies.  The
partial stage then walks the weighted degrees d = 3 .. M+2, at each degree
classifying terms into the integrable bin Z, the three-or-more-high-mode
bin Q, or the homological equation, whose aggregated solution is applied
as a Lie transform of the full working Hamiltonian.

Time convention of the stored chain: flowing each generator for its
stored time, in list order, maps original coordinates to normal-form
coordinates ("forward"); the reversed order with negated times is the
embedding direction ("inverse").
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CapError, ConvergenceError, DimensionError, FlowError,
                     Order2Resonance, ResonantTerm)
from .norms import norm_minus1
from .polynomials import (PolyHamiltonian, evaluate_batch, lie_series,
                          lie_transform, poisson_bracket)


# -- gates --------------------------------------------------------------


def cweight_prod_quadratic(l_tilde):
    """C(N, lt) = prod_i (1 + i^2 lt_i^2): a summable low-mode weight."""
    l_tilde = np.atleast_2d(np.asarray(l_tilde, dtype=float))
    i = np.arange(1, l_tilde.shape[1] + 1, dtype=float)
    return np.prod(1.0 + (i * l_tilde) ** 2, axis=1)


C_WEIGHTS = {"prod_quadratic": cweight_prod_quadratic}


@dataclass(frozen=True)
class DivisorGate:
    """Small-divisor thresholds for both normalization stages.

    The quadratic stage uses |<k, omega> + <l, Omega>| >= eta/(|k|+1)^tau
    for all |l| <= 2; the partial stage uses the threshold
    eta_tilde / (4^(3M) (|k|+1)^tau C(N, lt)).
    """

    eta: float
    eta_tilde: float
    tau: float
    M: int
    N: int
    cweight: str = "prod_quadratic"

    def __post_init__(self):
        if not (0 < self.eta_tilde < 1):
            raise ValueError("eta_tilde must lie in (0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.M < 0 or self.N < 1:
            raise ValueError("need M >= 0 and N >= 1")
        if self.cweight not in C_WEIGHTS:
            raise ValueError(f"unknown C-weight {self.cweight!r}")

    def validate_for(self, n):
        if self.tau <= 2 * n + 5:
            raise ValueError(f"tau must exceed 2n+5 = {2 * n + 5}")

    def cweight_value(self, l_tilde):
        return C_WEIGHTS[self.cweight](l_tilde)

    def order2_threshold(self, k_size):
        k_size = np.asarray(k_size, dtype=float)
        return self.eta / (k_size + 1.0) ** self.tau

    def threshold(self, k_size, l_tilde):
        k_size = np.asarray(k_size, dtype=float)
        cw = self.cweight_value(l_tilde)
        return self.eta_tilde / (4.0 ** (3 * self.M)
                                 * (k_size + 1.0) ** self.tau * cw)


# -- transform chain ----------------------------------------------------


@dataclass(frozen=True)
class ChainEntry:
    generator: PolyHamiltonian
    time: float
    stage: str
    label: str

    @property
    def low_order(self):
        """Whether the generator carries weighted-degree <= 2 terms
        (quadratic-stage entries only)."""
        mind = self.generator.min_degree()
        return mind is not None and mind <= 2


@dataclass
class TransformChain:
    """Ordered generating Hamiltonians representing the composed
    symplectic coordinate change."""

    entries: list = field(default_factory=list)

    def append(self, generator, time, stage, label):
        entry = ChainEntry(generator, float(time), stage, label)
        if stage != "order2" and entry.low_order:
            raise DimensionError(
                "partial-stage generators must have minimum degree >= 3")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def manifest(self):
        return [{"index": i, "stage": e.stage, "label": e.label,
                 "time": e.time, "low_order": e.low_order,
                 "terms": e.generator.n_terms}
                for i, e in enumerate(self.entries)]


# -- divisors ------------------------------------------------------------


def divisor(k, l_tilde, l_hat, freq):
    """The signed frequency combination <k, omega> + <lt, Omega_low> +
    <lhat, Omega_high>, with corrected frequencies where available and
    analytic extension beyond the truncation.

    l_hat is a sparse list of (mode, coefficient) pairs with 1-based
    normal-mode indices (modes above the low/high split, possibly beyond
    the truncation).
    """
    omega = freq.omega_eff()
    val = float(np.dot(np.asarray(k, dtype=float), omega[: len(np.atleast_1d(k))])) \
        if len(np.atleast_1d(k)) else 0.0
    l_tilde = np.asarray(l_tilde, dtype=float)
    if l_tilde.size:
        Omega = freq.Omega_eff()
        val += float(np.dot(l_tilde, Omega[: l_tilde.size]))
    for mode, c in l_hat:
        val += c * freq.Omega_at(int(mode))
    return val


def _frequency_tables(H, freq):
    """Read corrected frequencies (and their parameter derivatives when
    tracked) off the coefficients of y_j and q_j qbar_j."""
    n, J = H.n, H.J
    zn, zJ = np.zeros(n, dtype=int), np.zeros(J, dtype=int)
    omega = np.zeros(n)
    Omega = np.zeros(J)
    track = H.dcoeffs is not None
    domega = np.zeros((n, H.n_params)) if track else None
    dOmega = np.zeros((J, H.n_params)) if track else None
    for j in range(n):
        a = zn.copy(); a[j] = 1
        omega[j] = H.coefficient(zn, a, zJ, zJ).real
        if track:
            domega[j] = H.dcoefficient(zn, a, zJ, zJ).real
    for j in range(J):
        b = zJ.copy(); b[j] = 1
        Omega[j] = H.coefficient(zn, zn, b, b).real
        if track:
            dOmega[j] = H.dcoefficient(zn, zn, b, b).real
    return omega, Omega, domega, dOmega


def homological_solve(k, alpha, beta, gamma, coeff, freq, gate,
                      stage="partial", dcoeff=None, domega=None, dOmega=None):
    """Generator coefficient cancelling one non-integrable monomial:
    coeff / (i * divisor) with the stage's small-divisor gate.

    Raises ResonantTerm (Order2Resonance at the quadratic stage) when the
    divisor falls below the gate threshold, and ValueError for integrable
    input (k = 0 and beta = gamma), which has no divisor.
    """
    k = np.asarray(k, dtype=int)
    l = np.asarray(beta, dtype=int) - np.asarray(gamma, dtype=int)
    if not k.any() and not l.any():
        raise ValueError("integrable term has no homological solution")
    lhat = [(j + 1, int(c)) for j, c in enumerate(l) if c and j + 1 > gate.N]
    lt = l[:gate.N]
    d = divisor(k, lt, lhat, freq)
    ks = float(np.abs(k).sum())
    if stage == "order2":
        thr = float(gate.order2_threshold(ks))
        err = Order2Resonance
    else:
        thr = float(gate.threshold(ks, lt[None, :]))
        err = ResonantTerm
    if abs(d) < thr:
        raise err("small divisor below gate threshold", k=k, l_tilde=lt,
                  l_hat=lhat, divisor=d, threshold=thr)
    g = coeff / (1j * d)
    if dcoeff is None:
        return g, None
    dd = np.zeros(len(dcoeff))
    if domega is not None and k.any():
        dd = dd + k.astype(float) @ domega
    if dOmega is not None and l.any():
        dd = dd + l.astype(float) @ dOmega
    dg = dcoeff / (1j * d) - (g / d) * dd
    return g, dg


def _solve_block(bad, omega, Omega, domega, dOmega, gate, stage):
    """Vectorized homological solve of a block of non-integrable terms.

    Returns the generator polynomial; raises on the first gated divisor.
    """
    k = bad.k_block().astype(float)
    l = (bad.beta_block() - bad.gamma_block()).astype(float)
    div = k @ omega + l @ Omega
    ks = np.abs(k).sum(axis=1)
    if stage == "order2":
        thr = gate.order2_threshold(ks)
        err = Order2Resonance
    else:
        thr = gate.threshold(ks, l[:, :gate.N])
        err = ResonantTerm
    hit = np.abs(div) < thr
    if np.any(hit):
        i = int(np.argmax(hit))
        lhat = [(j + 1, int(c)) for j, c in enumerate(l[i]) if c and j + 1 > gate.N]
        raise err("small divisor below gate threshold",
                  k=bad.k_block()[i].astype(int),
                  l_tilde=l[i, :gate.N].astype(int), l_hat=lhat,
                  divisor=float(div[i]), threshold=float(thr[i]))
    coeffs = bad.coeffs / (1j * div)
    d = None
    if bad.dcoeffs is not None:
        ddiv = np.zeros((bad.n_terms, bad.n_params))
        if domega is not None:
            ddiv += k @ domega
        if dOmega is not None:
            ddiv += l @ dOmega
        d = bad.dcoeffs / (1j * div)[:, None] - (coeffs / div)[:, None] * ddiv
    return PolyHamiltonian(bad.n, bad.J, bad.degree_cap, bad.fourier_cap,
                           bad.exps.copy(), coeffs, d)


# -- results -------------------------------------------------------------


@dataclass
class NormalFormResult:
    """Decomposition H o (chain flows) = N + Z + P + Q (+ remainder).

    n_part: integrable quadratic part (constant, y_j, q_j qbar_j terms).
    z_part: integrable terms of degree 4 .. M+2 (k = 0, beta = gamma,
        at most one high-mode action factor).
    p_part: terms of degree >= M+3 with at most two high-mode factors.
    q_part: terms with three or more high-mode factors.
    remainder: the quadratic-stage perturbation (degree >= 3) before the
        partial stage, or sub-tolerance crumbs after it.
    """

    stage: str
    n_part: PolyHamiltonian
    z_part: PolyHamiltonian
    p_part: PolyHamiltonian
    q_part: PolyHamiltonian
    remainder: PolyHamiltonian
    chain: TransformChain
    freq: object
    M: int | None = None
    N: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def assemble(self):
        return (self.n_part + self.z_part + self.p_part + self.q_part
                + self.remainder)

    def classification_errors(self, M=None, N=None):
        """Term-by-term violations of the class-defining index sets."""
        M = self.M if M is None else M
        N = self.N if N is None else N
        errs = []
        for poly, cls in ((self.n_part, "N"), (self.z_part, "Z"),
                          (self.p_part, "P"), (self.q_part, "Q")):
            n = poly.n
            for i in range(poly.n_terms):
                row = poly.exps[i]
                k = row[:n]
                deg = int(2 * row[n:2 * n].sum() + row[2 * n:].sum())
                beta = row[2 * n:2 * n + poly.J]
                gamma = row[2 * n + poly.J:]
                high = int(beta[N:].sum() + gamma[N:].sum())
                if cls == "N":
                    ok = deg <= 2 and not k.any() and (beta == gamma).all()
                elif cls == "Z":
                    ok = (not k.any() and (beta == gamma).all()
                          and 4 <= deg <= M + 2 and high <= 2)
                elif cls == "P":
                    ok = deg >= M + 3 and high <= 2
                else:
                    ok = high >= 3
                if not ok:
                    errs.append((cls, i, deg, high))
        return errs


# -- quadratic-stage pipeline -------------------------------------------


def order2_step(H, freq, gate, max_sweeps=8, tol=1e-12, series_tol=1e-16):
    """Remove all non-integrable terms of weighted degree <= 2 by repeated
    generating flows, reading corrected frequencies off the result.

    Raises Order2Resonance when a divisor is gated (the parameter point is
    rejected) and ConvergenceError when the degree <= 2 residual does not
    fall below ``tol`` within ``max_sweeps`` sweeps.
    """
    gate.validate_for(H.n)
    chain = TransformChain()
    current = H
    n, J = H.n, H.J
    sweep_residuals = []
    for sweep in range(1, max_sweeps + 1):
        omega_c, Omega_c, domega, dOmega = _frequency_tables(current, freq)
        low = current.degree_slice(0, 2)
        kn = low.fourier_sizes() > 0
        asym = np.any(low.beta_block() != low.gamma_block(), axis=1)
        bad = low.filter(kn | asym)
        resid = bad.max_abs_coeff()
        sweep_residuals.append(resid)
        if resid <= tol:
            break
        F = _solve_block(bad, omega_c, Omega_c, domega, dOmega, gate, "order2")
        current, _ = lie_series(current, F, 1.0, tol=series_tol)
        chain.append(F, -1.0, "order2", f"sweep{sweep}")
    else:
        raise ConvergenceError(
            f"degree <= 2 residual {sweep_residuals[-1]:.3e} above {tol:.1e} "
            f"after {max_sweeps} sweeps", residual=sweep_residuals[-1])

    omega_c, Omega_c, domega, dOmega = _frequency_tables(current, freq)
    deviations = {
        "omega_shift_sup": float(np.max(np.abs(omega_c - freq.omega))),
        "Omega_shift_norm_minus1": norm_minus1(Omega_c - freq.Omega),
    }
    if domega is not None:
        base = np.zeros_like(domega)
        for j in range(n):
            base[j, j] = 1.0 / (2.0 * freq.omega[j])
        deviations["omega_shift_deriv_sup"] = float(
            np.max(np.abs(domega - base), initial=0.0))
        baseO = np.zeros_like(dOmega)
        for j in range(J):
            baseO[j, n + j] = 1.0 / (2.0 * freq.Omega[j])
        deviations["Omega_shift_deriv_norm_minus1"] = float(
            np.max([norm_minus1(col) for col in (dOmega - baseO).T] or [0.0]))
    freq_c = freq.with_corrections(omega_c, Omega_c, deviations)

    low = current.degree_slice(0, 2)
    kn = low.fourier_sizes() > 0
    asym = np.any(low.beta_block() != low.gamma_block(), axis=1)
    n_rows = ~(kn | asym)
    n_part = low.filter(n_rows)
    deg = current.degrees()
    low_bad_global = np.zeros(current.n_terms, dtype=bool)
    lows = np.flatnonzero(deg <= 2)
    low_bad_global[lows[kn | asym]] = True
    remainder = current.filter((deg >= 3) | low_bad_global)

    empty = PolyHamiltonian.zero(n, J, H.degree_cap, H.fourier_cap)
    return NormalFormResult(
        stage="order2", n_part=n_part, z_part=empty, p_part=empty,
        q_part=empty, remainder=remainder, chain=chain, freq=freq_c,
        diagnostics={"sweep_residuals": sweep_residuals,
                     "final_low_residual": float(sweep_residuals[-1]),
                     "deviations": deviations})


# -- partial normal form -------------------------------------------------


def _high_counts(poly, N):
    return (poly.beta_block()[:, N:].sum(axis=1, dtype=np.int64)
            + poly.gamma_block()[:, N:].sum(axis=1, dtype=np.int64))


def partial_normal_form(res, M, N, gate, rho=None):
    """Degree-by-degree partial normalization of a quadratic-stage result.

    For each weighted degree d = 3 .. M+2: terms with three or more
    high-mode factors move to Q untouched, integrable terms move to Z, and
    the rest are solved homologically; the aggregated degree-d generator
    acts on the full working Hamiltonian by a terminating Lie transform.
    After the last stage, remaining terms of degree >= M+3 split into P
    (at most two high-mode factors) and Q.
    """
    if res.stage != "order2":
        raise DimensionError("partial_normal_form expects an order-2 result")
    H0 = res.n_part + res.remainder
    n, J = H0.n, H0.J
    if not (1 <= M):
        raise ValueError("M must be >= 1")
    if not (0 < N < J):
        raise DimensionError("need low/high split 0 < N < J")
    if M + 2 > H0.degree_cap:
        raise CapError(f"M+2 = {M + 2} exceeds degree cap {H0.degree_cap}")
    gate.validate_for(n)
    freq = res.freq
    omega_c = freq.omega_eff()
    Omega_c = freq.Omega_eff()
    track = H0.dcoeffs is not None
    domega = dOmega = None
    if track:
        _, _, domega, dOmega = _frequency_tables(H0, freq)

    chain = TransformChain()
    chain.entries.extend(res.chain.entries)
    empty = PolyHamiltonian.zero(n, J, H0.degree_cap, H0.fourier_cap)
    z_acc, q_acc = empty, empty
    H = H0
    residual_rows = []
    for d in range(3, M + 3):
        deg = H.degrees()
        stage_rows = deg == d
        if not np.any(stage_rows):
            continue
        high = _high_counts(H, N)
        kzero = H.fourier_sizes() == 0
        sym = np.all(H.beta_block() == H.gamma_block(), axis=1)
        q_rows = stage_rows & (high >= 3)
        z_rows = stage_rows & ~q_rows & kzero & sym
        solve_rows = stage_rows & ~q_rows & ~z_rows
        q_acc = q_acc + H.filter(q_rows)
        z_acc = z_acc + H.filter(z_rows)
        H = H.filter(~(q_rows | z_rows))
        bad = H.filter(H.degrees() == d)
        bad = bad.filter(np.abs(bad.coeffs) > 0)
        if bad.n_terms == 0:
            continue
        F = _solve_block(bad, omega_c, Omega_c, domega, dOmega, gate, "partial")
        H, _ = lie_transform(H, F, 1.0)
        chain.append(F, -1.0, "partial", f"degree{d}")
        # exact-cancellation diagnostics on the solved monomials
        pre = np.abs(bad.coeffs)
        for i in range(bad.n_terms):
            row = bad.exps[i]
            post = abs(H.coefficient(row[:n], row[n:2 * n],
                                     row[2 * n:2 * n + J], row[2 * n + J:]))
            residual_rows.append((d, _monomial_str(row, n, J),
                                  post, float(pre[i])))

    deg = H.degrees()
    high = _high_counts(H, N)
    tail_rows = deg >= M + 3
    p_part = H.filter(tail_rows & (high <= 2))
    q_acc = q_acc + H.filter(tail_rows & (high >= 3))
    lows = deg <= 2
    kzero = H.fourier_sizes() == 0
    sym = np.all(H.beta_block() == H.gamma_block(), axis=1)
    n_part = H.filter(lows & kzero & sym)
    crumbs = H.filter(~tail_rows & ~(lows & kzero & sym))

    max_ratio = max((r[2] / r[3] for r in residual_rows if r[3] > 0),
                    default=0.0)
    return NormalFormResult(
        stage="partial", n_part=n_part, z_part=z_acc, p_part=p_part,
        q_part=q_acc, remainder=crumbs, chain=chain, freq=freq, M=M, N=N,
        diagnostics={**res.diagnostics,
                     "cancellation_rows": residual_rows,
                     "max_cancellation_ratio": max_ratio,
                     "crumb_mass": crumbs.max_abs_coeff(),
                     "rho": rho})


def _monomial_str(row, n, J):
    k = ",".join(str(int(v)) for v in row[:n])
    a = ",".join(str(int(v)) for v in row[n:2 * n])
    b = ",".join(f"{j+1}:{int(v)}" for j, v in enumerate(row[2*n:2*n+J]) if v)
    g = ",".join(f"{j+1}:{int(v)}" for j, v in enumerate(row[2*n+J:]) if v)
    return f"k[{k}]a[{a}]b[{b}]g[{g}]"


# -- cutoff selection ----------------------------------------------------


def select_cutoff(delta, M, p):
    """Smallest integer N with N + 1 >= delta^(-(M+1)/(p-1))."""
    if not (0 < delta < 1):
        raise ValueError("delta must lie in (0, 1)")
    if p <= 1:
        raise ValueError("p must exceed 1")
    target = delta ** (-(M + 1) / (p - 1))
    return max(0, math.ceil(target - 1e-12) - 1)


# -- chain application ---------------------------------------------------


class _GeneratorField:
    """Batched evaluator of a generator's Hamiltonian vector field on the
    real slice (x, y, q, conj q)."""

    def __init__(self, gen):
        self.n, self.J = gen.n, gen.J
        self.dx = [gen.derivative("y", j) for j in range(gen.n)]
        self.dy = [gen.derivative("x", j) for j in range(gen.n)]
        self.dq = [gen.derivative("qbar", j) for j in range(gen.J)]

    def __call__(self, x, y, q):
        qbar = np.conj(q)
        n, J = self.n, self.J
        B = x.shape[0]
        vx = np.zeros((B, n))
        vy = np.zeros((B, n))
        vq = np.zeros((B, J), dtype=np.complex128)
        for j in range(n):
            vx[:, j] = evaluate_batch(self.dx[j], x, y, q, qbar).real
            vy[:, j] = -evaluate_batch(self.dy[j], x, y, q, qbar).real
        for j in range(J):
            vq[:, j] = 1j * evaluate_batch(self.dq[j], x, y, q, qbar)
        return vx, vy, vq


def _flow_generator(gen, x, y, q, t, tol=1e-12, max_doublings=10):
    """Time-t flow of a generator on a batch of real-slice points, by
    classical RK4 with step-doubling until two refinements agree within
    ``tol`` (sup over the batch)."""
    fieldev = _GeneratorField(gen)

    def run(steps):
        h = t / steps
        cx, cy, cq = x.copy(), y.copy(), q.copy()
        for _ in range(steps):
            k1 = fieldev(cx, cy, cq)
            k2 = fieldev(cx + 0.5 * h * k1[0], cy + 0.5 * h * k1[1],
                         cq + 0.5 * h * k1[2])
            k3 = fieldev(cx + 0.5 * h * k2[0], cy + 0.5 * h * k2[1],
                         cq + 0.5 * h * k2[2])
            k4 = fieldev(cx + h * k3[0], cy + h * k3[1], cq + h * k3[2])
            cx = cx + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            cy = cy + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            cq = cq + (h / 6) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        return cx, cy, cq

    steps = 8
    prev = run(steps)
    for _ in range(max_doublings):
        steps *= 2
        cur = run(steps)
        err = max(np.max(np.abs(cur[0] - prev[0]), initial=0.0),
                  np.max(np.abs(cur[1] - prev[1]), initial=0.0),
                  np.max(np.abs(cur[2] - prev[2]), initial=0.0))
        if err < tol:
            return cur
        prev = cur
    raise FlowError(f"generator flow did not converge to {tol:.1e} "
                    f"(last error {err:.3e})")


def apply_chain(chain, x, y, q, direction="forward", tol=1e-12):
    """Flow a batch of real-slice points through the transform chain.

    direction="forward" flows each generator in list order for its stored
    time (original -> normal-form coordinates); "inverse" uses reverse
    order and negated times (the embedding direction).  Inputs are arrays
    of shape (B, n), (B, n), (B, J); returns arrays of the same shapes.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=np.complex128))
    if direction == "forward":
        seq = [(e.generator, e.time) for e in chain.entries]
    elif direction == "inverse":
        seq = [(e.generator, -e.time) for e in reversed(chain.entries)]
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    for gen, t in seq:
        if gen.n_terms == 0 or t == 0.0:
            continue
        x, y, q = _flow_generator(gen, x, y, q, t, tol=tol)
    return x, y, q


def apply_chain_point(chain, point, direction="forward", tol=1e-12):
    """Single-point convenience wrapper around ``apply_chain``."""
    from .polynomials import PhasePoint

    x, y, q = apply_chain(chain, point.x.real[None, :], point.y.real[None, :],
                          point.q[None, :], direction=direction, tol=tol)
    return PhasePoint.make(x[0], y[0], q[0])
