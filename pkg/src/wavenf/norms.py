"""Norm hierarchy for Hamiltonians and their vector fields at finite
truncation.

The building blocks are, in order: a weighted Fourier norm on angle
coefficient functions (including carried parameter derivatives), an
action-weighted extension, the modulus (coefficient functions replaced by
their norms), operator norms of the resulting non-negative multilinear
maps, and the combined vector-field norm

    |||X_W||| = |||W_y||| + r^-2 |||W_x||| + r^-1 |||W_z|||^T

summed over z-homogeneous layers.

Operator norms of multilinear maps are not computed exactly; each is
reported as a pair (upper, probe): a certified upper bound obtained by a
weighted matricization of the non-negative coefficient tensor, and a valid
lower bound obtained by evaluating the map on explicit candidate vectors.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .polynomials import PolyHamiltonian, evaluate_batch


# -- sequence norms ----------------------------------------------------


def mode_weights(J, p):
    return np.arange(1, J + 1, dtype=float) ** p


def seq_norm(vec, p):
    """ell^2_p norm of a single block: sqrt(sum |v_j|^2 j^(2p))."""
    vec = np.asarray(vec)
    j = np.arange(1, len(vec) + 1, dtype=float)
    return float(np.sqrt(np.sum(np.abs(vec) ** 2 * j ** (2 * p))))


def z_norm(zvec, p):
    """Norm of a combined z = (q, qbar) vector: ||q||_p + ||qbar||_p."""
    zvec = np.asarray(zvec)
    J = len(zvec) // 2
    return seq_norm(zvec[:J], p) + seq_norm(zvec[J:], p)


def mixed_input_norm(z_list, p):
    """The averaged mixed norm: one slot in the p-norm, the rest in the
    1-norm, averaged over which slot carries p."""
    h = len(z_list)
    if h == 0:
        return 1.0
    n1 = [z_norm(z, 1) for z in z_list]
    np_ = [z_norm(z, p) for z in z_list]
    total = 0.0
    for i in range(h):
        prod = np_[i]
        for j in range(h):
            if j != i:
                prod *= n1[j]
        total += prod
    return total / h


def norm_minus1(w):
    """sup_i |w_i| * i over a finite vector (1-based index weight)."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        return 0.0
    return float(np.max(np.abs(w) * np.arange(1, len(w) + 1)))


# -- weighted Fourier / action norms -----------------------------------


def _term_weights(poly, s, r):
    """Per-term weight exp(|k| s) * r^(2|alpha|)."""
    ksz = poly.fourier_sizes().astype(float)
    asz = poly.alpha_block().sum(axis=1, dtype=np.int64).astype(float)
    return np.exp(ksz * s) * r ** (2.0 * asz)


def _grouped_def21(poly, s, r, group_block):
    """Sum over terms of (|c| + sup-direction |dc|) * exp(|k|s) * r^(2|a|),
    grouped by the rows of ``group_block``; the direction sup is taken
    within each (group, alpha) cell.

    Returns dict: group-row bytes -> value.
    """
    if poly.n_terms == 0:
        return {}
    w = _term_weights(poly, s, r)
    cells = {}
    alpha = poly.alpha_block()
    for i in range(poly.n_terms):
        key = (group_block[i].tobytes(), alpha[i].tobytes())
        base, dacc = cells.get(key, (0.0, None))
        base += abs(poly.coeffs[i]) * w[i]
        if poly.dcoeffs is not None:
            d = np.abs(poly.dcoeffs[i]) * w[i]
            dacc = d if dacc is None else dacc + d
        cells[key] = (base, dacc)
    out = {}
    for (gkey, _akey), (base, dacc) in cells.items():
        val = base + (float(np.max(dacc)) if dacc is not None else 0.0)
        out[gkey] = out.get(gkey, 0.0) + val
    return out


def angle_norm(W, s):
    """Weighted Fourier norm of an x-only coefficient function: the sum of
    (|c_k| + sup-direction |dc_k|) exp(|k| s)."""
    if W.n_terms and (np.any(W.alpha_block() != 0) or np.any(W.exps[:, 2 * W.n:] != 0)):
        raise DimensionError("angle_norm expects a polynomial in x only")
    vals = _grouped_def21(W, s, 1.0, np.zeros((W.n_terms, 0), dtype=np.int16))
    return sum(vals.values())


def action_norm(W, s, r):
    """Action-weighted norm sum_alpha |||W^alpha||| r^(2|alpha|) of a
    z-free polynomial.

    The symmetrized coefficient tensors are entrywise non-negative after
    the Fourier norms, so each multilinear operator norm equals the value
    at the all-ones vector, making the sum exact.
    """
    if W.n_terms and np.any(W.exps[:, 2 * W.n:] != 0):
        raise DimensionError("action_norm expects a z-free polynomial")
    vals = _grouped_def21(W, s, r, np.zeros((W.n_terms, 0), dtype=np.int16))
    return sum(vals.values())


def modulus(W, s, r):
    """Replace each z-coefficient function by its action-weighted norm.

    Returns a polynomial in z alone with non-negative real coefficients.
    """
    n, J = W.n, W.J
    zblock = W.exps[:, 2 * n:]
    vals = _grouped_def21(W, s, r, zblock)
    if not vals:
        return PolyHamiltonian.zero(n, J, W.degree_cap, W.fourier_cap)
    width = 2 * n + 2 * J
    rows, cs = [], []
    for key, v in sorted(vals.items()):
        row = np.zeros(width, dtype=np.int16)
        row[2 * n:] = np.frombuffer(key, dtype=np.int16)
        rows.append(row)
        cs.append(v)
    return PolyHamiltonian(n, J, W.degree_cap, W.fourier_cap,
                           np.vstack(rows), np.array(cs, dtype=np.complex128))


# -- modulus gradient tensor -------------------------------------------


def _gradient_entries(mod, J):
    """Entries of the modulus gradient tensor.

    Yields (out_idx, input_multiset, value) where indices run over the
    combined z space: 0..J-1 the q block, J..2J-1 the qbar block, and the
    multiset is a sorted tuple of input indices (length h - 1).
    """
    n = mod.n
    for i in range(mod.n_terms):
        zrow = mod.exps[i, 2 * n:]
        v = float(mod.coeffs[i].real)
        active = np.flatnonzero(zrow)
        for c0 in active:
            power = int(zrow[c0])
            rest = []
            for c in active:
                cnt = int(zrow[c]) - (1 if c == c0 else 0)
                rest.extend([int(c)] * cnt)
            yield int(c0), tuple(sorted(rest)), power * v


def _idx_weight(idx, J):
    return float(idx % J + 1)


def _block_spectral_upper(A, J, out_pow, in_pow):
    """max over input blocks of the summed spectral norms of the weighted
    block matrices; a certified bound for the block-sum z norms."""
    w = np.arange(1, J + 1, dtype=float)
    scale_out = np.concatenate([w, w]) ** out_pow
    scale_in = np.concatenate([w, w]) ** in_pow
    At = A * scale_out[:, None] / scale_in[None, :]
    best = 0.0
    for bi in (slice(0, J), slice(J, 2 * J)):
        tot = 0.0
        for bo in (slice(0, J), slice(J, 2 * J)):
            blk = At[bo, bi]
            if np.any(blk):
                tot += float(np.linalg.norm(blk, 2))
        best = max(best, tot)
    return best


def symmetrized_gradient_apply(entries, h, z_list, J):
    """Evaluate the symmetrized gradient tensor on h-1 input vectors.

    entries: iterable of (out_idx, multiset, value); z_list: list of h-1
    combined z vectors (length 2J).  Returns the output vector (2J,).
    Symmetrization averages over assignments of the inputs to the
    multiset's slots (a small permanent).
    """
    out = np.zeros(2 * J, dtype=complex)
    fact = math.factorial(max(h - 1, 0))
    for out_idx, multiset, v in entries:
        if len(multiset) == 0:
            out[out_idx] += v
            continue
        acc = 0.0 + 0j
        for perm in itertools.permutations(range(len(multiset))):
            prod = 1.0 + 0j
            for slot, which in enumerate(perm):
                prod *= z_list[slot][multiset[which]]
            acc += prod
        out[out_idx] += v * acc / fact
    return out


def _probe_candidates(entries, J, rng_seed=1234):
    """Deterministic non-negative candidate input vectors for probing."""
    active_in = sorted({i for _, ms, _ in entries for i in ms})
    cands = []
    for idx in active_in:
        e = np.zeros(2 * J)
        e[idx] = 1.0
        cands.append(e)
    support_seen = set()
    for _, ms, _ in entries:
        key = tuple(sorted(set(ms)))
        if not key or key in support_seen:
            continue
        support_seen.add(key)
        v = np.zeros(2 * J)
        for i in key:
            v[i] = 1.0 / _idx_weight(i, J)
        cands.append(v)
    if active_in:
        u = np.zeros(2 * J)
        for i in active_in:
            u[i] = 1.0 / _idx_weight(i, J)
        cands.append(u)
        rng = np.random.default_rng(rng_seed)
        for _ in range(4):
            v = np.zeros(2 * J)
            v[active_in] = rng.random(len(active_in))
            cands.append(v)
    return cands


def tame_z_norm(W_h, p, s, r):
    """Operator norm pair for the z-gradient of a z-homogeneous layer.

    Returns (upper, probe): a certified upper bound for the ratio
    ||modulus-gradient(z^(1),..,z^(h-1))||_{p+1} / ||(z^{h-1})||_{p,1}
    over nonzero inputs, and the best value found on explicit candidates.
    For h = 0 the pair is (0, 0) by convention.
    """
    J = W_h.J
    hs = np.unique(W_h.z_degrees())
    if W_h.n_terms == 0:
        return 0.0, 0.0
    if len(hs) != 1:
        raise DimensionError("tame_z_norm expects a z-homogeneous polynomial")
    h = int(hs[0])
    if h == 0:
        return 0.0, 0.0
    mod = modulus(W_h, s, r)
    entries = list(_gradient_entries(mod, J))
    if not entries:
        return 0.0, 0.0
    if h == 1:
        vec = np.zeros(2 * J)
        for out_idx, _, v in entries:
            vec[out_idx] += v
        val = z_norm(vec, p + 1)
        return val, val
    A = np.zeros((2 * J, 2 * J))
    for out_idx, ms, v in entries:
        counts = {}
        for i in ms:
            counts[i] = counts.get(i, 0) + 1
        for in_idx, cnt in counts.items():
            rest_w = 1.0
            for i in ms:
                rest_w /= _idx_weight(i, J)
            rest_w *= _idx_weight(in_idx, J)
            A[out_idx, in_idx] += v * (cnt / (h - 1)) * rest_w
    upper = _block_spectral_upper(A, J, p + 1, p)
    probe = 0.0
    for z in _probe_candidates(entries, J):
        nz = z_norm(z, 1)
        if nz == 0:
            continue
        out = symmetrized_gradient_apply(entries, h, [z] * (h - 1), J)
        den = z_norm(z, p) * z_norm(z, 1) ** (h - 2)
        if den > 0:
            probe = max(probe, z_norm(np.abs(out), p + 1) / den)
    return upper, min(probe, upper)


def one_z_norm(W_h, s, r):
    """The 1-norm variant of the z-gradient operator norm pair."""
    J = W_h.J
    if W_h.n_terms == 0:
        return 0.0, 0.0
    hs = np.unique(W_h.z_degrees())
    if len(hs) != 1:
        raise DimensionError("one_z_norm expects a z-homogeneous polynomial")
    h = int(hs[0])
    if h == 0:
        return 0.0, 0.0
    mod = modulus(W_h, s, r)
    entries = list(_gradient_entries(mod, J))
    if not entries:
        return 0.0, 0.0
    if h == 1:
        vec = np.zeros(2 * J)
        for out_idx, _, v in entries:
            vec[out_idx] += v
        val = z_norm(vec, 1)
        return val, val
    A = np.zeros((2 * J, 2 * J))
    for out_idx, ms, v in entries:
        counts = {}
        for i in ms:
            counts[i] = counts.get(i, 0) + 1
        for in_idx, cnt in counts.items():
            rest_w = _idx_weight(in_idx, J)
            for i in ms:
                rest_w /= _idx_weight(i, J)
            A[out_idx, in_idx] += v * (cnt / (h - 1)) * rest_w
    upper = _block_spectral_upper(A, J, 1, 1)
    probe = 0.0
    for z in _probe_candidates(entries, J):
        n1 = z_norm(z, 1)
        if n1 == 0:
            continue
        out = symmetrized_gradient_apply(entries, h, [z] * (h - 1), J)
        probe = max(probe, z_norm(np.abs(out), 1) / n1 ** (h - 1))
    return upper, min(probe, upper)


def xy_operator_norm(W_h, which, s, r):
    """Operator norm pair for the x- or y-gradient of a z-homogeneous
    layer: sup-norm over components against all-1-norm inputs."""
    if which not in ("x", "y"):
        raise ValueError("which must be 'x' or 'y'")
    n, J = W_h.n, W_h.J
    if W_h.n_terms == 0 or n == 0:
        return 0.0, 0.0
    hs = np.unique(W_h.z_degrees())
    if len(hs) != 1:
        raise DimensionError("xy_operator_norm expects a z-homogeneous layer")
    h = int(hs[0])
    upper = 0.0
    per_comp_entries = []
    for j in range(n):
        d = W_h.derivative(which, j)
        mod = modulus(d, s, r)
        comp_entries = []
        total = 0.0
        for i in range(mod.n_terms):
            zrow = mod.exps[i, 2 * n:]
            v = float(mod.coeffs[i].real)
            ms = []
            for c in np.flatnonzero(zrow):
                ms.extend([int(c)] * int(zrow[c]))
            comp_entries.append((tuple(sorted(ms)), v))
            wprod = 1.0
            for idx in ms:
                wprod /= _idx_weight(idx, J)
            total += v * wprod
        per_comp_entries.append(comp_entries)
        upper = max(upper, total)
    if h == 0:
        return upper, upper
    probe = 0.0
    flat = [(0, ms, v) for comp in per_comp_entries for (ms, v) in comp]
    for z in _probe_candidates(flat, J):
        n1 = z_norm(z, 1)
        if n1 == 0:
            continue
        best_comp = 0.0
        for comp in per_comp_entries:
            val = 0.0 + 0j
            for ms, v in comp:
                prod = v
                for idx in ms:
                    prod *= z[idx]
                val += prod
            best_comp = max(best_comp, abs(val))
        probe = max(probe, best_comp / n1 ** h)
    return upper, min(probe, upper)


# -- assembled vector-field norms --------------------------------------


@dataclass
class NormReport:
    """Vector-field norm assembly with certification flags.

    ``layers`` maps the z-degree h to its component pairs; every ``upper``
    entry is a certified upper bound and every ``probe`` entry a valid
    lower bound for the same quantity.
    """

    p: float
    s: float
    r: float
    layers: dict = field(default_factory=dict)
    tame_upper: float = 0.0
    tame_probe: float = 0.0
    weighted_sample: float | None = None
    flags: dict = field(default_factory=lambda: {
        "upper_certified": True,
        "probe_is_lower_bound": True,
        "weighted_is_sampled_lower_bound": True,
    })

    def to_dict(self):
        return {
            "p": self.p, "s": self.s, "r": self.r,
            "layers": {str(h): v for h, v in sorted(self.layers.items())},
            "tame_upper": self.tame_upper,
            "tame_probe": self.tame_probe,
            "weighted_sample": self.weighted_sample,
            "flags": self.flags,
        }


def tame_vecfield_norm(W, p, s, r):
    """Assemble the vector-field norm report of a polynomial, summed over
    z-homogeneous layers h with weights

        y: r^h,  x: r^(h-2),  z: r^(h-2) * max(p-tame, 1-variant).
    """
    report = NormReport(p=p, s=s, r=r)
    up_total = 0.0
    pr_total = 0.0
    for h in sorted(np.unique(W.z_degrees())) if W.n_terms else []:
        layer = W.z_homogeneous(int(h))
        y_up, y_pr = xy_operator_norm(layer, "y", s, r) if W.n else (0.0, 0.0)
        x_up, x_pr = xy_operator_norm(layer, "x", s, r) if W.n else (0.0, 0.0)
        zp_up, zp_pr = tame_z_norm(layer, p, s, r)
        z1_up, z1_pr = one_z_norm(layer, s, r)
        h = int(h)
        lay_up = (y_up * r ** h + x_up * r ** (h - 2)
                  + max(zp_up, z1_up) * r ** (h - 2))
        lay_pr = (y_pr * r ** h + x_pr * r ** (h - 2)
                  + max(zp_pr, z1_pr) * r ** (h - 2))
        report.layers[h] = {
            "y": (y_up, y_pr), "x": (x_up, x_pr),
            "z_tame": (zp_up, zp_pr), "z_one": (z1_up, z1_pr),
            "total_upper": lay_up, "total_probe": lay_pr,
        }
        up_total += lay_up
        pr_total += lay_pr
    report.tame_upper = up_total
    report.tame_probe = pr_total
    return report


def gradient_eval(W, x, y, q, qbar):
    """Evaluate (W_x, W_y, W_q, W_qbar) on a batch of points."""
    B = np.atleast_2d(x).shape[0] if W.n else np.atleast_2d(q).shape[0]

    def block(kind, count):
        out = np.zeros((B, count), dtype=np.complex128)
        for j in range(count):
            out[:, j] = evaluate_batch(W.derivative(kind, j), x, y, q, qbar)
        return out

    return (block("x", W.n), block("y", W.n),
            block("q", W.J), block("qbar", W.J))


def weighted_vecfield_norm(W, p, s, r, sample_count=128, seed=0,
                           margin=0.98):
    """Sampled estimate (a lower bound of the true sup) of the pointwise
    weighted vector-field norm

        sup_{(x,y,z)} ||W_y|| + r^-2 ||W_x|| + r^-1 ||W_z||_{p+1}

    over the complex domain with |Im x| < s, |y| < r^2, ||z||_p < r.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if W.n_terms == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    n, J = W.n, W.J
    B = sample_count
    x = rng.uniform(0, 2 * np.pi, (B, n)) + 1j * rng.uniform(-1, 1, (B, n)) * s * margin
    ymag = rng.uniform(0, 1, (B, n)) ** (1 / max(n, 1)) * r ** 2 * margin
    y = ymag * np.exp(2j * np.pi * rng.uniform(0, 1, (B, n)))
    zdir = rng.normal(size=(B, 2 * J)) + 1j * rng.normal(size=(B, 2 * J))
    norms = np.array([z_norm(zdir[b], p) for b in range(B)])
    scales = rng.uniform(0.2, 1.0, B) * r * margin / np.where(norms == 0, 1, norms)
    z = zdir * scales[:, None]
    q, qbar = z[:, :J], z[:, J:]
    Wx, Wy, Wq, Wqbar = gradient_eval(W, x, y, q, qbar)
    wq = mode_weights(J, p + 1)
    val = (np.abs(Wy).max(axis=1, initial=0.0)
           + np.abs(Wx).max(axis=1, initial=0.0) / r ** 2
           + (np.sqrt((np.abs(Wq) ** 2 * wq ** 2).sum(axis=1))
              + np.sqrt((np.abs(Wqbar) ** 2 * wq ** 2).sum(axis=1))) / r)
    return float(val.max())
