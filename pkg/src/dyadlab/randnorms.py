"""Randomized (Rademacher) norms and the estimates built from them.

The basic quantity is || sum_k eps_k h_k ||_{L^p(mu x P)} for a finite family
of atom-indexed functions.  With at most ``n_exact`` active indices the sign
average is enumerated exactly (2^K patterns); beyond that a seeded Monte
Carlo estimate with a standard error is returned, and every acceptance
threshold downstream budgets three standard errors of slack.

For scalar families the randomized norm and the square-function norm
|| (sum_k h_k^2)^(1/2) ||_{L^p} sandwich each other within the classical
Khintchine constants, with exact equality at p = 2 under enumeration; the
sandwich is asserted with Haagerup's constants.  Lattice-valued families get
a wider documented envelope (coordinatewise Khintchine combined with the
l^rho / l^2 mixed-norm comparisons).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from dyadlab._seeds import derive_seed, rng_for
from dyadlab.grid import GridIndex
from dyadlab.martingale import MartingaleContext, expectation
from dyadlab.measure import AtomicMeasure, LatticeSpace, lp_norm, vector_norm

__all__ = [
    "RademacherSampler",
    "NormReport",
    "khintchine_constants",
    "lattice_sandwich_envelope",
    "randomized_norm",
    "square_function_norm",
    "square_function_ratio",
    "carleson_norm",
    "carleson_embedding_check",
    "rademacher_bound",
    "operator_norm",
    "rmf_maximal",
    "rmf_norm",
    "decoupling_check",
    "stein_check",
    "contraction_check",
    "improved_contraction_check",
]


# =============================================================================
# Sampler
# =============================================================================

@dataclass(frozen=True)
class RademacherSampler:
    """Sign-pattern source: exact enumeration up to n_exact, Monte Carlo beyond.

    Exact enumeration and Monte Carlo agree within sampling error on overlap
    cases; acceptance thresholds always include 3 * stderr slack so that only
    enumerable instances carry machine-precision assertions.
    """

    n_exact: int = 14
    mc_trials: int = 4096
    seed: int = 0

    def signs(self, count: int, label: str = "") -> Tuple[np.ndarray, bool]:
        """(patterns, exact): patterns is (P, count) of +-1."""
        if count == 0:
            return np.ones((1, 0)), True
        if count <= self.n_exact:
            grid = (np.arange(2 ** count)[:, None] >> np.arange(count)[None, :]) & 1
            return 1.0 - 2.0 * grid, True
        rng = rng_for(self.seed, f"signs:{count}:{label}")
        return 1.0 - 2.0 * rng.integers(0, 2, size=(self.mc_trials, count)), False


@dataclass(frozen=True)
class NormReport:
    value: float
    method: str            # "exact" | "mc"
    stderr: float
    trials: int

    def upper(self, sigmas: float = 3.0) -> float:
        return self.value + sigmas * self.stderr


# =============================================================================
# Khintchine constants
# =============================================================================

def khintchine_constants(p: float) -> Tuple[float, float]:
    """Haagerup's sharp scalar constants (A_p, B_p).

    A_p ||S||_p <= || sum eps_k a_k ||_{L^p(P)} <= B_p ||S||_p pointwise,
    with S = (sum a_k^2)^(1/2); B_p = 1 for p <= 2 and A_p = 1 for p >= 2.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    gamma_form = math.sqrt(2.0) * (math.gamma((p + 1.0) / 2.0) / math.sqrt(math.pi)) ** (1.0 / p)
    if p >= 2.0:
        return 1.0, gamma_form
    return min(2.0 ** (0.5 - 1.0 / p), gamma_form), 1.0


def lattice_sandwich_envelope(p: float, rho: float) -> Tuple[float, float]:
    """Documented (generous) sandwich constants for (R^m, l^rho) values.

    Combines coordinatewise Khintchine at exponent max(2, rho) with the
    monotonicity of normalized L^q(Omega) norms; not sharp, but valid for
    every m, which is all the tests ask of it.
    """
    a_p, b_p = khintchine_constants(p)
    r_eff = rho if not math.isinf(rho) else 4.0
    a_r, b_r = khintchine_constants(max(2.0, r_eff))
    lo = min(a_p, 1.0) * min(a_r, 2.0 ** (0.5 - 1.0 / min(r_eff, 2.0)))
    hi = max(b_p, 1.0) * max(b_r, 1.0) * math.sqrt(2.0)
    return lo, hi


# =============================================================================
# Randomized norms
# =============================================================================

def _stack_family(family: Sequence[np.ndarray]) -> np.ndarray:
    arrs = [np.asarray(h, dtype=float) for h in family]
    return np.stack(arrs, axis=0)


def randomized_norm(mu: AtomicMeasure, family: Sequence[np.ndarray], p: float,
                    sampler: RademacherSampler, rho: float = 2.0,
                    label: str = "") -> NormReport:
    """|| sum_k eps_k h_k ||_{L^p(mu x P)} with l^rho value norms."""
    H = _stack_family(family)
    if H.shape[0] == 0:
        return NormReport(0.0, "exact", 0.0, 1)
    signs, exact = sampler.signs(H.shape[0], label=label)
    if H.ndim == 2:                                    # scalar-valued family
        norms = np.abs(signs @ H)                      # (P, n)
    else:                                              # lattice-valued family
        fields = np.tensordot(signs, H, axes=(1, 0))   # (P, n, m)
        norms = vector_norm(fields, rho)               # (P, n)
    per_pattern = norms ** p @ mu.weights         # (P,)
    mean = float(np.mean(per_pattern))
    value = mean ** (1.0 / p)
    if exact:
        return NormReport(value, "exact", 0.0, signs.shape[0])
    sd = float(np.std(per_pattern, ddof=1)) / math.sqrt(signs.shape[0])
    stderr = sd / max(p * mean ** (1.0 - 1.0 / p), 1e-300)
    return NormReport(value, "mc", stderr, signs.shape[0])


def square_function_norm(mu: AtomicMeasure, family: Sequence[np.ndarray], p: float,
                         rho: float = 2.0) -> float:
    """|| (sum_k |h_k|^2)^(1/2) ||_{L^p(mu)} with the coordinatewise square sum."""
    H = _stack_family(family)
    if H.shape[0] == 0:
        return 0.0
    sq = np.sqrt(np.sum(H * H, axis=0))
    return lp_norm(mu, sq, p, rho=rho)


def square_function_ratio(ctx: MartingaleContext, family_of: Callable[[np.ndarray], List[np.ndarray]],
                          p: float, ensemble: Sequence[np.ndarray],
                          sampler: RademacherSampler, rho: float = 2.0) -> dict:
    """Sup over an ensemble of randomized-norm / input-norm ratios.

    ``family_of(f)`` produces the operator family applied to f (for example
    all adapted differences); inputs are normalized by their own L^p norm.
    """
    ratios = []
    for idx, f in enumerate(ensemble):
        denom = lp_norm(ctx.measure, f, p, rho=rho)
        if denom == 0.0:
            continue
        rep = randomized_norm(ctx.measure, family_of(np.asarray(f, dtype=float)), p,
                              sampler, rho=rho, label=f"sqfn:{idx}")
        ratios.append(rep.value / denom)
    return {"max_ratio": max(ratios) if ratios else 0.0, "ratios": ratios}


# =============================================================================
# Carleson norms and embeddings
# =============================================================================

def carleson_norm(index: GridIndex, d_fns: Dict[int, np.ndarray], p: float,
                  sampler: RademacherSampler) -> NormReport:
    """Car^p: sup over occupied cubes of the normalized truncated random sum.

    For each occupied cube Q the family {d_k : 2^k <= l(Q)} is restricted to
    Q and its randomized L^p norm is divided by mu(Q)^(1/p).
    """
    mu = index.measure
    best = NormReport(0.0, "exact", 0.0, 1)
    for k in index.system.scales:
        for cube in index.occupied(k):
            atoms = index.atoms_of(cube)
            mass = float(np.sum(mu.weights[atoms]))
            scales = [j for j in sorted(d_fns) if j <= cube.scale]
            if not scales or mass == 0.0:
                continue
            family = []
            for j in scales:
                g = np.zeros(mu.atom_count)
                g[atoms] = np.asarray(d_fns[j], dtype=float)[atoms]
                family.append(g)
            rep = randomized_norm(mu, family, p, sampler,
                                  label=f"car:{cube.key}")
            val = rep.value / mass ** (1.0 / p)
            if val > best.value:
                best = NormReport(val, rep.method, rep.stderr / mass ** (1.0 / p),
                                  rep.trials)
    return best


def carleson_embedding_check(ctx: MartingaleContext, d_fns: Dict[int, np.ndarray],
                             ensemble: Sequence[np.ndarray], p: float,
                             sampler: RademacherSampler, rho: float = 2.0,
                             multipliers: Optional[Dict[int, np.ndarray]] = None) -> dict:
    """Embedding ratio ||sum eps_k d_k E_k(c_k f)||_p / (Car^1 ||f||_p).

    The coefficient functions must be scale-measurable (d_k = E_k d_k); a
    violation is an error, not a failed estimate.  Multipliers c_k default
    to one and must be bounded by one in modulus.
    """
    mu = ctx.measure
    for k, d in d_fns.items():
        if not np.allclose(d, expectation(ctx, np.asarray(d, dtype=float), k),
                           rtol=0.0, atol=1e-10):
            raise ValueError(f"d_{k} is not scale-{k} measurable")
    if multipliers is not None:
        for k, c in multipliers.items():
            if np.max(np.abs(c)) > 1.0 + 1e-12:
                raise ValueError(f"multiplier c_{k} exceeds modulus one")
    car = carleson_norm(ctx.index, d_fns, 1.0, sampler)
    ratios = []
    for idx, f in enumerate(ensemble):
        f = np.asarray(f, dtype=float)
        denom = lp_norm(mu, f, p, rho=rho) * max(car.value, 1e-300)
        family = []
        for k in sorted(d_fns):
            arg = f if multipliers is None else _scalar_mult(multipliers[k], f)
            family.append(_scalar_mult(np.asarray(d_fns[k], dtype=float),
                                       expectation(ctx, arg, k)))
        rep = randomized_norm(mu, family, p, sampler, rho=rho, label=f"emb:{idx}")
        ratios.append(rep.value / denom)
    return {"car1": car.value, "max_ratio": max(ratios) if ratios else 0.0,
            "ratios": ratios}


def _scalar_mult(scalar: np.ndarray, values: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return scalar * values
    return scalar[:, None] * values


# =============================================================================
# R-bounds
# =============================================================================

def operator_norm(matrix: np.ndarray, rho: float) -> Tuple[float, bool]:
    """Operator norm on (R^m, l^rho); (value, certified).

    Exact for rho in {1, 2, inf}; otherwise a Boyd-iteration lower estimate.
    """
    a = np.asarray(matrix, dtype=float)
    if rho == 1.0:
        return float(np.max(np.sum(np.abs(a), axis=0))), True
    if math.isinf(rho):
        return float(np.max(np.sum(np.abs(a), axis=1))), True
    if rho == 2.0:
        return float(np.linalg.norm(a, 2)), True
    rng = np.random.default_rng(7)
    best = 0.0
    rho_dual = rho / (rho - 1.0)

    def lr(v):
        return float(np.sum(np.abs(v) ** rho) ** (1.0 / rho))

    for _ in range(8):
        x = rng.normal(size=a.shape[1])
        for _ in range(40):
            x = x / max(lr(x), 1e-300)
            y = a @ x
            best = max(best, lr(y))
            # dual ascent step (Boyd iteration for mixed-norm operator norms)
            z = np.sign(y) * np.abs(y) ** (rho - 1.0)
            x = a.T @ z
            x = np.sign(x) * np.abs(x) ** (rho_dual - 1.0)
    return best, False


def rademacher_bound(family: Sequence[np.ndarray], sampler: RademacherSampler,
                     rho: float = 2.0, trials: int = 64,
                     seed: int = 0) -> Tuple[float, float, str]:
    """(lower, upper, method) for the R-bound of a finite operator family.

    Operators act on (R^m, l^rho).  The lower bound maximizes the randomized
    quotient over sampled sign/vector configurations (singletons give exact
    operator norms).  The upper bound is certified: the largest operator norm
    when rho = 2 (Hilbert case, where the R-bound equals the uniform bound),
    and the triangle-inequality sum of operator norms otherwise.
    """
    mats = [np.atleast_2d(np.asarray(t, dtype=float)) for t in family]
    if not mats:
        return 0.0, 0.0, "empty"
    norms = [operator_norm(t, rho) for t in mats]
    lower = max(v for v, _ in norms)
    rng = rng_for(seed if seed else sampler.seed, f"rbound:{len(mats)}")
    m_in = mats[0].shape[1]
    k = len(mats)
    signs, _ = sampler.signs(k, label="rbound")
    for _ in range(trials):
        xs = rng.normal(size=(k, m_in))
        num = _rademacher_l2_norm(signs, np.stack([t @ x for t, x in zip(mats, xs)]), rho)
        den = _rademacher_l2_norm(signs, xs, rho)
        if den > 1e-300:
            lower = max(lower, num / den)
    if rho == 2.0 and all(cert for _, cert in norms):
        upper = max(v for v, _ in norms)
        method = "hilbert-exact"
    elif all(cert for _, cert in norms):
        upper = sum(v for v, _ in norms)
        method = "triangle-sum"
    else:
        upper = math.inf
        method = "lower-bound-only"
    return lower, max(upper, lower), method


def _rademacher_l2_norm(signs: np.ndarray, vectors: np.ndarray, rho: float) -> float:
    k = vectors.shape[0]
    s = signs[:, :k]
    fields = np.tensordot(s, vectors, axes=(1, 0))
    return float(np.sqrt(np.mean(vector_norm(fields, rho) ** 2)))


def rmf_maximal(ctx: MartingaleContext, values: np.ndarray, atom: int,
                rho: float = 2.0) -> float:
    """R-bound of the distinct martingale averages {E_k f(x)} at one atom.

    Vectors are viewed as rank-one maps from scalars; on a Hilbert lattice
    (rho = 2, or scalar values) the R-bound of such a set equals the largest
    vector norm, which is returned exactly.  For other rho the same quantity
    is returned as a certified lower envelope of the true R-bound.
    """
    v = np.asarray(values, dtype=float)
    vecs = []
    seen = set()
    for k in ctx.scales:
        ek = expectation(ctx, v, k)
        vec = np.atleast_1d(ek[atom])
        key = tuple(np.round(vec, 15))
        if key not in seen:
            seen.add(key)
            vecs.append(vec)
    return max(float(vector_norm(vec[None, :], rho)[0]) for vec in vecs)


def rmf_norm(ctx: MartingaleContext, values: np.ndarray, p: float,
             rho: float = 2.0) -> float:
    """L^p(mu) norm of the Rademacher maximal function."""
    mvals = np.array([rmf_maximal(ctx, values, a, rho=rho)
                      for a in range(ctx.measure.atom_count)])
    return lp_norm(ctx.measure, mvals, p)


# =============================================================================
# Decoupling
# =============================================================================

@dataclass
class DecouplingBlock:
    """One cell of the refining partition: scale label, member atoms, block data.

    ``values`` is the block function supported on the atoms (full-length
    array); ``cells`` optionally lists the next-finer partition cells inside
    the block, on which the function must be constant for the kernel variant.
    """

    scale: int
    atoms: np.ndarray
    values: np.ndarray
    cells: Optional[List[np.ndarray]] = None
    kernel: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def decoupling_check(mu: AtomicMeasure, blocks: Sequence[DecouplingBlock], p: float,
                     sampler: RademacherSampler, mc_trials: int = 2000,
                     seed: int = 11, mode: str = "tangent",
                     exact_limit: int = 200_000,
                     require_cell_constant: bool = False) -> dict:
    """Compare a block martingale sum against its resampled (decoupled) twin.

    tangent: LHS integrates |sum_k eps_k sum_A f_A(x)|^p over (x, eps); RHS
    replaces f_A(x) by 1_A(x) f_A(y_A) with y_A drawn from the normalized
    restriction of mu to A, independently per block, and integrates over y as
    well.  The two-sided ratio LHS/RHS is reported, with the RHS evaluated by
    full enumeration of the product space when it is small and by Monte Carlo
    otherwise.

    trick: the LHS block data is averaged through a kernel,
    (1_A(x)/mu(A)) int_A k_A(x, z) f_A(z) dmu(z) with |k_A| <= 1, and the
    reported ratio compares against the plain undecoupled norm.
    """
    scales = sorted({b.scale for b in blocks})
    n = mu.atom_count
    if require_cell_constant or mode == "trick":
        for b in blocks:
            if b.cells is None:
                raise ValueError("blocks must carry their finer cells for this check")
            for cell in b.cells:
                vals = np.asarray(b.values, dtype=float)[cell]
                if vals.size and np.max(np.abs(vals - vals[0])) > 1e-12:
                    raise ValueError("block function is not measurable on its cells")

    def scale_family(value_of_block) -> List[np.ndarray]:
        fam = []
        for k in scales:
            g = np.zeros(n)
            for b in blocks:
                if b.scale == k:
                    g[b.atoms] += value_of_block(b)[b.atoms]
            fam.append(g)
        return fam

    undecoupled = randomized_norm(mu, scale_family(lambda b: b.values), p, sampler,
                                  label="dec:lhs")

    if mode == "trick":
        def averaged(b: DecouplingBlock) -> np.ndarray:
            out = np.zeros(n)
            w = mu.weights[b.atoms]
            mass = float(np.sum(w))
            kv = b.kernel(mu.positions[b.atoms], mu.positions[b.atoms]) \
                if b.kernel is not None else np.ones((b.atoms.size, b.atoms.size))
            out[b.atoms] = (kv * (w * np.asarray(b.values)[b.atoms])[None, :]).sum(axis=1) / mass
            return out

        lhs = randomized_norm(mu, scale_family(averaged), p, sampler, label="dec:trick")
        return {"lhs": lhs.value, "rhs": undecoupled.value,
                "ratio": lhs.value / max(undecoupled.value, 1e-300),
                "method": "trick"}

    # tangent mode: expectation over independent resampling points
    combos = 1
    for b in blocks:
        combos *= b.atoms.size
    exact = combos * 2 ** min(len(scales), sampler.n_exact) <= exact_limit

    def norm_p_for_choice(choice: Sequence[int]) -> float:
        fam = []
        for k in scales:
            g = np.zeros(n)
            for bi, b in enumerate(blocks):
                if b.scale == k:
                    g[b.atoms] += np.asarray(b.values)[b.atoms[choice[bi]]]
            fam.append(g)
        rep = randomized_norm(mu, fam, p, sampler, label="dec:rhs")
        return rep.value ** p

    if exact:
        total, weight_total = 0.0, 0.0
        ranges = [range(b.atoms.size) for b in blocks]
        for choice in itertools.product(*ranges):
            prob = 1.0
            for bi, b in enumerate(blocks):
                w = mu.weights[b.atoms]
                prob *= w[choice[bi]] / float(np.sum(w))
            total += prob * norm_p_for_choice(choice)
            weight_total += prob
        rhs = (total / weight_total) ** (1.0 / p)
        stderr = 0.0
        method = "exact"
    else:
        rng = rng_for(seed, "dec:resample")
        samples = np.empty(mc_trials)
        pick = []
        for b in blocks:
            w = mu.weights[b.atoms]
            pick.append(rng.choice(b.atoms.size, size=mc_trials, p=w / np.sum(w)))
        for t in range(mc_trials):
            samples[t] = norm_p_for_choice([pk[t] for pk in pick])
        mean = float(np.mean(samples))
        rhs = mean ** (1.0 / p)
        sd = float(np.std(samples, ddof=1)) / math.sqrt(mc_trials)
        stderr = sd / max(p * mean ** (1.0 - 1.0 / p), 1e-300)
        method = "mc"

    ratio = undecoupled.value / max(rhs, 1e-300)
    return {"lhs": undecoupled.value, "rhs": rhs, "rhs_stderr": stderr,
            "ratio": ratio, "method": method}


# =============================================================================
# Classical randomized-sum checks
# =============================================================================

def stein_check(ctx: MartingaleContext, fs: Dict[int, np.ndarray], p: float,
                sampler: RademacherSampler, rho: float = 2.0) -> float:
    """Ratio ||sum eps_k E_k f_k||_p / ||sum eps_k f_k||_p."""
    scales = sorted(fs)
    fam_proj = [expectation(ctx, np.asarray(fs[k], dtype=float), k) for k in scales]
    fam_raw = [np.asarray(fs[k], dtype=float) for k in scales]
    num = randomized_norm(ctx.measure, fam_proj, p, sampler, rho=rho, label="stein:num")
    den = randomized_norm(ctx.measure, fam_raw, p, sampler, rho=rho, label="stein:den")
    return num.value / max(den.value, 1e-300)


def contraction_check(mu: AtomicMeasure, family: Sequence[np.ndarray],
                      lambdas: Sequence[float], sampler: RademacherSampler,
                      rho: float = 2.0) -> Tuple[float, float]:
    """Exact L^2 randomized norms before and after bounded multipliers."""
    if max(abs(l) for l in lambdas) > 1.0 + 1e-15:
        raise ValueError("multipliers must be bounded by one")
    base = randomized_norm(mu, family, 2.0, sampler, rho=rho, label="contr:base")
    scaled = [l * np.asarray(h, dtype=float) for l, h in zip(lambdas, family)]
    after = randomized_norm(mu, scaled, 2.0, sampler, rho=rho, label="contr:scaled")
    return after.value, base.value


def improved_contraction_check(xis: Sequence[np.ndarray], rhos: Sequence[np.ndarray],
                               aux_probs: np.ndarray, t: float, rho: float,
                               sampler: RademacherSampler) -> dict:
    """Mixed-norm contraction with L^t multipliers on an auxiliary space.

    LHS = || sum_j eps_j rho_j xi_j ||_{L^t(aux; L^2(Omega; l^rho))} and
    RHS = sup_j ||rho_j||_{L^t(aux)} * || sum_j eps_j xi_j ||_{L^2(Omega)};
    the ratio LHS / RHS is returned together with both sides.  Requires
    t > cotype, i.e. t > max(2, rho).
    """
    s = max(2.0, rho if not math.isinf(rho) else 2.0)
    if not t > s:
        raise ValueError(f"need t > cotype s = {s}")
    xis = [np.asarray(x, dtype=float) for x in xis]
    rhos = [np.asarray(r, dtype=float) for r in rhos]
    probs = np.asarray(aux_probs, dtype=float)
    k = len(xis)
    signs, _ = sampler.signs(k, label="improved")
    # L^2(Omega; l^rho) norm for each auxiliary point
    stacked = np.stack(xis)                      # (k, m)
    inner = np.empty(probs.size)
    for a in range(probs.size):
        coeff = np.array([rhos[j][a] for j in range(k)])
        fields = np.tensordot(signs * coeff[None, :], stacked, axes=(1, 0))
        inner[a] = math.sqrt(float(np.mean(vector_norm(fields, rho) ** 2)))
    lhs = float(np.dot(probs, inner ** t) ** (1.0 / t))
    sup_rho = max(float(np.dot(probs, np.abs(r) ** t) ** (1.0 / t)) for r in rhos)
    fields0 = np.tensordot(signs, stacked, axes=(1, 0))
    base = math.sqrt(float(np.mean(vector_norm(fields0, rho) ** 2)))
    rhs = sup_rho * base
    return {"lhs": lhs, "rhs": rhs, "ratio": lhs / max(rhs, 1e-300)}
