"""Kernels and discrete singular operators on atomic measures.

A kernel spec carries its size constant, smoothness constant and exponent
explicitly; the discrete operator is the atoms-by-atoms action matrix
M[x][y] = K(x, y) w(y) with zero diagonal, so the bilinear form <psi, T phi>
is an explicit double sum and the adjoint is the literal transpose with the
kernel arguments swapped.

The matrix decomposition machinery lives here: classification of cube pairs
into separated / deeply nested / comparable / bad, the exact ledger
reproducing <g, Tf> from adapted-difference blocks plus two boundary terms,
off-diagonal decay checks with an explicit constant chain, paraproduct
assembly via the stopping map S(Q), collar partitions of comparable pairs,
and the Monte-Carlo boundary-collar probability.

Every asserted decay bound is scaled by the kernel constants and by the
derived test-function bounds (2 / delta^2 for the frame functions); the
safety factor 2^(d + alpha + 1) absorbs absolute constants from the chain of
elementary estimates (ring decompositions, midpoint smoothness, growth of
the measure at dyadic radii).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from dyadlab._seeds import rng_for
from dyadlab.accretive import AccretiveSystem
from dyadlab.grid import (Cube, DyadicParams, DyadicSystem, GridIndex, _cubes_near,
                          badness_scan, boundary_distance, contains, long_distance,
                          set_distance)
from dyadlab.martingale import (MartingaleContext, adapted_diff, adapted_diff_adjoint,
                                adapted_diff_local, adapted_expectation, omega_local,
                                phi)
from dyadlab.measure import AtomicMeasure, average, integrate, lp_norm, pair

__all__ = [
    "KernelSpec",
    "DiscreteOperator",
    "PairClass",
    "PairClassifier",
    "riesz_kernel",
    "dipole_kernel",
    "hilbert_kernel",
    "kernel_by_name",
    "validate_kernel",
    "chain_constant",
    "measure_testing_bound",
    "classify_pair",
    "pairing_decomposition",
    "decay_bound_check",
    "decay_slope_fit",
    "paraproduct_smap",
    "paraproduct_apply",
    "paraproduct_direct_pairing",
    "comparable_partition",
    "comparable_msum",
    "collar_membership",
    "boundary_probability",
]


# =============================================================================
# Kernels
# =============================================================================

@dataclass(frozen=True)
class KernelSpec:
    """A scalar kernel with certified size / smoothness constants.

    ``evaluate(x, y)`` takes (a, N) and (b, N) position blocks and returns the
    (a, b) kernel matrix; the diagonal convention (x = y) is handled by the
    operator, not the kernel.
    """

    name: str
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    c_size: float
    c_smooth: float
    alpha: float
    d: float


def riesz_kernel(d: float) -> KernelSpec:
    """K(x, y) = min(1, |x - y|^-d): even, positive, truncated at unit height."""
    def ev(x, y):
        dist = _sup_dist(x, y)
        safe = np.where(dist > 0, dist, 1.0)
        return np.where(dist > 0, np.minimum(1.0, safe ** (-d)), 1.0)
    return KernelSpec("riesz", ev, 1.0, d * 2.0 ** (d + 1.0), 1.0, d)


def dipole_kernel(d: float, axis: int = 0) -> KernelSpec:
    """K(x, y) = (x_a - y_a) / |x - y|^(d+1): antisymmetric, first-moment type."""
    def ev(x, y):
        dist = _sup_dist(x, y)
        num = x[:, None, axis] - y[None, :, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(dist > 0, num / np.where(dist > 0, dist, 1.0) ** (d + 1.0), 0.0)
        return out
    return KernelSpec("dipole", ev, 1.0, (d + 2.0) * 2.0 ** (d + 2.0), 1.0, d)


def hilbert_kernel(d: float) -> KernelSpec:
    """K(x, y) = sign(x - y) / |x - y|^d in one dimension: odd, homogeneous."""
    def ev(x, y):
        diff = x[:, None, 0] - y[None, :, 0]
        dist = np.abs(diff)
        safe = np.where(dist > 0, dist, 1.0)
        return np.where(dist > 0, np.sign(diff) * safe ** (-d), 0.0)
    return KernelSpec("hilbert", ev, 1.0, (d + 1.0) * 2.0 ** (d + 1.0), 1.0, d)


def kernel_by_name(name: str, d: float) -> KernelSpec:
    if name == "riesz":
        return riesz_kernel(d)
    if name == "dipole":
        return dipole_kernel(d)
    if name == "hilbert":
        return hilbert_kernel(d)
    raise ValueError(f"unknown kernel {name!r}")


def _sup_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.max(np.abs(x[:, None, :] - y[None, :, :]), axis=-1)


def validate_kernel(spec: KernelSpec, mu: AtomicMeasure, seed: int = 5,
                    samples: int = 400) -> dict:
    """Sampled size and smoothness checks on pairs / triples of atom positions."""
    rng = rng_for(seed, f"kernel:{spec.name}")
    n = mu.atom_count
    worst_size = 0.0
    worst_smooth = 0.0
    for _ in range(samples):
        a, b = rng.integers(0, n, size=2)
        if a == b:
            continue
        xa, xb = mu.positions[a], mu.positions[b]
        dist = float(np.max(np.abs(xa - xb)))
        kval = float(spec.evaluate(xa[None, :], xb[None, :])[0, 0])
        worst_size = max(worst_size, abs(kval) * dist ** spec.d / spec.c_size)
        # perturb x toward a third atom and test smoothness in both slots
        c = rng.integers(0, n)
        xc = mu.positions[c]
        step = 0.25 * dist
        direction = xc - xa
        nrm = float(np.max(np.abs(direction)))
        if nrm == 0.0:
            continue
        xap = xa + direction / nrm * step
        move = float(np.max(np.abs(xap - xa)))
        if 2.0 * move > dist or move == 0.0:
            continue
        k1 = float(spec.evaluate(xap[None, :], xb[None, :])[0, 0])
        k2 = float(spec.evaluate(xb[None, :], xa[None, :])[0, 0])
        k3 = float(spec.evaluate(xb[None, :], xap[None, :])[0, 0])
        lhs = abs(kval - k1) + abs(k2 - k3)
        bound = spec.c_smooth * move ** spec.alpha / dist ** (spec.d + spec.alpha)
        worst_smooth = max(worst_smooth, lhs / bound if bound > 0 else 0.0)
    return {"size_ratio": worst_size, "smooth_ratio": worst_smooth,
            "passed": worst_size <= 1.0 + 1e-9 and worst_smooth <= 1.0 + 1e-9}


# =============================================================================
# The discrete operator
# =============================================================================

class DiscreteOperator:
    """T f(x) = sum_{y != x} K(x, y) f(y) w(y), realized as a dense matrix.

    The diagonal is zero by convention: the defining integral representation
    only constrains the action away from the support of the argument, and
    every estimate the matrix feeds pairs functions with disjoint supports or
    mean zero.  Reported operator quantities therefore refer to the
    off-diagonal part.
    """

    def __init__(self, kernel: KernelSpec, mu: AtomicMeasure):
        self.kernel = kernel
        self.measure = mu
        kmat = kernel.evaluate(mu.positions, mu.positions)
        np.fill_diagonal(kmat, 0.0)
        self.kernel_matrix = kmat
        self.action = kmat * mu.weights[None, :]

    def apply(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            return self.action @ v
        return self.action @ v

    def adjoint_apply(self, values: np.ndarray) -> np.ndarray:
        """T* g(x) = sum_{y != x} K(y, x) g(y) w(y)."""
        v = np.asarray(values, dtype=float)
        return (self.kernel_matrix.T * self.measure.weights[None, :]) @ v

    def matrix_element(self, psi: np.ndarray, phi_vals: np.ndarray) -> float:
        """<psi, T phi> = sum_{x != y} psi(x) K(x, y) phi(y) w(x) w(y)."""
        w = self.measure.weights
        return float((w * np.asarray(psi, dtype=float))
                     @ self.action @ np.asarray(phi_vals, dtype=float))

    def bilinear(self, g: np.ndarray, f: np.ndarray) -> float:
        """<g, Tf> for scalar or lattice-valued f, g (coordinatewise action)."""
        g = np.asarray(g, dtype=float)
        f = np.asarray(f, dtype=float)
        if f.ndim == 1:
            return self.matrix_element(g, f)
        return sum(self.matrix_element(g[:, j], f[:, j]) for j in range(f.shape[1]))


def measure_testing_bound(op: DiscreteOperator, sys_b: AccretiveSystem,
                          index: GridIndex) -> float:
    """Measured sup bound of |T b_Q| over all occupied cubes (the constant B)."""
    worst = 0.0
    for k in index.system.scales:
        for cube in index.occupied(k):
            tb = op.apply(sys_b.as_function(index, cube))
            worst = max(worst, float(np.max(np.abs(tb))))
    return worst


def chain_constant(kernel: KernelSpec, delta: float) -> float:
    """The explicit constant chain 2^(d+alpha+1) (C_size v C_smooth) (2/delta^2)^2."""
    return (2.0 ** (kernel.d + kernel.alpha + 1.0)
            * max(kernel.c_size, kernel.c_smooth)
            * (2.0 / delta ** 2) ** 2)


# =============================================================================
# Pair classification
# =============================================================================

class PairClass(Enum):
    SEPARATED = "separated"
    DEEP_NESTED = "deep_nested"
    COMPARABLE = "comparable"
    BAD = "bad"


class GeometryError(RuntimeError):
    """A good pair matched no class: the goodness geometry is violated."""


class PairClassifier:
    """Memoized badness profiles for pairs between two fixed systems.

    For each cube the scan records the largest witness scale at which the
    other system's boundary comes within the collar threshold; a cube is then
    n-bad exactly when scale(Q) + max(n, r) stays below that witness scale,
    which turns per-pair badness into one integer comparison.
    """

    def __init__(self, params: DyadicParams):
        self.params = params
        self._profiles: Dict[Tuple[int, int, Tuple[int, ...]], Optional[int]] = {}

    def _profile(self, q: Cube, other: DyadicSystem) -> Optional[int]:
        key = (id(other), q.scale, q.index)
        if key not in self._profiles:
            self._profiles[key] = self._scan(q, other)
        return self._profiles[key]

    def _scan(self, q: Cube, other: DyadicSystem) -> Optional[int]:
        best = None
        gamma = self.params.gamma
        lq_g = q.side ** gamma
        for j in range(q.scale + self.params.r, other.s + 1):
            thr = lq_g * (2.0 ** j) ** (1.0 - gamma)
            for r_cube in _cubes_near(other, j, q.lower, q.upper, thr):
                if boundary_distance(q, r_cube) <= thr:
                    best = j
                    break
        return best

    def is_bad(self, q: Cube, r: Cube) -> bool:
        n = r.scale - q.scale - 1
        jmax = self._profile(q, r.system)
        if jmax is None:
            return False
        return q.scale + max(n, self.params.r) <= jmax

    def classify(self, q: Cube, r: Cube) -> PairClass:
        """Classify a pair with l(Q) <= l(R); Q and R live in different systems."""
        if q.side > r.side:
            raise ValueError("classification requires l(Q) <= l(R)")
        if self.is_bad(q, r):
            return PairClass.BAD
        dist = set_distance(q, r)
        if 2.0 ** (-self.params.r) * r.side <= q.side and dist < q.side:
            return PairClass.COMPARABLE
        if q.side < 2.0 ** (-self.params.r) * r.side and contains(r, q):
            return PairClass.DEEP_NESTED
        if dist >= q.side:
            return PairClass.SEPARATED
        raise GeometryError(
            f"good pair {q.key} / {r.key} matches no class: dist={dist}, "
            f"sides=({q.side}, {r.side})")


def classify_pair(q: Cube, r: Cube, params: DyadicParams) -> PairClass:
    return PairClassifier(params).classify(q, r)


# =============================================================================
# The exact ledger
# =============================================================================

@dataclass
class PairLedger:
    total_pairing: float
    block_sum: float
    boundary_small: float        # <T* top_g, f - top_f>
    boundary_large: float        # <g, T top_f>
    identity_residual: float
    class_mass: Dict[str, float]
    class_pairs: Dict[str, int]
    pair_rows: List[dict]

    @property
    def bad_fraction(self) -> float:
        total = sum(self.class_mass.values())
        return self.class_mass.get("bad", 0.0) / total if total > 0 else 0.0


def pairing_decomposition(op: DiscreteOperator, ctx_f: MartingaleContext,
                          ctx_g: MartingaleContext, f: np.ndarray, g: np.ndarray,
                          params: DyadicParams,
                          collect_rows: bool = False) -> PairLedger:
    """Decompose <g, Tf> into adapted blocks plus two boundary terms.

    The block matrix is <D_R g, T(D_Q f)> over occupied cubes of the two
    systems, bucketed by pair class (the smaller cube is classified against
    the larger one's system).  The ledger identity

        sum of blocks + <top_g, T(f - top_f)> + <g, T top_f> = <g, Tf>

    is exact up to roundoff because the adapted reconstruction has no
    truncation error on the finite window.
    """
    mu = op.measure
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)

    f_blocks = _local_diff_blocks(ctx_f, f)
    g_blocks = _local_diff_blocks(ctx_g, g)
    top_f = adapted_expectation(ctx_f, f, ctx_f.system.s)
    top_g = adapted_expectation(ctx_g, g, ctx_g.system.s)

    classifier = PairClassifier(params)
    class_mass: Dict[str, float] = {}
    class_pairs: Dict[str, int] = {}
    rows: List[dict] = []
    block_sum = 0.0
    for (r_cube, dg) in g_blocks:
        tdg_action = None
        for (q_cube, df) in f_blocks:
            val = op.bilinear(dg, df)
            block_sum += val
            if q_cube.side <= r_cube.side:
                cls = classifier.classify(q_cube, r_cube)
            else:
                cls = classifier.classify(r_cube, q_cube)
            name = cls.value
            class_mass[name] = class_mass.get(name, 0.0) + abs(val)
            class_pairs[name] = class_pairs.get(name, 0) + 1
            if collect_rows:
                rows.append({
                    "q": q_cube.key, "r": r_cube.key, "class": name,
                    "value": val,
                    "long_distance": long_distance(q_cube, r_cube),
                })

    boundary_small = op.bilinear(top_g, f - top_f)
    boundary_large = op.bilinear(g, top_f)
    total = op.bilinear(g, f)
    explained = block_sum + boundary_small + boundary_large
    scale = max(abs(total), 1e-30)
    residual = abs(total - explained) / scale
    return PairLedger(total, block_sum, boundary_small, boundary_large, residual,
                      class_mass, class_pairs, rows)


def _local_diff_blocks(ctx: MartingaleContext, values: np.ndarray):
    """All nonzero local adapted differences (cube, D_Q values) in the window."""
    out = []
    for k in ctx.diff_scales:
        full = adapted_diff(ctx, values, k)
        for cube in ctx.index.occupied(k):
            atoms = ctx.atoms_of(cube)
            local = np.zeros_like(full)
            local[atoms] = full[atoms]
            out.append((cube, local))
    return out


# =============================================================================
# Decay bounds
# =============================================================================

@dataclass
class DecayCheckResult:
    checked: int
    failures: List[dict]
    worst_margin: float          # min over checks of bound/|value| (inf if value 0)
    rows: List[dict]

    @property
    def passed(self) -> bool:
        return not self.failures


def decay_bound_check(op: DiscreteOperator, ctx_f: MartingaleContext,
                      ctx_g: MartingaleContext, params: DyadicParams,
                      collect_rows: bool = False,
                      max_pairs_per_class: Optional[int] = None) -> DecayCheckResult:
    """Assert the off-diagonal decay bounds on separated and nested good pairs.

    Separated pairs (phi mean zero on the small cube) carry the smoothness
    bound l(Q)^alpha / dist^((d+alpha)) against the L^1 norms; in the
    deep-scale regime l(Q) <= 2^-r l(R) the combined long-distance form
    l(Q)^(a/2) l(R)^(a/2) / D(Q,R)^(d+a) with child masses is also asserted
    (for comparable sizes its constant degrades with r and only the
    smoothness form is binding).  Deeply nested pairs split over the children
    of R: off-children carry the long-distance bound scaled by mu(R)^-1, and
    the complement of the host child carries the pure (l(Q)/l(R))^(a/2)
    bound.  All bounds are scaled by the explicit chain constant.
    """
    kernel = op.kernel
    mu = op.measure
    delta = min(ctx_f.delta, ctx_g.delta)
    c_chain = chain_constant(kernel, delta)
    alpha, d = kernel.alpha, kernel.d
    classifier = PairClassifier(params)

    result = DecayCheckResult(0, [], math.inf, [])

    f_menu = _pair_menu(ctx_f)
    g_menu = _pair_menu(ctx_g)
    counts = {"separated": 0, "deep_nested": 0}

    for r_cube, psis in g_menu:
        for q_cube, phis in f_menu:
            if q_cube.side > r_cube.side or q_cube.system is r_cube.system:
                continue
            cls = classifier.classify(q_cube, r_cube)
            if cls not in (PairClass.SEPARATED, PairClass.DEEP_NESTED):
                continue
            if max_pairs_per_class is not None and counts[cls.value] >= max_pairs_per_class:
                continue
            counts[cls.value] += 1
            if cls is PairClass.SEPARATED:
                _check_separated(op, params, c_chain, q_cube, phis, r_cube, psis,
                                 result, collect_rows)
            else:
                _check_nested(op, ctx_g, params, c_chain, q_cube, phis, r_cube,
                              result, collect_rows)
    return result


def _pair_menu(ctx: MartingaleContext):
    """Per cube: the mean-zero frame and defect functions of its children."""
    out = []
    for k in ctx.diff_scales:
        for cube in ctx.index.occupied(k):
            entries = []
            kids = cube.children()
            for i, child in enumerate(kids):
                if ctx.index.atoms_of(child).size == 0:
                    continue
                entries.append(("phi", i, phi(ctx, cube, i)))
                om = omega_local(ctx, cube, i)
                if np.any(om != 0.0):
                    entries.append(("omega", i, om))
            if entries:
                out.append((cube, entries))
    return out


def _check_separated(op, params, c_chain, q_cube, phis, r_cube, psis, result,
                     collect_rows):
    kernel = op.kernel
    alpha, d = kernel.alpha, kernel.d
    dist = set_distance(q_cube, r_cube)
    ddist = long_distance(q_cube, r_cube)
    deep = q_cube.side <= 2.0 ** (-params.r) * r_cube.side
    mu = op.measure
    for kind_g, j, psi_vals in psis:
        psi_l1 = lp_norm(mu, np.abs(psi_vals), 1.0)
        mass_rj = _child_mass(op, r_cube, j)
        for kind_f, i, phi_vals in phis:
            val = abs(op.matrix_element(psi_vals, phi_vals))
            phi_l1 = lp_norm(mu, np.abs(phi_vals), 1.0)
            mass_qi = _child_mass(op, q_cube, i)
            bound = c_chain * q_cube.side ** alpha / dist ** (d + alpha) * phi_l1 * psi_l1
            _record(result, "separated-smooth", q_cube, r_cube, val, bound,
                    collect_rows, ddist)
            if deep:
                bound2 = (c_chain * q_cube.side ** (alpha / 2.0)
                          * r_cube.side ** (alpha / 2.0) / ddist ** (d + alpha)
                          * mass_qi * mass_rj)
                _record(result, "separated-longdist", q_cube, r_cube, val, bound2,
                        collect_rows, ddist)


def _check_nested(op, ctx_g, params, c_chain, q_cube, phis, r_cube, result,
                  collect_rows):
    kernel = op.kernel
    alpha, d = kernel.alpha, kernel.d
    mu = op.measure
    kids = r_cube.children()
    host = [m for m, child in enumerate(kids) if contains(child, q_cube)]
    if len(host) != 1:
        result.failures.append({"kind": "child-containment", "q": q_cube.key,
                                "r": r_cube.key})
        return
    host = host[0]
    mass_r = float(np.sum(mu.weights[ctx_g.index.atoms_of(r_cube)]))
    ratio = (q_cube.side / r_cube.side) ** (alpha / 2.0)

    # off-host children of R against the frame menu of R
    for kind_g, j, psi_full in _pair_menu_entry(ctx_g, r_cube):
        mass_rj = _child_mass(op, r_cube, j)
        for m, child in enumerate(kids):
            if m == host:
                continue
            atoms_m = ctx_g.index.atoms_of(child)
            if atoms_m.size == 0:
                continue
            psi_vals = np.zeros_like(psi_full)
            psi_vals[atoms_m] = psi_full[atoms_m]
            for kind_f, i, phi_vals in phis:
                val = abs(op.matrix_element(psi_vals, phi_vals))
                mass_qi = _child_mass(op, q_cube, i)
                bound = c_chain * ratio * mass_rj * mass_qi / mass_r
                _record(result, "nested-offchild", q_cube, r_cube, val, bound,
                        collect_rows, long_distance(q_cube, r_cube))

    # complement of the host child against the stopped test functions
    host_atoms = ctx_g.index.atoms_of(kids[host])
    comp_mask = np.ones(mu.atom_count, dtype=bool)
    comp_mask[host_atoms] = False
    anc_r = ctx_g.system.cube(*ctx_g.layers.ancestor[r_cube.key])
    anc_r1 = ctx_g.system.cube(*ctx_g.layers.ancestor[kids[host].key])
    for src in (anc_r, anc_r1):
        psi_vals = ctx_g.accretive.as_function(ctx_g.index, src) * comp_mask
        for kind_f, i, phi_vals in phis:
            val = abs(op.matrix_element(psi_vals, phi_vals))
            mass_qi = _child_mass(op, q_cube, i)
            bound = c_chain * ratio * mass_qi
            _record(result, "nested-complement", q_cube, r_cube, val, bound,
                    collect_rows, long_distance(q_cube, r_cube))


def _pair_menu_entry(ctx, cube):
    entries = []
    for i, child in enumerate(cube.children()):
        if ctx.index.atoms_of(child).size == 0:
            continue
        entries.append(("phi", i, phi(ctx, cube, i)))
        om = omega_local(ctx, cube, i)
        if np.any(om != 0.0):
            entries.append(("omega", i, om))
    return entries


def _child_mass(op, cube, i):
    child = cube.children()[i]
    # atoms of a cube from another grid are located geometrically
    inside = child.contains_points(op.measure.positions)
    return float(np.sum(op.measure.weights[inside]))


def _record(result, kind, q_cube, r_cube, val, bound, collect_rows, ddist):
    result.checked += 1
    if val > bound + 1e-14:
        result.failures.append({"kind": kind, "q": q_cube.key, "r": r_cube.key,
                                "value": val, "bound": bound})
    margin = bound / val if val > 0 else math.inf
    result.worst_margin = min(result.worst_margin, margin)
    if collect_rows:
        result.rows.append({"kind": kind, "lq": q_cube.side, "lr": r_cube.side,
                            "D": ddist, "value": val, "bound": bound})


def decay_slope_fit(kernel: KernelSpec, separations: Sequence[float],
                    pair_gap: float = 1e-3) -> float:
    """Fitted log-log decay slope of a mean-zero dipole against distance.

    A two-atom mean-zero bump is paired against a far single atom across the
    given separations; the regression slope of log |<psi, T phi>| against
    log(distance) estimates -(d + alpha).
    """
    values = []
    for dist in separations:
        positions = np.array([[0.0], [pair_gap], [dist]])
        mu = AtomicMeasure(1, kernel.d, positions, np.ones(3))
        op = DiscreteOperator(kernel, mu)
        phi_vals = np.array([1.0, -1.0, 0.0])
        psi_vals = np.array([0.0, 0.0, 1.0])
        values.append(abs(op.matrix_element(psi_vals, phi_vals)))
    logs = np.log(np.asarray(values))
    logd = np.log(np.asarray(separations, dtype=float))
    slope = np.polyfit(logd, logs, 1)[0]
    return float(slope)


# =============================================================================
# Paraproduct
# =============================================================================

def paraproduct_smap(ctx_f: MartingaleContext, other: GridIndex,
                     params: DyadicParams) -> Dict[Tuple, Optional[Cube]]:
    """The stopping map Q -> S(Q) of the deeply nested interaction.

    chi(Q, R) = 1 when Q is R-good, Q inside R, and l(Q) < 2^-r l(R); it is
    monotone along the ancestor chain of R, so when any R qualifies there is
    a unique minimal one, and S(Q) is its child containing Q (single-child
    containment is the nesting geometry of good cubes).  Cubes with no
    qualifying R map to None.
    """
    classifier = PairClassifier(params)
    sys2 = other.system
    out: Dict[Tuple, Optional[Cube]] = {}
    for k in ctx_f.diff_scales:
        for q_cube in ctx_f.index.occupied(k):
            chain = _containing_chain(q_cube, sys2)
            flags = [(r, _chi(classifier, params, q_cube, r)) for r in chain]
            qualifying = [r for r, ok in flags if ok]
            # monotonicity along the chain: once 1, always 1
            seen = False
            for r, ok in flags:
                if seen and not ok:
                    raise GeometryError("stopping indicator is not monotone "
                                        f"along the chain of {q_cube.key}")
                seen = seen or ok
            if not qualifying:
                out[q_cube.key] = None
                continue
            r_min = qualifying[0]
            host = [c for c in r_min.children() if contains(c, q_cube)]
            if len(host) != 1:
                raise GeometryError(f"no single child of {r_min.key} hosts "
                                    f"{q_cube.key}")
            out[q_cube.key] = host[0]
    return out


def _containing_chain(q_cube: Cube, sys2: DyadicSystem) -> List[Cube]:
    chain = []
    for j in range(q_cube.scale, sys2.s + 1):
        r = sys2.cube_containing(q_cube.center, j)
        if contains(r, q_cube):
            chain.append(r)
    return chain


def _chi(classifier: PairClassifier, params: DyadicParams, q_cube: Cube,
         r_cube: Cube) -> bool:
    if not q_cube.side < 2.0 ** (-params.r) * r_cube.side:
        return False
    if not contains(r_cube, q_cube):
        return False
    return not classifier.is_bad(q_cube, r_cube)


def paraproduct_apply(op: DiscreteOperator, ctx_f: MartingaleContext,
                      ctx_g: MartingaleContext, g: np.ndarray,
                      smap: Dict[Tuple, Optional[Cube]]) -> np.ndarray:
    """Assemble Pi g = sum_Q <g>_S / <b>_S (D_Q)^* (T^* b_{S^a})."""
    mu = op.measure
    g = np.asarray(g, dtype=float)
    out = np.zeros(mu.atom_count) if g.ndim == 1 else np.zeros_like(g)
    cache: Dict[Tuple, np.ndarray] = {}
    for k in ctx_f.diff_scales:
        for q_cube in ctx_f.index.occupied(k):
            s_cube = smap.get(q_cube.key)
            if s_cube is None:
                continue
            atoms_s = ctx_g.index.atoms_of(s_cube)
            coeff = _paraproduct_coeff(ctx_g, s_cube, atoms_s, g)
            if coeff is None:
                continue
            anc = ctx_g.system.cube(*ctx_g.layers.ancestor[s_cube.key])
            h = cache.get(anc.key)
            if h is None:
                h = op.adjoint_apply(ctx_g.accretive.as_function(ctx_g.index, anc))
                cache[anc.key] = h
            atoms_q = ctx_f.atoms_of(q_cube)
            localized = np.zeros(mu.atom_count)
            localized[atoms_q] = h[atoms_q]
            term = adapted_diff_adjoint(ctx_f, localized, q_cube.scale)
            if g.ndim == 1:
                out += coeff * term
            else:
                out += term[:, None] * coeff[None, :]
    return out


def _paraproduct_coeff(ctx_g, s_cube, atoms_s, g):
    mu = ctx_g.measure
    mass = float(np.sum(mu.weights[atoms_s]))
    if mass == 0.0:
        return None
    anc = ctx_g.system.cube(*ctx_g.layers.ancestor[s_cube.key])
    b_anc = ctx_g.accretive.as_function(ctx_g.index, anc)
    mean_b = float(np.dot(mu.weights[atoms_s], b_anc[atoms_s])) / mass
    if g.ndim == 1:
        mean_g = float(np.dot(mu.weights[atoms_s], g[atoms_s])) / mass
        return mean_g / mean_b
    mean_g = (mu.weights[atoms_s] @ g[atoms_s]) / mass
    return mean_g / mean_b


def paraproduct_direct_pairing(op: DiscreteOperator, ctx_f: MartingaleContext,
                               ctx_g: MartingaleContext, g: np.ndarray,
                               f: np.ndarray,
                               smap: Dict[Tuple, Optional[Cube]]) -> float:
    """The double sum sum_Q coeff(S(Q)) <T^* b_{S^a}, D_Q f>, term by term."""
    mu = op.measure
    total = 0.0
    g = np.asarray(g, dtype=float)
    f = np.asarray(f, dtype=float)
    for k in ctx_f.diff_scales:
        for q_cube in ctx_f.index.occupied(k):
            s_cube = smap.get(q_cube.key)
            if s_cube is None:
                continue
            atoms_s = ctx_g.index.atoms_of(s_cube)
            coeff = _paraproduct_coeff(ctx_g, s_cube, atoms_s, g)
            if coeff is None:
                continue
            anc = ctx_g.system.cube(*ctx_g.layers.ancestor[s_cube.key])
            h = op.adjoint_apply(ctx_g.accretive.as_function(ctx_g.index, anc))
            dqf = adapted_diff_local(ctx_f, f, q_cube)
            if f.ndim == 1:
                total += coeff * pair(mu, h, dqf)
            else:
                total += float(np.sum(coeff * (mu.weights[:, None] * dqf
                                               * h[:, None]).sum(axis=0)))
    return total


# =============================================================================
# Comparable pairs: collar partition
# =============================================================================

@dataclass
class CollarRegions:
    """Atom index sets of the boundary-collar partition of a comparable pair."""

    q_child: Cube
    r_child: Cube
    eta: float
    delta_q: np.ndarray
    q_sep: np.ndarray
    q_boundary: np.ndarray
    delta_r: np.ndarray
    r_sep: np.ndarray
    r_boundary: np.ndarray


def collar_membership(points: np.ndarray, cube: Cube, eta: float) -> np.ndarray:
    """Membership of points in the collar (1+eta)Q minus (1-eta)Q.

    The outer inflation is closed and the inner deflation is open, so the
    collar is a closed annular neighborhood of the boundary of width eta*l/2
    on each side.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    center = cube.center
    half = cube.side / 2.0
    dist = np.max(np.abs(pts - center[None, :]), axis=1)
    return (dist <= (1.0 + eta) * half) & ~(dist < (1.0 - eta) * half)


def comparable_partition(mu: AtomicMeasure, q_cube: Cube, r_cube: Cube,
                         i: int, j: int, eta: float,
                         params: DyadicParams) -> CollarRegions:
    """The three-way collar split of one child pair of comparable cubes.

    Both child cubes split into (shared-core, separated, boundary-collar)
    pieces, each a disjoint union recovering the child exactly; the pair must
    be comparable (matching sizes within 2^r and touching within l(Q)).
    """
    if not (2.0 ** (-params.r) * r_cube.side <= q_cube.side <= r_cube.side
            and set_distance(q_cube, r_cube) < q_cube.side):
        raise ValueError("cubes are not comparable")
    qi = q_cube.children()[i]
    rj = r_cube.children()[j]
    pts = mu.positions
    in_qi = qi.contains_points(pts)
    in_rj = rj.contains_points(pts)
    collar_rj = collar_membership(pts, rj, eta)
    collar_qi = collar_membership(pts, qi, eta)

    q_boundary = in_qi & collar_rj
    delta_q = in_qi & in_rj & ~q_boundary
    q_sep = in_qi & ~q_boundary & ~(in_qi & in_rj)
    r_boundary = in_rj & collar_qi
    delta_r = in_qi & in_rj & ~r_boundary
    r_sep = in_rj & ~r_boundary & ~(in_qi & in_rj)

    def idx(mask):
        return np.where(mask)[0]

    return CollarRegions(qi, rj, eta, idx(delta_q), idx(q_sep), idx(q_boundary),
                         idx(delta_r), idx(r_sep), idx(r_boundary))


def comparable_msum(op: DiscreteOperator, psi: np.ndarray, phi_vals: np.ndarray,
                    regions: CollarRegions) -> dict:
    """The five collar matrix elements and their exact recombination.

    M1 pairs the separated part of the R-child against the whole Q-child;
    M2 the R-collar against the whole Q-child; M3 the shared cores; M4 the
    R-core against the Q-collar; M5 the R-core against the separated part of
    the Q-child.  Their sum telescopes back to the full child pairing.
    """
    mu = op.measure
    n = mu.atom_count

    def restrict(values, atoms):
        out = np.zeros(n)
        out[atoms] = np.asarray(values, dtype=float)[atoms]
        return out

    in_qi = np.where(regions.q_child.contains_points(mu.positions))[0]
    in_rj = np.where(regions.r_child.contains_points(mu.positions))[0]
    psi_rj = restrict(psi, in_rj)
    phi_qi = restrict(phi_vals, in_qi)

    m1 = op.matrix_element(restrict(psi, regions.r_sep), phi_qi)
    m2 = op.matrix_element(restrict(psi, regions.r_boundary), phi_qi)
    m3 = op.matrix_element(restrict(psi, regions.delta_r),
                           restrict(phi_vals, regions.delta_q))
    m4 = op.matrix_element(restrict(psi, regions.delta_r),
                           restrict(phi_vals, regions.q_boundary))
    m5 = op.matrix_element(restrict(psi, regions.delta_r),
                           restrict(phi_vals, regions.q_sep))
    full = op.matrix_element(psi_rj, phi_qi)
    parts = m1 + m2 + m3 + m4 + m5
    return {"m": (m1, m2, m3, m4, m5), "sum": parts, "full": full,
            "residual": abs(parts - full)}


# =============================================================================
# Boundary collar probability
# =============================================================================

def boundary_probability(dimension: int, r: int, eta: float, k_scale: int,
                         trials: int, seed: int) -> Tuple[float, float]:
    """Monte-Carlo P[x lies in the scale-k boundary collar of a random grid].

    The collar at scale k is the union over the r+1 scales below k of the
    eta-collars of all grid cubes; for a fixed point only its position inside
    the random cell matters, so the event is computed in closed form per
    scale and trial.  The linear envelope 4N(r+1)eta dominates the union
    bound N(r+1)eta with room for discretization.
    """
    if not (0.0 < eta < 0.25):
        raise ValueError("eta must lie in (0, 1/4)")
    if trials < 10_000:
        raise ValueError("need at least 1e4 trials")
    rng = rng_for(seed, f"collar:{dimension}:{r}:{eta}")
    guard = math.ceil(math.log2(1.0 / eta)) + 8
    base = k_scale - r - 1 - guard
    shift = rng.uniform(0.0, 2.0 ** base, size=(trials, dimension))
    hit = np.zeros(trials, dtype=bool)
    for m in range(base, k_scale):
        period = 2.0 ** m
        if m >= k_scale - r - 1:
            pos = (-shift) % period
            near = np.minimum(pos, period - pos) <= eta * period / 2.0
            hit |= np.any(near, axis=1)
        shift = shift + rng.integers(0, 2, size=(trials, dimension)) * period
    p_hat = float(np.mean(hit))
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-30) / trials)
    return p_hat, stderr
