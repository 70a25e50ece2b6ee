"""Randomly shifted dyadic systems over a finite scale window.

A system is parametrized by per-scale binary shifts: the grid at scale k is
the standard grid 2^k(m + [0,1)^N) translated by x_k = sum_{j<k} beta_j 2^j
with beta_j in {0,1}^N.  Summing binary digits guarantees that every cube of
scale k-1 sits inside exactly one cube of scale k for any shift choice, so
the shifted grids form a genuine dyadic lattice.

The window [k_min, s] is finite: shifts below k_min are fixed to zero (they
would only translate the whole picture at scales finer than any structure),
and the top cube at scale s contains the support of the measure.

Good and bad cubes: a cube Q of one system is n-bad with respect to another
system when some much larger cube R of the other system has its boundary
within distance l(Q)^gamma l(R)^(1-gamma) of Q; the probability of this decays
geometrically in the scale gap, which the Monte-Carlo estimator here checks
against the explicit envelope 2N 2^(-(r v n) gamma) / (1 - 2^(-gamma)).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from dyadlab._seeds import rng_for
from dyadlab.measure import AtomicMeasure

__all__ = [
    "DyadicParams",
    "theta",
    "Cube",
    "DyadicSystem",
    "GridIndex",
    "BadnessScan",
    "standard_system",
    "build_random_system",
    "locate",
    "long_distance",
    "set_distance",
    "boundary_distance",
    "contains",
    "badness_scan",
    "is_n_bad",
    "is_cube_bad_for",
    "bad_probability_mc",
    "bad_probability_bound",
    "dumps_system",
    "loads_system",
]


# =============================================================================
# Parameters
# =============================================================================

@dataclass(frozen=True)
class DyadicParams:
    """Geometry parameters (gamma, r) tied to kernel data (alpha, d).

    gamma must satisfy both d*gamma/(1-gamma) <= alpha/4 and
    gamma <= alpha / (2 (d + alpha)); invalid combinations are rejected.
    """

    gamma: float
    r: int
    alpha: float
    d: float

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.r < 1 or int(self.r) != self.r:
            raise ValueError("r must be a positive integer")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        eps = 1e-12
        if self.d * self.gamma / (1.0 - self.gamma) > self.alpha / 4.0 + eps:
            raise ValueError("gamma violates d*gamma/(1-gamma) <= alpha/4")
        if self.gamma > self.alpha / (2.0 * (self.d + self.alpha)) + eps:
            raise ValueError("gamma violates gamma <= alpha/(2(d+alpha))")


def theta(j: int, params: DyadicParams) -> int:
    """ceil((gamma*j + r) / (1 - gamma)) with exact rational arithmetic."""
    if j < 0:
        raise ValueError("j must be nonnegative")
    g = Fraction(params.gamma)
    value = (g * j + params.r) / (1 - g)
    return int(math.ceil(value))


# =============================================================================
# Systems and cubes
# =============================================================================

@dataclass(frozen=True)
class DyadicSystem:
    """A shifted dyadic lattice over the scale window [k_min, s]."""

    dimension: int
    k_min: int
    s: int
    betas: Tuple[Tuple[int, ...], ...]   # betas[j - k_min] in {0,1}^N, j in [k_min, s)
    top_index: Tuple[int, ...]           # index of the top cube Q_0 at scale s

    def __post_init__(self):
        if self.s < self.k_min:
            raise ValueError("window is empty")
        if len(self.betas) != self.s - self.k_min:
            raise ValueError("need one shift vector per scale in [k_min, s)")

    @property
    def scales(self) -> range:
        return range(self.k_min, self.s + 1)

    def shift(self, k: int) -> np.ndarray:
        """Cumulative shift x_k = sum_{k_min <= j < k} beta_j 2^j."""
        if k < self.k_min:
            return np.zeros(self.dimension)
        out = np.zeros(self.dimension)
        for j in range(self.k_min, min(k, self.s)):
            out += np.asarray(self.betas[j - self.k_min], dtype=float) * (2.0 ** j)
        return out

    def beta(self, j: int) -> np.ndarray:
        if j < self.k_min or j >= self.s:
            return np.zeros(self.dimension, dtype=int)
        return np.asarray(self.betas[j - self.k_min], dtype=int)

    # -- cube accessors --------------------------------------------------
    def cube(self, k: int, index: Iterable[int]) -> "Cube":
        return Cube(self, k, tuple(int(i) for i in index))

    def top_cube(self) -> "Cube":
        return self.cube(self.s, self.top_index)

    def cube_index_at(self, points: np.ndarray, k: int) -> np.ndarray:
        """Integer index of the scale-k cube containing each point (row)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.shift(k)[None, :]) / (2.0 ** k)).astype(np.int64)

    def cube_containing(self, point, k: int) -> "Cube":
        idx = self.cube_index_at(np.asarray(point, dtype=float)[None, :], k)[0]
        return self.cube(k, idx)


@dataclass(frozen=True)
class Cube:
    """A half-open dyadic cube: shift + 2^k (m + [0,1)^N)."""

    system: DyadicSystem
    scale: int
    index: Tuple[int, ...]

    @property
    def side(self) -> float:
        return 2.0 ** self.scale

    @property
    def lower(self) -> np.ndarray:
        m = np.asarray(self.index, dtype=float)
        return self.system.shift(self.scale) + self.side * m

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.side

    @property
    def center(self) -> np.ndarray:
        return self.lower + 0.5 * self.side

    @property
    def key(self) -> Tuple[int, Tuple[int, ...]]:
        return (self.scale, self.index)

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo, up = self.lower, self.upper
        return np.all((pts >= lo) & (pts < up), axis=1)

    def parent(self) -> "Cube":
        if self.scale >= self.system.s:
            raise ValueError("parent would leave the scale window")
        b = self.system.beta(self.scale)
        m = (np.asarray(self.index, dtype=np.int64) - b) >> 1
        return Cube(self.system, self.scale + 1, tuple(int(i) for i in m))

    def ancestor(self, n: int) -> "Cube":
        """The unique ancestor with side 2^n times this cube's side."""
        q = self
        for _ in range(n):
            q = q.parent()
        return q

    def children(self) -> List["Cube"]:
        if self.scale <= self.system.k_min:
            raise ValueError("children would leave the scale window")
        b = self.system.beta(self.scale - 1)
        base = 2 * np.asarray(self.index, dtype=np.int64) + b
        kids = []
        for corner in range(2 ** self.system.dimension):
            off = [(corner >> a) & 1 for a in range(self.system.dimension)]
            kids.append(Cube(self.system, self.scale - 1,
                             tuple(int(v) for v in base + np.asarray(off))))
        return kids

    def __repr__(self):
        return f"Cube(k={self.scale}, m={self.index})"


# -- cube geometry (product sets: everything reduces to per-axis intervals) --

def set_distance(q: Cube, r: Cube) -> float:
    """Sup-norm distance between the two cubes as point sets."""
    gaps = np.maximum(q.lower - r.upper, r.lower - q.upper)
    return float(max(0.0, np.max(gaps)))


def long_distance(q: Cube, r: Cube) -> float:
    """l(Q) + dist(Q, R) + l(R)."""
    return q.side + set_distance(q, r) + r.side


def contains(outer: Cube, inner: Cube) -> bool:
    return bool(np.all(inner.lower >= outer.lower) and np.all(inner.upper <= outer.upper))


def boundary_distance(q: Cube, r: Cube) -> float:
    """Sup-norm distance from Q to the boundary of R.

    Inside: the smallest face margin.  Outside: the plain set distance (the
    nearest point of R lies on its boundary).  Straddling: zero.
    """
    if contains(r, q):
        margins = np.minimum(q.lower - r.lower, r.upper - q.upper)
        return float(np.min(margins))
    d = set_distance(q, r)
    if d > 0.0:
        return d
    return 0.0


# =============================================================================
# Construction
# =============================================================================

def isolation_scale(mu: AtomicMeasure) -> int:
    """Largest k with 2^k <= min gap: every atom is alone in its scale-k cube."""
    gap = mu.min_gap()
    if math.isinf(gap):
        return 0
    return math.floor(math.log2(gap))


def standard_system(mu: AtomicMeasure, params: DyadicParams,
                    window: Optional[Tuple[int, int]] = None) -> DyadicSystem:
    """The unshifted grid (all shift digits zero) over a window covering mu."""
    k_min, s = window if window is not None else _default_window(mu, params)
    zero = tuple([tuple([0] * mu.dimension)] * (s - k_min))
    sys0 = DyadicSystem(mu.dimension, k_min, s, zero, tuple([0] * mu.dimension))
    top = _common_top_index(sys0, mu)
    if top is None:
        raise ValueError("support not contained in one top-scale cube; widen the window")
    return DyadicSystem(mu.dimension, k_min, s, zero, top)


def build_random_system(seed: int, mu: AtomicMeasure, params: DyadicParams,
                        window: Optional[Tuple[int, int]] = None,
                        max_retries: int = 64) -> DyadicSystem:
    """Random shifted system with i.i.d. uniform binary shift digits.

    If the support is split between top-scale cubes, the top scale is raised
    by one and the shifts are resampled; almost surely this terminates, and
    the retry budget turns the remaining probability-zero event into an error.
    """
    k_min, s = window if window is not None else _default_window(mu, params)
    if s - k_min < params.r + 4:
        raise ValueError("window must span at least r + 4 scales above the "
                         "atom-separation scale")
    rng = rng_for(seed, "dyadic-system")
    for attempt in range(max_retries):
        betas = tuple(tuple(int(b) for b in rng.integers(0, 2, size=mu.dimension))
                      for _ in range(k_min, s))
        sys0 = DyadicSystem(mu.dimension, k_min, s, betas, tuple([0] * mu.dimension))
        top = _common_top_index(sys0, mu)
        if top is not None:
            return DyadicSystem(mu.dimension, k_min, s, betas, top)
        s += 1
    raise RuntimeError("retry budget exhausted while seeking a covering top cube; "
                       "the window is misconfigured")


def _default_window(mu: AtomicMeasure, params: DyadicParams) -> Tuple[int, int]:
    k_min = isolation_scale(mu)
    s = max(1, math.ceil(math.log2(max(2.0 * max(mu.diameter(), 0.5), 1.0))) + 1)
    s = max(s, k_min + params.r + 4)
    return k_min, s


def _common_top_index(system: DyadicSystem, mu: AtomicMeasure) -> Optional[Tuple[int, ...]]:
    idx = system.cube_index_at(mu.positions, system.s)
    first = idx[0]
    if np.all(idx == first[None, :]):
        return tuple(int(i) for i in first)
    return None


# =============================================================================
# Locating atoms
# =============================================================================

class GridIndex:
    """Scale-by-scale partition of the atoms of a measure by a dyadic system."""

    def __init__(self, mu: AtomicMeasure, system: DyadicSystem):
        self.measure = mu
        self.system = system
        top = system.cube_index_at(mu.positions, system.s)
        if not np.all(top == np.asarray(system.top_index, dtype=np.int64)[None, :]):
            raise ValueError("atom outside the window top cube")
        self._atom_index: Dict[int, np.ndarray] = {}
        self._cubes: Dict[int, Dict[Tuple[int, ...], np.ndarray]] = {}
        for k in system.scales:
            idx = system.cube_index_at(mu.positions, k)
            self._atom_index[k] = idx
            buckets: Dict[Tuple[int, ...], List[int]] = {}
            for a in range(mu.atom_count):
                buckets.setdefault(tuple(int(i) for i in idx[a]), []).append(a)
            self._cubes[k] = {m: np.asarray(v, dtype=np.int64) for m, v in buckets.items()}

    # -- queries ----------------------------------------------------------
    def occupied(self, k: int) -> List[Cube]:
        return [self.system.cube(k, m) for m in sorted(self._cubes[k])]

    def occupied_keys(self, k: int) -> List[Tuple[int, ...]]:
        return sorted(self._cubes[k])

    def atoms_of(self, cube: Cube) -> np.ndarray:
        got = self._cubes.get(cube.scale, {}).get(cube.index)
        if got is None:
            return np.empty(0, dtype=np.int64)
        return got

    def mass_of(self, cube: Cube) -> float:
        atoms = self.atoms_of(cube)
        return float(np.sum(self.measure.weights[atoms]))

    def atom_cube_index(self, k: int) -> np.ndarray:
        return self._atom_index[k]

    def cube_of_atom(self, atom: int, k: int) -> Cube:
        return self.system.cube(k, self._atom_index[k][atom])

    def all_occupied(self) -> List[Cube]:
        out: List[Cube] = []
        for k in self.system.scales:
            out.extend(self.occupied(k))
        return out


def locate(mu: AtomicMeasure, system: DyadicSystem) -> GridIndex:
    return GridIndex(mu, system)


# =============================================================================
# Good and bad cubes
# =============================================================================

@dataclass(frozen=True)
class BadnessScan:
    bad: bool
    truncated: bool
    witness: Optional[Tuple[int, Tuple[int, ...]]]


def badness_scan(q: Cube, other: DyadicSystem, n: int, params: DyadicParams) -> BadnessScan:
    """Scan the other system for a witness making Q n-bad.

    A witness R satisfies l(Q) <= 2^-(n v r) l(R) and dist(Q, bd R) <=
    l(Q)^gamma l(R)^(1-gamma).  Only scales inside the finite window are
    scanned; if the window reaches fewer than max(n, r) + 2 scales above Q,
    the result is flagged as truncated.
    """
    gap = max(n, params.r)
    j_lo = q.scale + gap
    truncated = other.s - q.scale < gap + 2
    lq_gamma = q.side ** params.gamma
    for j in range(j_lo, other.s + 1):
        thr = lq_gamma * (2.0 ** j) ** (1.0 - params.gamma)
        for r_cube in _cubes_near(other, j, q.lower, q.upper, thr):
            if boundary_distance(q, r_cube) <= thr:
                return BadnessScan(True, truncated, (j, r_cube.index))
    return BadnessScan(False, truncated, None)


def _cubes_near(system: DyadicSystem, j: int, lower: np.ndarray, upper: np.ndarray,
                margin: float) -> Iterable[Cube]:
    lo_idx = np.floor((lower - margin - system.shift(j)) / (2.0 ** j)).astype(np.int64)
    hi_idx = np.floor((upper + margin - system.shift(j)) / (2.0 ** j)).astype(np.int64)
    ranges = [range(int(lo_idx[a]), int(hi_idx[a]) + 1) for a in range(system.dimension)]
    idx = np.stack(np.meshgrid(*[np.asarray(list(r)) for r in ranges], indexing="ij"),
                   axis=-1).reshape(-1, system.dimension)
    for m in idx:
        yield system.cube(j, tuple(int(v) for v in m))


def is_n_bad(q: Cube, other: DyadicSystem, n: int, params: DyadicParams) -> bool:
    return badness_scan(q, other, n, params).bad


def is_cube_bad_for(q: Cube, r: Cube, params: DyadicParams) -> bool:
    """Q in D is R-bad for R in the other system: (j - i - 1)-bad."""
    n = r.scale - q.scale - 1
    return is_n_bad(q, r.system, n, params)


# =============================================================================
# Monte-Carlo probability of badness
# =============================================================================

def bad_probability_bound(dimension: int, n: int, params: DyadicParams) -> float:
    """The envelope 2N 2^(-(r v n) gamma) / (1 - 2^(-gamma))."""
    g = params.gamma
    return 2.0 * dimension * 2.0 ** (-max(n, params.r) * g) / (1.0 - 2.0 ** (-g))


def bad_probability_mc(dimension: int, q_scale: int, n: int, params: DyadicParams,
                       trials: int, seed: int,
                       extra_scales: Optional[int] = None) -> Tuple[float, float]:
    """Monte-Carlo estimate of P[Q is n-bad] over independent random systems.

    The cube Q = [0, 2^q_scale)^N is fixed and the other system is resampled
    each trial.  Per scale j, the event "some R in the scale-j grid has its
    boundary within the collar threshold of Q" depends only on the position
    of Q inside its cell, which is computed in closed form, so no cubes are
    enumerated.  Scales are scanned from the badness gap up to a tail cutoff
    whose contribution is far below the Monte-Carlo standard error.
    """
    if trials < 1000:
        raise ValueError("need at least 1e3 trials")
    rng = rng_for(seed, f"badmc:{dimension}:{q_scale}:{n}")
    gap = max(n, params.r)
    if extra_scales is None:
        extra_scales = max(12, math.ceil(16.0 / params.gamma))
    side = 2.0 ** q_scale
    # low-order digits below the scanned scales act as one shared uniform
    # offset; binary digits build the nested shifts scale by scale
    base = q_scale
    offset = rng.uniform(0.0, 2.0 ** base, size=(trials, dimension))
    bad = np.zeros(trials, dtype=bool)
    shift = offset.copy()
    for j in range(base, q_scale + gap + extra_scales + 1):
        if j >= q_scale + gap:
            period = 2.0 ** j
            thr = side ** params.gamma * period ** (1.0 - params.gamma)
            pos = (-shift) % period
            straddle = pos + side > period
            margin = np.minimum(pos, period - pos - side)
            margin = np.where(straddle, 0.0, margin)
            bad |= np.any(margin <= thr, axis=1)
        shift = shift + rng.integers(0, 2, size=(trials, dimension)) * (2.0 ** j)
    p_hat = float(np.mean(bad))
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-30) / trials)
    return p_hat, stderr


# =============================================================================
# Dump / replay
# =============================================================================

def dumps_system(system: DyadicSystem) -> str:
    return json.dumps({
        "dimension": system.dimension,
        "k_min": system.k_min,
        "s": system.s,
        "betas": [list(b) for b in system.betas],
        "top_index": list(system.top_index),
    }, sort_keys=True, indent=2) + "\n"


def loads_system(text: str) -> DyadicSystem:
    data = json.loads(text)
    return DyadicSystem(
        dimension=int(data["dimension"]),
        k_min=int(data["k_min"]),
        s=int(data["s"]),
        betas=tuple(tuple(int(v) for v in b) for b in data["betas"]),
        top_index=tuple(int(v) for v in data["top_index"]),
    )
