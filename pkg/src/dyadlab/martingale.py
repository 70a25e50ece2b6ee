"""Adapted martingale calculus on an atomic measure.

Plain conditional expectations average over the cubes of one scale; the
adapted versions weight them by the stopped test function

    b_k = sum_{Q in D_k} 1_Q b_{Q^a},    E^a_k f = b_k E_k f / E_k b_k,

whose averages E_k b_k stay >= delta^2 in modulus at every atom because the
ancestor map only stops where the averaged test function degenerates.  The
adapted differences D^a_k = E^a_{k-1} - E^a_k telescope exactly over the
finite window: at the isolation scale every atom sits alone in its cube, so
E^a_{k_min} f = f atomwise and the reconstruction has no truncation error.

All operators here are scalar multipliers combined with cube averaging, so
they act on lattice-valued functions coordinatewise; each one can also be
materialized as an explicit matrix on atom space, which makes adjointness a
literal weighted-transpose statement and keeps every identity testable at
machine precision.

The set {b_{k-1} != b_k} is by definition the union of the scale-(k-1) layer
cubes other than the top cube (not the pointwise disequality, which could
accidentally fail at individual atoms); the correction function

    omega_k = 1_{that set} (b_k / E_k b_k  -  b_{k-1} E_{k-1} b_k
                            / (E_{k-1} b_{k-1} E_k b_k))

measures the failure of D^a_k to be a projection: (D^a_k)^2 = D^a_k +
omega_k E_k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from dyadlab.accretive import AccretiveSystem, Layers
from dyadlab.grid import Cube, GridIndex
from dyadlab.measure import AtomicMeasure

__all__ = [
    "MartingaleContext",
    "expectation",
    "diff",
    "local_expectation",
    "local_diff",
    "adapted_expectation",
    "adapted_diff",
    "adapted_diff_local",
    "phi",
    "omega",
    "omega_local",
    "adapted_adjoint_expectation",
    "adapted_diff_adjoint",
    "layer_expectation",
    "reconstruct",
    "expectation_matrix",
    "adapted_expectation_matrix",
    "adapted_diff_matrix",
    "weighted_adjoint",
]


class BrokenAccretivityError(RuntimeError):
    """Raised when |E_k b_k| dips below delta^2 / 2 at some atom."""


# =============================================================================
# Context
# =============================================================================

class MartingaleContext:
    """Caches per-scale cube assignments, stopped test functions and layer sets.

    Parameters
    ----------
    mu, index, system_b, layers:
        The measure, its grid index, the accretive system on the occupied
        cubes, and the stopping layers built from it.
    """

    def __init__(self, mu: AtomicMeasure, index: GridIndex,
                 system_b: AccretiveSystem, layers: Layers):
        self.measure = mu
        self.index = index
        self.accretive = system_b
        self.layers = layers
        self.system = index.system
        self.delta = system_b.delta

        n = mu.atom_count
        sys = self.system
        self._cube_id: Dict[int, np.ndarray] = {}
        self._cube_atoms: Dict[int, List[np.ndarray]] = {}
        self._cube_keys: Dict[int, List] = {}
        self._cube_mass: Dict[int, np.ndarray] = {}
        self.b_adapted: Dict[int, np.ndarray] = {}
        self.eb_adapted: Dict[int, np.ndarray] = {}
        self.chi: Dict[int, np.ndarray] = {}

        top_key = sys.top_cube().key
        layer_set = {key for gen in layers.generations for key in gen}
        for k in sys.scales:
            keys = index.occupied_keys(k)
            self._cube_keys[k] = keys
            atom_lists = [index.atoms_of(sys.cube(k, m)) for m in keys]
            self._cube_atoms[k] = atom_lists
            cid = np.empty(n, dtype=np.int64)
            for i, atoms in enumerate(atom_lists):
                cid[atoms] = i
            self._cube_id[k] = cid
            self._cube_mass[k] = np.array(
                [float(np.sum(mu.weights[a])) for a in atom_lists])

            b_k = np.empty(n)
            chi_k = np.zeros(n, dtype=bool)
            for i, m in enumerate(keys):
                cube = sys.cube(k, m)
                anc_key = layers.ancestor[cube.key]
                anc = sys.cube(*anc_key)
                b_anc = system_b.as_function(index, anc)
                atoms = atom_lists[i]
                b_k[atoms] = b_anc[atoms]
                if cube.key in layer_set and cube.key != top_key:
                    chi_k[atoms] = True
            self.b_adapted[k] = b_k
            self.eb_adapted[k] = self._average_by_cube(b_k, k)
            self.chi[k] = chi_k
            self._guard(k)

    # -- internals ---------------------------------------------------------
    def _average_by_cube(self, values: np.ndarray, k: int) -> np.ndarray:
        w = self.measure.weights
        cid = self._cube_id[k]
        mass = self._cube_mass[k]
        if values.ndim == 1:
            sums = np.bincount(cid, weights=w * values, minlength=mass.size)
            return (sums / mass)[cid]
        out = np.empty_like(values)
        for j in range(values.shape[1]):
            sums = np.bincount(cid, weights=w * values[:, j], minlength=mass.size)
            out[:, j] = (sums / mass)[cid]
        return out

    def _guard(self, k: int) -> None:
        floor = np.min(np.abs(self.eb_adapted[k]))
        if floor < self.delta ** 2 / 2.0:
            raise BrokenAccretivityError(
                f"|E_k b_k| = {floor:.3e} < delta^2/2 at scale {k}; "
                "the stopping construction is broken")

    # -- conveniences --------------------------------------------------------
    @property
    def scales(self):
        return self.system.scales

    @property
    def diff_scales(self):
        """Scales k where D_k and D^a_k act: (k_min, s]."""
        return range(self.system.k_min + 1, self.system.s + 1)

    def atoms_of(self, cube: Cube) -> np.ndarray:
        return self.index.atoms_of(cube)

    def chi_mask(self, k: int) -> np.ndarray:
        """Indicator of {b_k != b_{k+1}}: layer cubes at scale k, top excluded."""
        return self.chi[k]


# =============================================================================
# Plain martingale operators
# =============================================================================

def expectation(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """E_k: average over each scale-k cube, constant on its atoms."""
    return ctx._average_by_cube(np.asarray(values, dtype=float), k)


def diff(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """D_k = E_{k-1} - E_k."""
    v = np.asarray(values, dtype=float)
    return expectation(ctx, v, k - 1) - expectation(ctx, v, k)


def local_expectation(ctx: MartingaleContext, values: np.ndarray, cube: Cube) -> np.ndarray:
    out = np.zeros_like(np.asarray(values, dtype=float))
    atoms = ctx.atoms_of(cube)
    full = expectation(ctx, values, cube.scale)
    out[atoms] = full[atoms]
    return out


def local_diff(ctx: MartingaleContext, values: np.ndarray, cube: Cube) -> np.ndarray:
    out = np.zeros_like(np.asarray(values, dtype=float))
    atoms = ctx.atoms_of(cube)
    full = diff(ctx, values, cube.scale)
    out[atoms] = full[atoms]
    return out


# =============================================================================
# Adapted operators
# =============================================================================

def _mult(scalar: np.ndarray, values: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return scalar * values
    return scalar[:, None] * values


def adapted_expectation(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """E^a_k f = b_k E_k f / E_k b_k (coordinatewise for lattice values)."""
    v = np.asarray(values, dtype=float)
    ratio = ctx.b_adapted[k] / ctx.eb_adapted[k]
    return _mult(ratio, expectation(ctx, v, k))


def adapted_diff(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """D^a_k f = E^a_{k-1} f - E^a_k f."""
    v = np.asarray(values, dtype=float)
    return adapted_expectation(ctx, v, k - 1) - adapted_expectation(ctx, v, k)


def adapted_diff_local(ctx: MartingaleContext, values: np.ndarray, cube: Cube) -> np.ndarray:
    """D^a_Q f = 1_Q D^a_k f for Q at scale k."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    atoms = ctx.atoms_of(cube)
    full = adapted_diff(ctx, v, cube.scale)
    out[atoms] = full[atoms]
    return out


def phi(ctx: MartingaleContext, cube: Cube, i: int) -> np.ndarray:
    """The frame function of the child expansion of D^a_Q.

    phi_{Q,i} = b_{Q_i^a} / <b_{Q_i^a}>_{Q_i} 1_{Q_i}
                - (mu(Q_i) / mu(Q)) b_{Q^a} / <b_{Q^a}>_Q 1_Q,

    identically zero when the child carries no mass.  It is supported on Q,
    has exact mean zero, and |phi| <= 2 / delta^2 pointwise.
    """
    mu = ctx.measure
    index = ctx.index
    sys = ctx.system
    child = cube.children()[i]
    out = np.zeros(mu.atom_count)
    atoms_child = index.atoms_of(child)
    if atoms_child.size == 0:
        return out
    atoms_cube = index.atoms_of(cube)
    mass_child = float(np.sum(mu.weights[atoms_child]))
    mass_cube = float(np.sum(mu.weights[atoms_cube]))

    anc_child = sys.cube(*ctx.layers.ancestor[child.key])
    anc_cube = sys.cube(*ctx.layers.ancestor[cube.key])
    b_child = ctx.accretive.as_function(index, anc_child)
    b_cube = ctx.accretive.as_function(index, anc_cube)
    mean_child = float(np.dot(mu.weights[atoms_child], b_child[atoms_child])) / mass_child
    mean_cube = float(np.dot(mu.weights[atoms_cube], b_cube[atoms_cube])) / mass_cube

    out[atoms_child] += b_child[atoms_child] / mean_child
    out[atoms_cube] -= (mass_child / mass_cube) * b_cube[atoms_cube] / mean_cube
    return out


def omega(ctx: MartingaleContext, k: int) -> np.ndarray:
    """The projection defect omega_k of (D^a_k)^2 = D^a_k + omega_k E_k."""
    chi = ctx.chi_mask(k - 1).astype(float)
    bk, ebk = ctx.b_adapted[k], ctx.eb_adapted[k]
    bk1, ebk1 = ctx.b_adapted[k - 1], ctx.eb_adapted[k - 1]
    e_prev_bk = expectation(ctx, bk, k - 1)
    return chi * (bk / ebk - (bk1 / ebk1) * (e_prev_bk / ebk))


def omega_local(ctx: MartingaleContext, cube: Cube, i: Optional[int] = None) -> np.ndarray:
    """omega_Q = 1_Q omega_k, or its restriction to the i-th child."""
    full = omega(ctx, cube.scale)
    out = np.zeros_like(full)
    target = cube if i is None else cube.children()[i]
    atoms = ctx.atoms_of(target)
    out[atoms] = full[atoms]
    return out


def adapted_adjoint_expectation(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """(E^a_k)^* g = E_k(b_k g) / E_k b_k."""
    v = np.asarray(values, dtype=float)
    return _mult(1.0 / ctx.eb_adapted[k], expectation(ctx, _mult(ctx.b_adapted[k], v), k))


def adapted_diff_adjoint(ctx: MartingaleContext, values: np.ndarray, k: int) -> np.ndarray:
    """(D^a_k)^* g = (E^a_{k-1})^* g - (E^a_k)^* g."""
    v = np.asarray(values, dtype=float)
    return (adapted_adjoint_expectation(ctx, v, k - 1)
            - adapted_adjoint_expectation(ctx, v, k))


def layer_expectation(ctx: MartingaleContext, values: np.ndarray, n: int) -> np.ndarray:
    """Sum of local expectations over the generation-n layer cubes."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    if n >= len(ctx.layers.generations):
        return out
    for key in ctx.layers.generations[n]:
        cube = ctx.system.cube(*key)
        out += local_expectation(ctx, v, cube)
    return out


# =============================================================================
# Reconstruction
# =============================================================================

@dataclass
class Reconstruction:
    top_term: np.ndarray
    diff_terms: Dict[int, np.ndarray]
    residual: float

    @property
    def diff_sum(self) -> np.ndarray:
        return sum(self.diff_terms.values())


def reconstruct(ctx: MartingaleContext, values: np.ndarray) -> Reconstruction:
    """Telescoping expansion f = E^a_s f + sum_{k_min < k <= s} D^a_k f.

    The top term equals b_{Q_0} <f> / <b_{Q_0}> at every atom, and the finite
    sum is exact because atoms are isolated at the bottom scale.  Residual is
    reported in the sup norm relative to ||f||_inf.
    """
    v = np.asarray(values, dtype=float)
    top = adapted_expectation(ctx, v, ctx.system.s)
    diffs = {k: adapted_diff(ctx, v, k) for k in ctx.diff_scales}
    total = top + sum(diffs.values())
    scale = float(np.max(np.abs(v))) or 1.0
    residual = float(np.max(np.abs(v - total))) / scale
    return Reconstruction(top, diffs, residual)


# =============================================================================
# Matrix realizations (identity tests, exact adjoints)
# =============================================================================

def expectation_matrix(ctx: MartingaleContext, k: int) -> np.ndarray:
    """Dense matrix of E_k on atom space: block-constant row averages."""
    n = ctx.measure.atom_count
    out = np.zeros((n, n))
    w = ctx.measure.weights
    for atoms in ctx._cube_atoms[k]:
        mass = float(np.sum(w[atoms]))
        out[np.ix_(atoms, atoms)] = w[atoms][None, :] / mass
    return out


def adapted_expectation_matrix(ctx: MartingaleContext, k: int) -> np.ndarray:
    ratio = ctx.b_adapted[k] / ctx.eb_adapted[k]
    return ratio[:, None] * expectation_matrix(ctx, k)


def adapted_diff_matrix(ctx: MartingaleContext, k: int) -> np.ndarray:
    return adapted_expectation_matrix(ctx, k - 1) - adapted_expectation_matrix(ctx, k)


def weighted_adjoint(mu: AtomicMeasure, matrix: np.ndarray) -> np.ndarray:
    """Adjoint with respect to the mu-weighted pairing: W^-1 M^T W."""
    w = mu.weights
    return (matrix.T * w[None, :]) / w[:, None] * 1.0
