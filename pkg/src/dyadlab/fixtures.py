"""Standard fixture battery shared by the harness and the test suite.

The battery measure keeps its atoms in tight clusters around coordinates
whose binary expansions stay away from every dyadic boundary (thirds), on a
fine jittered grid so that atoms separate at a moderate dyadic scale.  This
serves two purposes at once: a small growth exponent makes the admissible
shift-geometry parameter gamma as large as its constraints allow, and the
persistent central position keeps a healthy population of cubes good at
every tested r, so the separated / deeply nested / comparable classes are
all nonvacuously exercised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dyadlab._seeds import rng_for
from dyadlab.accretive import AccretiveSystem, Layers, build_layers, generate_accretive
from dyadlab.grid import DyadicParams, DyadicSystem, GridIndex, build_random_system, \
    locate, standard_system
from dyadlab.martingale import MartingaleContext
from dyadlab.measure import AtomicMeasure, LatticeSpace, generate_random_measure, \
    growth_check, lp_norm

__all__ = [
    "battery_params",
    "battery_measure",
    "FixturePair",
    "build_fixture_pair",
    "random_ensemble",
    "BATTERY_D",
    "BATTERY_GAMMA",
]

BATTERY_D = 0.25
BATTERY_GAMMA = 0.4


def battery_params(r: int, gamma: float = BATTERY_GAMMA, alpha: float = 1.0,
                   d: float = BATTERY_D) -> DyadicParams:
    return DyadicParams(gamma=gamma, r=r, alpha=alpha, d=d)


def battery_measure(seed: int, dimension: int, atom_count: int,
                    d: float = BATTERY_D, spread_scale: int = -6) -> AtomicMeasure:
    """Clustered measure around per-coordinate thirds, growth-normalized.

    Atoms are split between cluster centers with coordinates in {1/3, 2/3},
    then jittered on a dyadic cell grid inside a window of side
    2^spread_scale per cluster.  The cell grid is the coarsest one holding a
    cluster's share of atoms, which keeps the isolation scale (and with it
    the window length) as high as the atom count allows.
    """
    rng = rng_for(seed, f"battery:{dimension}:{atom_count}")
    centers = np.array([1.0 / 3.0, 2.0 / 3.0])
    combos = [np.array(c) for c in np.stack(np.meshgrid(
        *([centers] * dimension), indexing="ij"), axis=-1).reshape(-1, dimension)]
    per = max(1, atom_count // len(combos))
    counts = [per] * len(combos)
    for i in range(atom_count - per * len(combos)):
        counts[i % len(combos)] += 1
    cells_per_axis = 1
    while cells_per_axis ** dimension < max(counts):
        cells_per_axis *= 2
    grid_scale = spread_scale - int(math.log2(cells_per_axis))
    if grid_scale < -22:
        raise ValueError("atom count too large for the battery cluster layout")
    step = 2.0 ** grid_scale
    positions = []
    for center, cnt in zip(combos, counts):
        if cnt == 0:
            continue
        chosen = rng.choice(cells_per_axis ** dimension, size=cnt, replace=False)
        idx = np.stack(np.unravel_index(chosen, (cells_per_axis,) * dimension), axis=1)
        jitter = rng.uniform(0.25, 0.75, size=idx.shape)
        positions.append(center[None, :] + (idx + jitter) * step)
    pos = np.concatenate(positions, axis=0)
    mu = AtomicMeasure(dimension, d, pos, rng.uniform(0.5, 1.5, size=pos.shape[0]))
    return mu.scaled_weights(1.0 / growth_check(mu).c_gr)


@dataclass
class FixturePair:
    """A full two-system fixture: measure, grids, accretive contexts."""

    measure: AtomicMeasure
    params: DyadicParams
    ctx_f: MartingaleContext
    ctx_g: MartingaleContext

    @property
    def index_f(self) -> GridIndex:
        return self.ctx_f.index

    @property
    def index_g(self) -> GridIndex:
        return self.ctx_g.index


def build_fixture_pair(seed: int, mu: AtomicMeasure, params: DyadicParams,
                       delta: float, style: str = "signed-perturbation",
                       grids: str = "standard",
                       window: Optional[Tuple[int, int]] = None) -> FixturePair:
    """Two accretive martingale contexts over a pair of dyadic systems.

    grids = "standard" uses the unshifted lattice for both systems (the
    deterministic geometry probe with quantized boundary distances);
    "random" draws independent shift sequences for the two systems.
    """
    if grids == "standard":
        sys_f = standard_system(mu, params, window=window)
        sys_g = standard_system(mu, params, window=window)
    elif grids == "random":
        sys_f = build_random_system(seed * 2 + 1, mu, params, window=window)
        sys_g = build_random_system(seed * 2 + 2, mu, params, window=window)
    else:
        raise ValueError("grids must be 'standard' or 'random'")
    gi_f, gi_g = locate(mu, sys_f), locate(mu, sys_g)
    b_f = generate_accretive(seed * 3 + 1, mu, gi_f, delta, style)
    b_g = generate_accretive(seed * 3 + 2, mu, gi_g, delta, style)
    ctx_f = MartingaleContext(mu, gi_f, b_f, build_layers(b_f, mu, gi_f))
    ctx_g = MartingaleContext(mu, gi_g, b_g, build_layers(b_g, mu, gi_g))
    return FixturePair(mu, params, ctx_f, ctx_g)


def random_ensemble(seed: int, mu: AtomicMeasure, count: int, p: float,
                    space: Optional[LatticeSpace] = None) -> List[np.ndarray]:
    """Random functions normalized to unit L^p norm (lattice-valued if given)."""
    rng = rng_for(seed, f"ensemble:{count}:{p}")
    out = []
    for _ in range(count):
        if space is None or space.m == 1:
            f = rng.normal(size=mu.atom_count)
            rho = 2.0
        else:
            f = rng.normal(size=(mu.atom_count, space.m))
            rho = space.rho
        nrm = lp_norm(mu, f, p, rho=rho)
        out.append(f / nrm)
    return out
