import math

import numpy as np
import pytest

from dyadlab.measure import AtomicMeasure, generate_random_measure
from dyadlab.grid import (Cube, DyadicParams, DyadicSystem, bad_probability_bound,
                          bad_probability_mc, badness_scan, boundary_distance,
                          build_random_system, contains, dumps_system, is_n_bad,
                          loads_system, locate, long_distance, set_distance,
                          standard_system, theta)


def params_d1(gamma=0.2, r=2):
    return DyadicParams(gamma=gamma, r=r, alpha=1.0, d=1.0)


def params_small_d(gamma=0.4, r=2):
    return DyadicParams(gamma=gamma, r=r, alpha=1.0, d=0.25)


def tiny_measure():
    return AtomicMeasure(1, 1.0, np.array([[0.3], [0.7]]), np.array([0.1, 0.1]))


# =============================================================================
# Parameters
# =============================================================================

def test_param_constraints_rejected():
    with pytest.raises(ValueError):
        DyadicParams(gamma=0.5, r=2, alpha=1.0, d=1.0)   # gamma too large
    with pytest.raises(ValueError):
        DyadicParams(gamma=0.0, r=2, alpha=1.0, d=1.0)
    with pytest.raises(ValueError):
        DyadicParams(gamma=0.1, r=0, alpha=1.0, d=1.0)


def test_theta_values():
    p = DyadicParams(gamma=0.1, r=3, alpha=2.0, d=1.0)
    assert theta(0, p) == 4
    assert theta(9, p) == 5


def test_theta_monotone():
    p = params_d1()
    vals = [theta(j, p) for j in range(40)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


# =============================================================================
# Cube geometry
# =============================================================================

def test_long_distance_direct():
    sys0 = standard_system(tiny_measure(), params_d1(), window=(-4, 3))
    q = sys0.cube(0, (0,))        # [0, 1)
    r = sys0.cube(1, (2,))        # [4, 6)
    assert long_distance(q, r) == pytest.approx(6.0)


def test_long_distance_same_and_nested():
    sys0 = standard_system(tiny_measure(), params_d1(), window=(-4, 3))
    q = sys0.cube(0, (0,))
    assert long_distance(q, q) == pytest.approx(2.0)
    inner = sys0.cube(-2, (1,))   # [0.25, 0.5) inside [0, 1)
    assert contains(q, inner)
    assert long_distance(inner, q) == pytest.approx(0.25 + 1.0)


def test_boundary_distance_cases():
    sys0 = standard_system(tiny_measure(), params_d1(), window=(-4, 3))
    outer = sys0.cube(0, (0,))
    inner = sys0.cube(-2, (1,))
    assert boundary_distance(inner, outer) == pytest.approx(0.25)
    disjoint = sys0.cube(0, (3,))
    assert boundary_distance(outer, disjoint) == pytest.approx(2.0)
    straddler = sys0.cube(-1, (1,))   # [0.5, 1) touches nothing of [1, 2)?
    assert boundary_distance(straddler, sys0.cube(0, (1,))) == pytest.approx(0.0)


def test_parent_child_consistency_random_shifts():
    mu = generate_random_measure(9, 2, 1.0, 24, "uniform")
    system = build_random_system(5, mu, params_d1(), window=(-8, 2))
    for k in range(-7, 3):
        for m in [(0, 0), (3, -2), (-1, 5)]:
            cube = system.cube(k, m)
            parent = cube.parent()
            assert contains(parent, cube)
            kids = parent.children()
            assert sum(kid.key == cube.key for kid in kids) == 1
            # children tile the parent
            assert sum(np.prod(kid.upper - kid.lower) for kid in kids) == \
                pytest.approx(float(np.prod(parent.upper - parent.lower)))


def test_zero_shift_hook_gives_standard_grid():
    mu = tiny_measure()
    system = standard_system(mu, params_d1(), window=(-4, 1))
    assert np.all(system.shift(0) == 0.0)
    cube = system.cube_containing([0.3], -2)
    assert cube.lower[0] == pytest.approx(0.25)


def test_build_deterministic():
    mu = generate_random_measure(9, 1, 1.0, 16, "uniform")
    a = build_random_system(12, mu, params_d1())
    b = build_random_system(12, mu, params_d1())
    assert a.betas == b.betas and a.top_index == b.top_index


def test_shift_digit_frequencies():
    # empirical frequency of each shift pattern within 3 sigma of 2^-N
    mu = AtomicMeasure(2, 1.0, np.array([[0.4, 0.4]]), np.array([0.5]))
    p = params_d1()
    counts = {}
    trials = 4000
    for seed in range(trials):
        system = build_random_system(seed, mu, p, window=(-2, 5))
        counts[system.betas[0]] = counts.get(system.betas[0], 0) + 1
    sigma = math.sqrt(0.25 * 0.75 / trials)
    for pattern in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        freq = counts.get(pattern, 0) / trials
        assert abs(freq - 0.25) <= 3.0 * sigma + 1e-9


def test_window_too_short_rejected():
    mu = tiny_measure()
    with pytest.raises(ValueError, match="r \\+ 4"):
        build_random_system(1, mu, params_d1(r=8), window=(-2, 3))


# =============================================================================
# Locating atoms
# =============================================================================

def test_locate_partition_and_nesting():
    mu = generate_random_measure(4, 2, 1.0, 48, "uniform")
    system = build_random_system(2, mu, params_d1())
    index = locate(mu, system)
    prev_count = None
    for k in system.scales:
        cubes = index.occupied(k)
        total = sum(index.mass_of(c) for c in cubes)
        assert total == pytest.approx(mu.total_mass)
        atoms = np.concatenate([index.atoms_of(c) for c in cubes])
        assert sorted(atoms) == list(range(mu.atom_count))
        if prev_count is not None:
            assert len(cubes) <= prev_count
        prev_count = len(cubes)


def test_locate_parent_mass_additive():
    mu = generate_random_measure(4, 1, 1.0, 32, "uniform")
    system = build_random_system(3, mu, params_d1())
    index = locate(mu, system)
    for k in list(system.scales)[1:]:
        for cube in index.occupied(k):
            child_mass = sum(index.mass_of(c) for c in cube.children())
            assert child_mass == pytest.approx(index.mass_of(cube))


def test_single_atom_one_cube_per_scale():
    mu = AtomicMeasure(1, 1.0, np.array([[0.37]]), np.array([0.25]))
    system = standard_system(mu, params_d1(), window=(-6, 1))
    index = locate(mu, system)
    for k in system.scales:
        assert len(index.occupied(k)) == 1


def test_atom_outside_top_cube_rejected():
    mu = tiny_measure()
    system = standard_system(mu, params_d1(), window=(-4, 1))
    shifted = DyadicSystem(1, system.k_min, system.s, system.betas, (40,))
    with pytest.raises(ValueError, match="outside"):
        locate(mu, shifted)


# =============================================================================
# Good and bad cubes
# =============================================================================

def test_boundary_touching_cube_is_bad():
    mu = tiny_measure()
    p = params_d1(r=2)
    system = standard_system(mu, p, window=(-6, 1))
    other = standard_system(mu, p, window=(-6, 1))
    q = system.cube(-5, (0,))     # [0, 2^-5) touches the boundary of [0, 1)
    assert is_n_bad(q, other, 3, p)


def test_centered_cube_is_good_with_margin():
    # a cube whose binary position stays a third deep inside the other grid's
    # cells (the classical 1/3 pattern) is n-good once the collar threshold
    # 2^(-gamma * gap) drops below that persistent relative depth; both the
    # verdict and the quantitative margin are checked by an exhaustive window
    # scan over every qualifying R
    p = params_small_d(gamma=0.4, r=2)
    n = 5
    mu = AtomicMeasure(1, 0.25, np.array([[1.0 / 3.0]]), np.array([0.25]))
    base = standard_system(mu, p, window=(-8, 0))
    other = standard_system(mu, p, window=(-8, 0))
    q = base.cube_containing([1.0 / 3.0], -6)
    scan = badness_scan(q, other, n, p)
    assert not scan.bad and not scan.truncated is None
    checked = 0
    for j in range(q.scale + max(n, p.r), other.s + 1):
        thr = q.side ** p.gamma * (2.0 ** j) ** (1.0 - p.gamma)
        lo = np.floor((q.lower - 3 * 2.0 ** j - other.shift(j)) / 2.0 ** j).astype(int)
        hi = np.floor((q.upper + 3 * 2.0 ** j - other.shift(j)) / 2.0 ** j).astype(int)
        for m in range(int(lo[0]), int(hi[0]) + 1):
            r_cube = other.cube(j, (m,))
            assert boundary_distance(q, r_cube) > thr
            checked += 1
    assert checked > 0
    # the same cube is bad for smaller n: the gap-4 ancestor witnesses
    assert is_n_bad(q, other, 4, p)


def test_badness_scan_matches_bruteforce():
    mu = generate_random_measure(8, 1, 0.25, 16, "uniform")
    p = params_small_d(gamma=0.4, r=2)
    system = build_random_system(21, mu, p)
    other = build_random_system(22, mu, p)
    index = locate(mu, system)
    for n in (2, 4):
        for k in list(system.scales)[:-1]:
            for q in index.occupied(k):
                expected = False
                for j in range(q.scale + max(n, p.r), other.s + 1):
                    thr = q.side ** p.gamma * (2.0 ** j) ** (1.0 - p.gamma)
                    lo = int(np.floor((q.lower[0] - 3 * 2.0 ** j - other.shift(j)[0])
                                      / 2.0 ** j))
                    hi = int(np.floor((q.upper[0] + 3 * 2.0 ** j - other.shift(j)[0])
                                      / 2.0 ** j))
                    for m in range(lo, hi + 1):
                        if boundary_distance(q, other.cube(j, (m,))) <= thr:
                            expected = True
                assert is_n_bad(q, other, n, p) == expected


def test_badness_monotone_in_n():
    mu = generate_random_measure(8, 1, 0.25, 16, "uniform")
    p = params_small_d(gamma=0.4, r=2)
    system = build_random_system(31, mu, p)
    other = build_random_system(32, mu, p)
    index = locate(mu, system)
    for q in index.occupied(system.k_min + 1):
        flags = [is_n_bad(q, other, n, p) for n in range(0, 8)]
        # n-bad implies m-bad for all m <= n
        for a, b in zip(flags, flags[1:]):
            assert a or not b


def test_window_truncation_flagged():
    mu = tiny_measure()
    p = params_d1(r=2)
    system = standard_system(mu, p, window=(-6, 1))
    other = standard_system(mu, p, window=(-6, 1))
    q = system.cube(-1, (0,))
    assert badness_scan(q, other, 4, p).truncated


def test_bad_probability_under_bound():
    p = DyadicParams(gamma=0.3, r=8, alpha=1.0, d=0.25)
    p_hat, se = bad_probability_mc(1, 0, 8, p, trials=20_000, seed=3)
    bound = bad_probability_bound(1, 8, p)
    assert p_hat <= bound + 3.0 * se
    assert bound == pytest.approx(2.0 * 2.0 ** (-2.4) / (1.0 - 2.0 ** (-0.3)))


def test_bad_probability_interior_limit():
    # huge r makes the collar threshold tiny and the probability nearly zero
    p = DyadicParams(gamma=0.3, r=40, alpha=1.0, d=0.25)
    p_hat, se = bad_probability_mc(1, 0, 0, p, trials=5_000, seed=4)
    assert p_hat <= 0.02


def test_bad_probability_vacuous_regime_sanity():
    p = DyadicParams(gamma=0.1, r=2, alpha=1.0, d=0.25)
    p_hat, se = bad_probability_mc(1, 0, 0, p, trials=2_000, seed=5)
    bound = bad_probability_bound(1, 0, p)
    assert bound > 1.0 and p_hat <= bound + 3.0 * se


def test_bad_probability_reproducible():
    p = DyadicParams(gamma=0.3, r=4, alpha=1.0, d=0.25)
    a = bad_probability_mc(2, 0, 6, p, trials=2_000, seed=9)
    b = bad_probability_mc(2, 0, 6, p, trials=2_000, seed=9)
    assert a == b


# =============================================================================
# Dump / replay
# =============================================================================

def test_system_roundtrip():
    mu = generate_random_measure(4, 2, 1.0, 16, "uniform")
    system = build_random_system(8, mu, params_d1())
    back = loads_system(dumps_system(system))
    assert back == system
    assert dumps_system(back) == dumps_system(system)
