import math

import numpy as np
import pytest

from dyadlab.measure import (AtomicMeasure, LatticeSpace, ball_mass, average,
                             dumps_measure, generate_random_measure, growth_check,
                             growth_radii, integrate, loads_measure, lp_norm, pair,
                             vector_norm)


def single_atom():
    return AtomicMeasure(1, 1.0, np.array([[0.0]]), np.array([1.0]))


def test_ball_mass_single_atom_inside():
    mu = AtomicMeasure(3, 1.0, np.zeros((1, 3)), np.array([1.0]))
    assert ball_mass(mu, [0.0, 0.0, 0.0], 1.0) == 1.0


def test_ball_mass_empty_ball():
    mu = AtomicMeasure(3, 1.0, np.zeros((1, 3)), np.array([1.0]))
    assert ball_mass(mu, [2.0, 0.0, 0.0], 1.0) == 0.0


def test_ball_mass_boundary_inclusive():
    mu = AtomicMeasure(1, 1.0, np.array([[0.0], [0.5]]), np.array([1.0, 3.0]))
    assert ball_mass(mu, [0.0], 0.5) == 4.0


def test_growth_check_single_atom():
    passed, c_gr = growth_check(single_atom())
    assert passed and c_gr == 1.0
    assert list(growth_radii(single_atom())) == [1.0]


def test_growth_check_two_atoms_fails_at_two():
    # radius sweep {1/2, 1, 2}: the ratio peaks at 2.0 (mass 2 in the unit ball)
    mu = AtomicMeasure(1, 1.0, np.array([[0.0], [1.0]]), np.array([1.0, 1.0]))
    report = growth_check(mu)
    assert not report.passed
    assert report.c_gr == pytest.approx(2.0, abs=1e-15)


def test_growth_scaling_linear_in_weights():
    mu = AtomicMeasure(1, 1.0, np.array([[0.0], [1.0]]), np.array([1.0, 1.0]))
    half = mu.scaled_weights(0.5)
    assert growth_check(half).c_gr == pytest.approx(0.5 * growth_check(mu).c_gr)


def test_growth_check_empty_rejected():
    with pytest.raises(ValueError, match="empty support"):
        AtomicMeasure(1, 1.0, np.empty((0, 1)), np.empty(0))


def test_integrate_constant():
    mu = AtomicMeasure(1, 1.0, np.array([[0.1], [0.4]]), np.array([2.0, 3.0]))
    f = np.full(2, 7.0)
    assert integrate(mu, f) == pytest.approx(7.0 * mu.total_mass)


def test_average_zero_mass_region_is_zero():
    mu = AtomicMeasure(1, 1.0, np.array([[0.1], [0.4]]), np.array([2.0, 3.0]))
    f = np.array([1.0, 2.0])
    assert average(mu, f, where=np.empty(0, dtype=int)) == 0.0
    vec = np.array([[1.0, 1.0], [2.0, 2.0]])
    out = average(mu, vec, where=np.empty(0, dtype=int))
    assert np.all(out == 0.0)


def test_average_weighted_mean():
    mu = AtomicMeasure(1, 1.0, np.array([[0.1], [0.3]]), np.array([1.0, 3.0]))
    f = np.array([2.0, 6.0])
    assert average(mu, f) == pytest.approx(5.0)


@pytest.mark.parametrize("profile", ["uniform", "fractal-cantor", "clustered"])
def test_generated_measures_pass_growth(profile):
    mu = generate_random_measure(3, 2, 1.0, 64, profile)
    report = growth_check(mu)
    assert report.passed and report.c_gr <= 1.0 + 1e-12
    assert np.all(mu.positions >= 0.0) and np.all(mu.positions < 1.0)


def test_generated_single_atom():
    mu = generate_random_measure(7, 1, 1.0, 1, "uniform")
    assert mu.atom_count == 1 and mu.weights[0] <= 1.0 + 1e-12


def test_generation_deterministic():
    a = generate_random_measure(11, 2, 0.7, 32, "clustered")
    b = generate_random_measure(11, 2, 0.7, 32, "clustered")
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.weights, b.weights)


def test_measure_roundtrip_bit_exact():
    mu = generate_random_measure(5, 2, 1.3, 17, "uniform")
    back = loads_measure(dumps_measure(mu))
    assert np.array_equal(back.positions, mu.positions)
    assert np.array_equal(back.weights, mu.weights)
    assert dumps_measure(back) == dumps_measure(mu)


def test_lp_norm_homogeneous():
    mu = generate_random_measure(5, 1, 1.0, 16, "uniform")
    rng = np.random.default_rng(0)
    f = rng.normal(size=(16, 3))
    for p in (1.0, 2.0, 3.5, math.inf):
        assert lp_norm(mu, 2.5 * f, p) == pytest.approx(2.5 * lp_norm(mu, f, p))


def test_lattice_monotonicity_of_lp_norm():
    mu = generate_random_measure(6, 1, 1.0, 16, "uniform")
    rng = np.random.default_rng(1)
    g = rng.normal(size=(16, 4))
    f = g * rng.uniform(0.0, 1.0, size=g.shape)     # |f| <= |g| coordinatewise
    for rho in (1.0, 2.0, 4.0, math.inf):
        for p in (1.0, 2.0, 3.0):
            assert lp_norm(mu, f, p, rho=rho) <= lp_norm(mu, g, p, rho=rho) + 1e-12


def test_lattice_space_norm_monotone_random_pairs():
    space = LatticeSpace(5, 3.0)
    rng = np.random.default_rng(2)
    for _ in range(50):
        g = rng.normal(size=(1, 5))
        f = g * rng.uniform(0, 1, size=(1, 5))
        assert space.norm(f)[0] <= space.norm(g)[0] + 1e-14


def test_duality_pairing_hoelder():
    space = LatticeSpace(6, 2.5)
    rng = np.random.default_rng(3)
    for _ in range(50):
        phi = rng.normal(size=(1, 6))
        xi = rng.normal(size=(1, 6))
        lhs = abs(float(np.sum(phi * xi)))
        rhs = float(space.dual_norm(phi)[0] * space.norm(xi)[0])
        assert lhs <= rhs + 1e-12


def test_dual_exponent():
    assert LatticeSpace(2, 1.0).rho_dual == math.inf
    assert LatticeSpace(2, math.inf).rho_dual == 1.0
    assert LatticeSpace(2, 4.0).rho_dual == pytest.approx(4.0 / 3.0)
    assert LatticeSpace(2, 4.0).cotype == 4.0
    assert LatticeSpace(2, 1.5).cotype == 2.0


def test_pairing_matches_manual_sum():
    mu = AtomicMeasure(1, 1.0, np.array([[0.0], [0.5]]), np.array([2.0, 3.0]))
    g = np.array([[1.0, 2.0], [0.5, -1.0]])
    f = np.array([[2.0, 0.0], [1.0, 1.0]])
    manual = 2.0 * (1 * 2 + 2 * 0) + 3.0 * (0.5 * 1 + (-1) * 1)
    assert pair(mu, g, f) == pytest.approx(manual)


def test_vector_norm_axes():
    a = np.array([[3.0, 4.0]])
    assert vector_norm(a, 2.0)[0] == pytest.approx(5.0)
    assert vector_norm(a, math.inf)[0] == pytest.approx(4.0)
    assert vector_norm(a, 1.0)[0] == pytest.approx(7.0)
