import math

import numpy as np
import pytest

from dyadlab.measure import AtomicMeasure, pair
from dyadlab.grid import DyadicParams, contains, locate, set_distance, standard_system
from dyadlab.accretive import build_layers, generate_accretive
from dyadlab.fixtures import battery_measure, battery_params, build_fixture_pair
from dyadlab.martingale import MartingaleContext, adapted_diff_local
from dyadlab.operator import (DiscreteOperator, GeometryError, KernelSpec, PairClass,
                              PairClassifier, boundary_probability, chain_constant,
                              classify_pair, comparable_msum, comparable_partition,
                              collar_membership, decay_bound_check, decay_slope_fit,
                              dipole_kernel, hilbert_kernel, kernel_by_name,
                              measure_testing_bound, pairing_decomposition,
                              paraproduct_apply, paraproduct_direct_pairing,
                              paraproduct_smap, riesz_kernel, validate_kernel)


def small_pair(seed=7, atoms=32, r=4, delta=0.5):
    mu = battery_measure(seed, 1, atoms)
    return build_fixture_pair(seed, mu, battery_params(r), delta, grids="standard")


def small_operator(pairf, name="hilbert"):
    return DiscreteOperator(kernel_by_name(name, pairf.measure.growth_exponent),
                            pairf.measure)


# =============================================================================
# Kernels and the action matrix
# =============================================================================

@pytest.mark.parametrize("maker", [riesz_kernel, dipole_kernel, hilbert_kernel])
def test_bundled_kernels_validate(maker):
    mu = battery_measure(3, 1, 32, d=0.8)
    spec = maker(0.8)
    assert validate_kernel(spec, mu)["passed"]


def test_two_atom_action():
    mu = AtomicMeasure(1, 0.5, np.array([[0.0], [0.5]]), np.array([1.0, 2.0]))
    op = DiscreteOperator(riesz_kernel(0.5), mu)
    f = np.array([0.0, 1.0])     # supported off the first atom
    expected = min(1.0, 0.5 ** -0.5) * 1.0 * 2.0
    assert op.apply(f)[0] == pytest.approx(expected)
    assert op.apply(f)[1] == 0.0     # zero diagonal


def test_antisymmetric_kernel_null_quadratic_form():
    mu = battery_measure(5, 1, 24)
    for name in ("hilbert", "dipole"):
        op = DiscreteOperator(kernel_by_name(name, 0.25), mu)
        rng = np.random.default_rng(1)
        f = rng.normal(size=mu.atom_count)
        quad = pair(mu, f, op.apply(f))
        assert abs(quad) <= 1e-12 * np.max(np.abs(op.action)) * np.sum(f ** 2)


def test_transpose_duality_random():
    mu = battery_measure(7, 1, 64)
    op = DiscreteOperator(hilbert_kernel(0.25), mu)
    rng = np.random.default_rng(2)
    for _ in range(20):
        f, g = rng.normal(size=mu.atom_count), rng.normal(size=mu.atom_count)
        a = pair(mu, g, op.apply(f))
        b = pair(mu, op.adjoint_apply(g), f)
        assert abs(a - b) <= 1e-12 * max(abs(a), abs(b), 1.0)


def test_matrix_element_single_kernel_term():
    mu = AtomicMeasure(1, 0.5, np.array([[0.0], [2.0]]), np.array([0.5, 0.25]))
    op = DiscreteOperator(hilbert_kernel(0.5), mu)
    psi = np.array([1.0, 0.0])
    phiv = np.array([0.0, 1.0])
    expected = 0.5 * (-(2.0 ** -0.5)) * 1.0 * 0.25
    assert op.matrix_element(psi, phiv) == pytest.approx(expected, rel=1e-12)


def test_mean_zero_kills_constant_kernel():
    mu = AtomicMeasure(1, 1.0, np.array([[0.0], [0.25], [2.0]]),
                       np.array([1.0, 1.0, 1.0]))
    const = KernelSpec("const", lambda x, y: np.ones((x.shape[0], y.shape[0])),
                       math.inf, 0.0, 1.0, 1.0)
    op = DiscreteOperator(const, mu)
    phiv = np.array([1.0, -1.0, 0.0])    # mean zero on the first two atoms
    psi = np.array([0.0, 0.0, 1.0])      # supported away from phi
    assert op.matrix_element(psi, phiv) == pytest.approx(0.0, abs=1e-15)


def test_testing_bound_measured():
    pairf = small_pair()
    op = small_operator(pairf)
    bound = measure_testing_bound(op, pairf.ctx_f.accretive, pairf.index_f)
    assert math.isfinite(bound) and bound > 0


# =============================================================================
# Pair classification
# =============================================================================

def _third_system(window):
    mu = AtomicMeasure(1, 0.25, np.array([[1.0 / 3.0]]), np.array([0.25]))
    params = DyadicParams(gamma=0.4, r=2, alpha=1.0, d=0.25)
    return mu, standard_system(mu, params, window=window)


def test_classify_deep_nested_example():
    # Q good (persistent third-depth), Q inside R with a 2^(r+3) size gap
    mu, sysd = _third_system((-6, 1))
    _, sysd2 = _third_system((-6, 1))
    params = DyadicParams(gamma=0.4, r=3, alpha=1.0, d=0.25)
    q = sysd.cube_containing([1.0 / 3.0], -6)
    r_cube = sysd2.cube(0, (0,))
    assert classify_pair(q, r_cube, params) is PairClass.DEEP_NESTED


def test_classify_comparable_same_cube():
    mu, sysd = _third_system((-6, 1))
    _, sysd2 = _third_system((-6, 1))
    params = DyadicParams(gamma=0.4, r=5, alpha=1.0, d=0.25)
    q = sysd.cube_containing([1.0 / 3.0], -2)
    r_cube = sysd2.cube_containing([1.0 / 3.0], -2)
    assert set_distance(q, r_cube) == 0.0
    assert classify_pair(q, r_cube, params) is PairClass.COMPARABLE


def test_classify_boundary_touching_bad():
    mu, sysd = _third_system((-6, 1))
    _, sysd2 = _third_system((-6, 1))
    params = DyadicParams(gamma=0.4, r=2, alpha=1.0, d=0.25)
    q = sysd.cube(-6, (0,))      # touches the origin boundary at every scale
    r_cube = sysd2.cube(0, (0,))
    assert classify_pair(q, r_cube, params) is PairClass.BAD


def test_classify_separated_across_clusters():
    # Q seven scales below R so the badness scan starts above the deepest
    # witness of the third-position cube, leaving a good separated pair
    mu, sysd = _third_system((-7, 1))
    _, sysd2 = _third_system((-7, 1))
    params = DyadicParams(gamma=0.4, r=2, alpha=1.0, d=0.25)
    q = sysd.cube_containing([1.0 / 3.0], -7)
    r_cube = sysd2.cube_containing([2.0 / 3.0], -1)
    assert set_distance(q, r_cube) >= q.side
    assert classify_pair(q, r_cube, params) is PairClass.SEPARATED


def test_classify_requires_size_order():
    mu, sysd = _third_system((-6, 1))
    _, sysd2 = _third_system((-6, 1))
    params = DyadicParams(gamma=0.4, r=2, alpha=1.0, d=0.25)
    big = sysd.cube(0, (0,))
    small = sysd2.cube(-3, (2,))
    with pytest.raises(ValueError):
        classify_pair(big, small, params)


@pytest.mark.parametrize("r", [2, 4, 6])
def test_exhaustive_partition_two_grid_fixture(r):
    pairf = small_pair(r=r)
    classifier = PairClassifier(pairf.params)
    counted = {cls: 0 for cls in PairClass}
    for k in pairf.ctx_f.diff_scales:
        for q in pairf.index_f.occupied(k):
            for j in pairf.ctx_g.diff_scales:
                for rc in pairf.index_g.occupied(j):
                    if q.side <= rc.side:
                        counted[classifier.classify(q, rc)] += 1
    assert sum(counted.values()) > 0
    assert counted[PairClass.BAD] >= 0      # no GeometryError escaped


def test_child_containment_for_deep_good_pairs():
    pairf = small_pair(r=3)
    classifier = PairClassifier(pairf.params)
    found = 0
    for k in pairf.ctx_f.diff_scales:
        for q in pairf.index_f.occupied(k):
            for j in pairf.ctx_g.diff_scales:
                for rc in pairf.index_g.occupied(j):
                    if q.side > rc.side or rc.scale <= rc.system.k_min:
                        continue
                    if classifier.classify(q, rc) is PairClass.DEEP_NESTED:
                        hosts = [c for c in rc.children() if contains(c, q)]
                        assert len(hosts) == 1
                        found += 1
    assert found > 0


# =============================================================================
# Ledger
# =============================================================================

def test_ledger_identity_indicator_systems():
    mu = battery_measure(11, 1, 32)
    pairf = build_fixture_pair(4, mu, battery_params(2), 0.9, style="indicator",
                               grids="standard")
    op = small_operator(pairf)
    rng = np.random.default_rng(3)
    f, g = rng.normal(size=mu.atom_count), rng.normal(size=mu.atom_count)
    led = pairing_decomposition(op, pairf.ctx_f, pairf.ctx_g, f, g, pairf.params)
    assert led.identity_residual <= 1e-10


def test_ledger_annihilation_constant_input():
    # with indicator systems, constants sit in the kernel of every block
    mu = battery_measure(11, 1, 32)
    pairf = build_fixture_pair(4, mu, battery_params(2), 0.9, style="indicator",
                               grids="standard")
    op = small_operator(pairf)
    f = np.ones(mu.atom_count)
    rng = np.random.default_rng(4)
    g = rng.normal(size=mu.atom_count)
    led = pairing_decomposition(op, pairf.ctx_f, pairf.ctx_g, f, g, pairf.params)
    assert abs(led.block_sum) <= 1e-12
    assert led.identity_residual <= 1e-10


def test_ledger_vector_valued():
    pairf = small_pair(atoms=32)
    op = small_operator(pairf)
    rng = np.random.default_rng(5)
    f = rng.normal(size=(pairf.measure.atom_count, 2))
    g = rng.normal(size=(pairf.measure.atom_count, 2))
    led = pairing_decomposition(op, pairf.ctx_f, pairf.ctx_g, f, g, pairf.params)
    assert led.identity_residual <= 1e-10


def test_bad_fraction_decreases_with_r():
    mu = battery_measure(7, 1, 32)
    op = DiscreteOperator(hilbert_kernel(0.25), mu)
    rng = np.random.default_rng(6)
    f, g = rng.normal(size=mu.atom_count), rng.normal(size=mu.atom_count)
    fractions = []
    for r in (2, 4, 6):
        pairf = build_fixture_pair(7, mu, battery_params(r), 0.5, grids="standard")
        led = pairing_decomposition(op, pairf.ctx_f, pairf.ctx_g, f, g, pairf.params)
        assert led.identity_residual <= 1e-10
        fractions.append(led.bad_fraction)
    assert fractions[0] > fractions[1] > fractions[2]


# =============================================================================
# Decay bounds
# =============================================================================

def test_decay_bounds_pass_on_battery():
    pairf = small_pair(r=4)
    op = small_operator(pairf)
    res = decay_bound_check(op, pairf.ctx_f, pairf.ctx_g, pairf.params)
    assert res.checked > 0
    assert res.passed
    assert res.worst_margin > 1.0


def test_decay_bound_chain_constant():
    kern = hilbert_kernel(0.25)
    c = chain_constant(kern, 0.5)
    assert c == pytest.approx(2.0 ** 2.25 * kern.c_smooth * 64.0)


def test_separated_smoothness_bound_direct():
    # a hand-built separated pair against the explicit smoothness bound
    mu = AtomicMeasure(1, 0.8, np.array([[0.0], [0.001], [3.0]]), np.ones(3))
    kern = riesz_kernel(0.8)
    op = DiscreteOperator(kern, mu)
    phiv = np.array([1.0, -1.0, 0.0])
    psi = np.array([0.0, 0.0, 1.0])
    val = abs(op.matrix_element(psi, phiv))
    dist = 3.0 - 0.001
    bound = kern.c_smooth * 0.001 ** kern.alpha / dist ** (kern.d + kern.alpha) * 2.0
    assert val <= bound


@pytest.mark.parametrize("d", [0.25, 0.8])
def test_decay_slope_within_ten_percent(d):
    slope = decay_slope_fit(riesz_kernel(d), [4.0, 8.0, 16.0, 32.0, 64.0])
    target = -(d + 1.0)
    assert abs(slope - target) <= 0.1 * abs(target)


# =============================================================================
# Paraproduct
# =============================================================================

def test_smap_characterization_and_duality():
    pairf = small_pair(r=3, atoms=32)
    op = small_operator(pairf)
    smap = paraproduct_smap(pairf.ctx_f, pairf.index_g, pairf.params)
    classifier = PairClassifier(pairf.params)
    sys2 = pairf.index_g.system
    nonempty = 0
    for k in pairf.ctx_f.diff_scales:
        for q in pairf.index_f.occupied(k):
            s_cube = smap[q.key]
            if s_cube is not None:
                nonempty += 1
                assert contains(s_cube, q)
            for j in range(q.scale, sys2.s + 1):
                r_cube = sys2.cube_containing(q.center, j)
                chi = (contains(r_cube, q)
                       and q.side < 2.0 ** (-pairf.params.r) * r_cube.side
                       and not classifier.is_bad(q, r_cube))
                s_strict = (s_cube is not None and contains(r_cube, s_cube)
                            and r_cube.key != s_cube.key)
                assert chi == s_strict
    assert nonempty > 0

    rng = np.random.default_rng(7)
    f = rng.normal(size=pairf.measure.atom_count)
    g = rng.normal(size=pairf.measure.atom_count)
    pi_g = paraproduct_apply(op, pairf.ctx_f, pairf.ctx_g, g, smap)
    direct = paraproduct_direct_pairing(op, pairf.ctx_f, pairf.ctx_g, g, f, smap)
    lhs = pair(pairf.measure, pi_g, f)
    assert abs(lhs - direct) <= 1e-12 * max(abs(lhs), abs(direct), 1.0)


def test_paraproduct_zero_function():
    pairf = small_pair(r=3, atoms=32)
    op = small_operator(pairf)
    smap = paraproduct_smap(pairf.ctx_f, pairf.index_g, pairf.params)
    out = paraproduct_apply(op, pairf.ctx_f, pairf.ctx_g,
                            np.zeros(pairf.measure.atom_count), smap)
    assert np.all(out == 0.0)


def test_paraproduct_empty_when_window_shallow():
    # with r larger than the whole window no cube can be deeply nested
    mu = battery_measure(9, 1, 16)
    pairf = build_fixture_pair(5, mu, battery_params(2), 0.5, grids="standard")
    deep_params = DyadicParams(gamma=0.4, r=30, alpha=1.0, d=0.25)
    smap = paraproduct_smap(pairf.ctx_f, pairf.index_g, deep_params)
    assert all(v is None for v in smap.values())
    op = small_operator(pairf)
    rng = np.random.default_rng(8)
    g = rng.normal(size=mu.atom_count)
    assert np.all(paraproduct_apply(op, pairf.ctx_f, pairf.ctx_g, g, smap) == 0.0)


# =============================================================================
# Comparable pairs and the collar
# =============================================================================

def _comparable_pair(pairf):
    classifier = PairClassifier(pairf.params)
    for k in pairf.ctx_f.diff_scales:
        for q in pairf.index_f.occupied(k):
            for j in pairf.ctx_g.diff_scales:
                for rc in pairf.index_g.occupied(j):
                    if q.side <= rc.side and \
                            classifier.classify(q, rc) is PairClass.COMPARABLE:
                        return q, rc
    raise AssertionError("fixture has no comparable pair")


def test_comparable_partition_and_msum():
    pairf = small_pair(r=4, atoms=32)
    op = small_operator(pairf)
    q, rc = _comparable_pair(pairf)
    rng = np.random.default_rng(9)
    psi = rng.normal(size=pairf.measure.atom_count)
    phiv = rng.normal(size=pairf.measure.atom_count)
    for i in range(2):
        for j in range(2):
            regions = comparable_partition(pairf.measure, q, rc, i, j, 0.1,
                                           pairf.params)
            in_q = np.where(regions.q_child.contains_points(
                pairf.measure.positions))[0]
            got = np.sort(np.concatenate([regions.delta_q, regions.q_sep,
                                          regions.q_boundary]))
            assert np.array_equal(got, in_q)
            res = comparable_msum(op, psi, phiv, regions)
            assert res["residual"] <= 1e-12 * max(abs(res["full"]), 1.0) + 1e-14


def test_comparable_partition_rejects_non_comparable():
    pairf = small_pair(r=4, atoms=32)
    q = pairf.index_f.occupied(pairf.ctx_f.system.k_min + 1)[0]
    top = pairf.index_g.system.top_cube()
    with pytest.raises(ValueError, match="comparable"):
        comparable_partition(pairf.measure, q, top, 0, 0, 0.1, pairf.params)


def test_collar_swallows_small_cube():
    # a collar wide enough to cover the whole neighboring child empties the
    # core and separated parts
    mu = AtomicMeasure(1, 1.0, np.array([[0.26], [0.49]]), np.array([1.0, 1.0]))
    params = DyadicParams(gamma=0.2, r=2, alpha=1.0, d=1.0)
    sysd = standard_system(mu, params, window=(-4, 0))
    sysd2 = standard_system(mu, params, window=(-4, 0))
    q = sysd.cube(-1, (0,))      # [0, 0.5)
    rc = sysd2.cube(-1, (0,))
    regions = comparable_partition(mu, q, rc, 1, 1, 0.9, params)
    # child [0.25, 0.5): both atoms inside the wide collar of the R-child
    assert regions.q_boundary.size == 2
    assert regions.delta_q.size == 0 and regions.q_sep.size == 0


def test_collar_membership_geometry():
    mu = AtomicMeasure(1, 1.0, np.array([[0.5]]), np.array([1.0]))
    params = DyadicParams(gamma=0.2, r=2, alpha=1.0, d=1.0)
    sysd = standard_system(mu, params, window=(-3, 0))
    cube = sysd.cube(0, (0,))
    pts = np.array([[0.005], [0.5], [0.999], [1.04], [1.2]])
    got = collar_membership(pts, cube, 0.1)
    assert list(got) == [True, False, True, True, False]


# =============================================================================
# Boundary collar probability
# =============================================================================

def test_collar_probability_envelope_and_linearity():
    p1, se1 = boundary_probability(1, 2, 0.05, 0, 20_000, seed=3)
    assert p1 <= 4.0 * 1 * 3 * 0.05 + 3.0 * se1
    p2, se2 = boundary_probability(1, 2, 0.025, 0, 20_000, seed=3)
    assert 0.3 <= p2 / p1 <= 0.7


def test_collar_probability_small_eta_limit():
    p, _ = boundary_probability(1, 2, 0.001, 0, 10_000, seed=4)
    assert p <= 0.02


def test_collar_probability_validation():
    with pytest.raises(ValueError):
        boundary_probability(1, 2, 0.3, 0, 20_000, seed=1)
    with pytest.raises(ValueError):
        boundary_probability(1, 2, 0.05, 0, 100, seed=1)
