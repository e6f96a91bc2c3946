import itertools
import math

import numpy as np
import pytest

from nlanderson.formal import Monomial
from nlanderson.measure import (
    divisor_vectors_near, dyadic_success, dyadic_threshold_log_epsilon, enumerate_constrained,
    measure_chain_checks, monomial_threshold, nonresonant_lower_bound, nonresonant_measure,
    resonant_probability_exact, resonant_probability_mc, shift_sum_check, union_bound_analytic,
    union_measure_bound,
)
from nlanderson.normal_form import build_schedule


@pytest.fixture(scope="module")
def sched():
    return build_schedule(1e-4, 0.009, 40, 2.5)


def brute_force_classes(top, max_norm, max_diameter):
    # sums of up to max_norm signed unit vectors on [top - max_diameter, top]
    units = [(j, e) for j in range(top - max_diameter, top + 1) for e in (1, -1)]
    found = set()
    for r in range(1, max_norm + 1):
        for combo in itertools.combinations_with_replacement(units, r):
            k = {}
            for j, e in combo:
                k[j] = k.get(j, 0) + e
            k = {j: x for j, x in k.items() if x}
            if not k or max(k) != top or k[top] < 0 or sum(k.values()) != 0:
                continue
            if sum(abs(x) for x in k.values()) != r:
                continue
            found.add(tuple(sorted(k.items())))
    return found


def test_enumeration_empty_when_degree_cut_below_two(sched):
    assert enumerate_constrained(40, 1, sched, kappa=6.0) == []


@pytest.mark.parametrize("kappa", [5.0, 2.5])
def test_enumeration_matches_brute_force(sched, kappa):
    got = enumerate_constrained(41, 1, sched, kappa=kappa)
    ncut = math.floor(10 / kappa)
    dcut = math.floor(10 * math.log(sched.eps(1)) / math.log(sched.epsilon) + 1e-12)
    keys = {tuple(sorted(n.divisor_vector().items())) for n in got}
    assert len(keys) == len(got)
    assert keys == brute_force_classes(41, ncut, dcut)
    for n in got:
        assert not n.is_resonant
        assert max(n.divisor_vector()) == 41
        assert n.degree <= ncut and n.diameter <= dcut


def test_nearest_neighbour_class():
    # diameter 1 and degree 2 leave only q_{k-1} qbar_k up to sign
    assert brute_force_classes(7, 2, 1) == {((6, -1), (7, 1))}


def test_enumeration_site_guard(sched):
    with pytest.raises(ValueError):
        enumerate_constrained(0, 1, sched)


def test_divisor_vectors_near_touch_sites():
    ks = divisor_vectors_near({0}, 2, 1, 3)
    assert {tuple(sorted(k.items())) for k in ks} == {((-1, -1), (0, 1)), ((0, -1), (1, 1))}


def test_single_coordinate_mc_matches_exact():
    rng = np.random.default_rng(7)
    for cfg in range(20):
        c = int(rng.choice([1, -1, 2, -3]))
        others = {int(j): int(rng.choice([1, -1, 2])) for j in rng.choice([1, 2, 3], 2, replace=False)}
        k = {0: c, **others}
        fixed = {j: float(rng.random()) for j in others}
        n = Monomial((j, max(x, 0), max(-x, 0)) for j, x in k.items())
        gamma = float(rng.uniform(5, 200))
        exact = resonant_probability_exact(n, gamma, fixed)
        p, se = resonant_probability_mc(n, gamma, 100_000, seed=cfg, fixed=fixed)
        sigma = max(se, math.sqrt(exact * (1 - exact) / 100_000))
        assert abs(p - exact) <= 3 * sigma + 1e-12, (cfg, p, exact, sigma)


def test_exact_probability_capped_at_two_eta():
    n = Monomial([(0, 1, 0), (1, 0, 1)])
    eta = monomial_threshold(n, 1.0)
    assert resonant_probability_exact(n, 1.0, {1: 0.5}) == pytest.approx(2 * eta)
    assert resonant_probability_exact(n, 1.0, {1: 0.0}) == pytest.approx(eta)
    assert resonant_probability_exact(n, 1e6, {1: 0.5}) == 1.0


def test_mc_probability_limits():
    n = Monomial([(0, 1, 0), (1, 0, 1)])
    assert resonant_probability_mc(n, 1e-12, 5000, seed=1)[0] == 0.0
    assert resonant_probability_mc(n, 1e6, 5000, seed=1)[0] == 1.0
    with pytest.raises(ValueError):
        resonant_probability_mc(n, 1.0, 10, seed=1)


def test_mc_monotone_in_gamma_pathwise():
    n = Monomial([(0, 2, 0), (1, 0, 1), (2, 0, 1)])
    ps = [resonant_probability_mc(n, g, 20_000, seed=5)[0] for g in (1, 10, 50, 200, 1000)]
    assert all(a <= b for a, b in zip(ps, ps[1:]))


def test_union_bounds(sched):
    r = union_measure_bound(40, 1, sched, samples=20_000, seed=3)
    assert r.n_monomials > 0
    assert r.analytic_bound == pytest.approx(1e-4 ** (1 / 200))
    assert r.holds and r.subadditive
    again = union_measure_bound(40, 1, sched, samples=20_000, seed=3)
    assert again.estimate == r.estimate
    empty = union_measure_bound(40, 1, sched, kappa=6.0)
    assert empty.estimate == 0.0 and empty.n_monomials == 0


def test_union_monotone_in_gamma(sched):
    ests = [union_measure_bound(40, 1, sched, samples=5000, seed=0, gamma=g).estimate
            for g in (0.1, 0.5, 1.0)]
    assert ests[0] <= ests[1] <= ests[2]


def test_union_bound_analytic_later_steps():
    s = build_schedule(1e-3, 0.009, 10**6, 2.5)
    assert union_bound_analytic(s, 2) == pytest.approx(s.eps(2) ** (1 / 125))


def test_nonresonant_measure():
    r = nonresonant_measure(40, 1e-4, 0.009, 2.5, samples=4000, seed=1)
    assert r.lower_bound == pytest.approx(nonresonant_lower_bound(40, 1e-4))
    assert r.holds
    assert nonresonant_measure(40, 1e-4, 0.009, 2.5, samples=4000, seed=1).estimate == r.estimate
    # thresholds scale with eps^(1/100), so the measure climbs toward 1 as eps -> 0
    ests = [nonresonant_measure(40, e, 0.009, 2.5, samples=4000, seed=1).estimate
            for e in (1e-4, 1e-100, 1e-300)]
    assert ests[0] < ests[1] < ests[2] < 1.0


def test_dyadic_limits():
    assert dyadic_success(100.0, 1.0).probability == 1.0
    assert dyadic_success(100.0, 0.0).probability == 0.0
    with pytest.raises(ValueError):
        dyadic_success(5.0, 0.5)


def test_dyadic_inequality_threshold():
    # p_single = jbar^(-6 eps^(1/1000)) is tiny unless ln eps is of order -10^3
    for jbar in (1e3, 1e4, 1e5):
        assert not dyadic_success(jbar, epsilon=1e-3).holds
        le = dyadic_threshold_log_epsilon(jbar)
        assert -1e5 < le < -1e3
        assert dyadic_success(jbar, log_epsilon=le - 1.0).holds
        assert not dyadic_success(jbar, log_epsilon=le + 1.0).holds


def test_measure_chain_checks():
    c = measure_chain_checks(1e-6, 50)
    assert c["upper_chain_holds"] and c["middle_holds"]
    # log(1-x) < -x, so the literal lower link never holds
    assert not c["lower_chain_holds"]
    assert c["lower_chain_corrected_holds"]
    assert not c["product_bound_holds"]


def test_shift_sum():
    s = build_schedule(1e-4, 0.009, 40, 1.0)
    total, bound = shift_sum_check(s)
    assert total <= bound
