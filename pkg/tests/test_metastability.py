import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metastab.chain import ProbMeasure, build_chain, stationary_distribution
from metastab.metastability import (
    ReducedGenerator,
    check_condition_D,
    check_condition_R,
    check_condition_V,
    check_H0_H1,
    double_well_chain,
    extract_reduced_generator,
    h1_ratio,
    lift_well_function,
    mixing_time,
    reflected_chain,
    spectral_gap,
    transition_matrix,
    tv_curve,
    uniformized_distribution,
)
from metastab.potential import mean_jump_rates, solve_resolvent
from metastab.trace import WellPartition, trace_generator

from conftest import path_chain, random_chain, random_reversible

ENDS = WellPartition(3, {0: [0], 2: [2]})


def complete_graph(n):
    return build_chain(n, {(i, j): 1.0 for i in range(n) for j in range(n) if i != j})


# -- resolvent flatness and reduced generator ---------------------------------

def test_condition_R_constant(rng):
    ch = random_chain(rng, 9)
    mu = stationary_distribution(ch)
    wells = WellPartition(9, {k: [k] for k in range(9)})
    rep, F, f = check_condition_R(ch, mu, wells, 2.0, np.full(9, 3.0))
    np.testing.assert_allclose(F, 1.5, atol=1e-12)
    np.testing.assert_allclose(f, 1.5, atol=1e-12)
    assert all(d["oscillation"] == 0.0 for d in rep.diagnostics.values())
    with pytest.raises(ValueError):
        check_condition_R(ch, mu, wells, 0.0, np.ones(9))


def test_condition_R_singletons_match_resolvent(rng):
    ch = random_chain(rng, 6)
    mu = stationary_distribution(ch)
    wells = WellPartition(6, {k: [k] for k in range(6)})
    g = rng.normal(size=6)
    _, F, f = check_condition_R(ch, mu, wells, 1.0, g)
    np.testing.assert_allclose(f, solve_resolvent(ch, 1.0, g).solution, atol=1e-12)


def test_lift_well_function():
    wells = WellPartition(5, {"a": [0, 1], "b": [4]})
    np.testing.assert_array_equal(lift_well_function(wells, {"a": 2.0, "b": -1.0}), [2, 2, 0, 0, -1])
    with pytest.raises(ValueError):
        lift_well_function(wells, [1.0])


@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 2.0]))
def test_reduced_generator_singletons(seed, lam):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 8))
    ch = random_chain(r, n, density=0.7)
    mu = stationary_distribution(ch)
    red = extract_reduced_generator(ch, mu, WellPartition(n, {k: [k] for k in range(n)}), lam)
    np.testing.assert_allclose(red.rates, ch.rates.toarray(), atol=1e-10 * ch.scale)
    assert red.diagnostics["negativity"] < 1e-10 * ch.scale


def test_reduced_generator_path_ends(path3):
    # dense 3x3 inversion gives the rate 1/(lam + 2); the lam -> 0 limit is the trace rate
    mu = stationary_distribution(path3)
    for lam, expected in [(0.5, 0.4), (1.0, 1 / 3), (2.0, 0.25)]:
        red = extract_reduced_generator(path3, mu, ENDS, lam)
        assert red.rate(0, 2) == pytest.approx(expected, rel=1e-12)
        assert red.rate(2, 0) == pytest.approx(expected, rel=1e-12)
    trace_rate = trace_generator(path3, [0, 2]).rates[0, 1]
    assert trace_rate == pytest.approx(0.5)
    # speeding up the transition state drives the reduced rate to the trace rate
    errs = []
    for K in (1.0, 10.0, 100.0, 1000.0):
        fast = build_chain(3, {(0, 1): 1.0, (1, 0): K, (1, 2): K, (2, 1): 1.0})
        red = extract_reduced_generator(fast, stationary_distribution(fast), ENDS, 1.0)
        errs.append(abs(red.rate(0, 2) - trace_generator(fast, [0, 2]).rates[0, 1]))
    assert all(b < a for a, b in zip(errs, errs[1:])) and errs[-1] < 1e-3


def test_reduced_generator_rejections(path3):
    mu = stationary_distribution(path3)
    with pytest.raises(ValueError):
        extract_reduced_generator(path3, mu, ENDS, -1.0)
    with pytest.raises(ValueError):
        ReducedGenerator((0, 1), np.array([[0.0, -1.0], [1.0, 0.0]]))
    red = extract_reduced_generator(path3, mu, ENDS, 1.0)
    np.testing.assert_allclose(red.matrix.sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(red.apply([1.0, 0.0]), [-1 / 3, 1 / 3])


def test_reduced_generator_double_well_sharpens():
    # deeper wells: the extracted generator approaches the mean-jump-rate generator
    errs = []
    for beta in (2.0, 4.0, 8.0):
        ch, mu, wells = double_well_chain(20, beta, 3)
        red = extract_reduced_generator(ch, mu, wells, 1.0).rates
        r = mean_jump_rates(ch, mu, wells)
        errs.append(abs(red[0, 1] - r[0, 1]) / r[0, 1])
    assert errs[0] > errs[1] > errs[2]


# -- transition-region occupation ---------------------------------------------

def test_condition_D_empty_delta(rng):
    ch = random_chain(rng, 4)
    rep = check_condition_D(ch, WellPartition(4, {0: [0, 1], 1: [2, 3]}), 1.0, t_grid=[1.0])
    assert all(d["max_discounted"] == 0.0 for d in rep.diagnostics.values())


def test_condition_D_path(path3):
    # dense oracle: u = (I - L)^{-1} e_1
    L = path3.generator.toarray()
    u = np.linalg.solve(np.eye(3) - L, [0.0, 1.0, 0.0])
    rep = check_condition_D(path3, ENDS, 1.0, t_grid=[0.5])
    assert rep.diagnostics[0]["max_discounted"] == pytest.approx(u[0], rel=1e-12)
    assert u[0] == pytest.approx(0.25)
    assert rep.diagnostics[0]["horizon_bound"][0] == pytest.approx(math.exp(0.5) * u[0])


@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 2.0]))
def test_condition_D_matches_resolvent_algebra(seed, lam):
    r = np.random.default_rng(seed)
    ch = random_chain(r, 12)
    wells = WellPartition(12, {0: [0, 1, 2], 1: [7, 8]})
    F = solve_resolvent(ch, lam, lift_well_function(wells, [1.0, 1.0])).solution
    u = (1 - lam * F) / lam
    rep = check_condition_D(ch, wells, lam)
    for x in wells.labels:
        assert rep.diagnostics[x]["max_discounted"] == pytest.approx(u[wells[x]].max(), rel=1e-9, abs=1e-13)


# -- hitting of anchors -------------------------------------------------------

def test_condition_V_anchor_start():
    ch = path_chain(5)
    wells = WellPartition(5, {0: [0], 1: [3, 4]})
    rep = check_condition_V(ch, wells, {0: 0, 1: 4}, [0.5, 1.0])
    assert rep.diagnostics[0]["sup_tail_exact"] == [0.0, 0.0]
    assert rep.diagnostics[1]["worst_start"] == 3
    with pytest.raises(ValueError, match="not in well"):
        check_condition_V(ch, wells, {0: 1, 1: 4}, [1.0])


def test_condition_V_simulation_under_markov_bound():
    ch = path_chain(6)
    wells = WellPartition(6, {0: [0, 1, 2], 1: [5]})
    s = [1.0, 3.0, 10.0, 30.0]
    rep = check_condition_V(ch, wells, {0: 0, 1: 5}, s, n_samples=20_000, seed=5)
    d = rep.diagnostics[0]
    for k in range(len(s)):
        assert d["tail_sim"][k] <= d["markov_bound"][k] + 3 * d["tail_sim_se"][k]
        assert abs(d["tail_sim"][k] - d["tail_exact_worst"][k]) <= 4 * d["tail_sim_se"][k] + 1e-12
    assert abs(d["mean_sim"] - d["mean_hitting_worst"]) <= 4 * d["mean_sim_se"]
    json.loads(rep.to_json())


# -- local mixing -------------------------------------------------------------

def test_reflected_chain(path3, rng):
    two = reflected_chain(path3, [0, 1])
    np.testing.assert_allclose(two.rates.toarray(), [[0, 1], [1, 0]])
    ch = random_chain(rng, 5)
    np.testing.assert_allclose(reflected_chain(ch, range(5)).rates.toarray(), ch.rates.toarray())
    with pytest.raises(ValueError):
        reflected_chain(path3, [0, 2])


@given(st.integers(0, 10_000))
def test_reflected_stationary_is_conditioned(seed):
    r = np.random.default_rng(seed)
    ch, mu = random_reversible(r, 10, density=1.0)
    V = [1, 2, 5, 6, 9]
    pi = stationary_distribution(reflected_chain(ch, V))
    np.testing.assert_allclose(pi.weights, mu.weights[V] / mu.weights[V].sum(), rtol=1e-9)


def test_tv_two_state(two_state):
    pi = ProbMeasure(np.array([0.5, 0.5]))
    t = np.array([0.0, 0.3, 1.0, 3.0])
    np.testing.assert_allclose(tv_curve(two_state, pi, t), 0.5 * np.exp(-2 * t), rtol=1e-10)
    np.testing.assert_allclose(tv_curve(two_state, pi, t, start=1), 0.5 * np.exp(-2 * t), rtol=1e-8)
    assert mixing_time(two_state, pi, 0.25) == pytest.approx(math.log(2) / 2, rel=1e-2)
    assert spectral_gap(two_state, pi) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        tv_curve(two_state, pi, [-1.0])
    with pytest.raises(ValueError):
        mixing_time(two_state, pi, 1.0)


def test_tv_start_values(rng):
    ch = random_chain(rng, 6)
    pi = stationary_distribution(ch)
    assert tv_curve(ch, pi, [0.0], start=2)[0] == pytest.approx(1 - pi.weights[2])
    # stationary start: expm preserves pi up to round-off
    P = transition_matrix(ch, 0.7)
    assert 0.5 * np.abs(pi.weights @ P - pi.weights).sum() < 1e-12
    assert mixing_time(ch, pi, 0.999, t_min=1e-6) == 1e-6


@given(st.integers(0, 10_000))
def test_tv_monotone_and_doubling(seed):
    r = np.random.default_rng(seed)
    ch = random_chain(r, 8)
    pi = stationary_distribution(ch)
    t = np.geomspace(0.01, 10, 12) / ch.scale
    d = tv_curve(ch, pi, t)
    assert np.all(np.diff(d) <= 1e-12)
    for i in range(t.size):
        assert np.all(d[i:] <= 2 * d[i] + 1e-12)


@given(st.integers(0, 10_000))
def test_uniformization_matches_expm(seed):
    r = np.random.default_rng(seed)
    ch = random_chain(r, 10)
    p0 = r.dirichlet(np.ones(10))
    t = float(r.uniform(0.1, 3.0))
    np.testing.assert_allclose(uniformized_distribution(ch, p0, t, tol=1e-10),
                               p0 @ transition_matrix(ch, t), atol=1e-9)


def test_gap_complete_graph():
    for n in (3, 5, 9):
        assert spectral_gap(complete_graph(n), ProbMeasure(np.full(n, 1 / n))) == pytest.approx(n, rel=1e-12)


def test_gap_rejects_nonreversible():
    cyc = build_chain(3, {(0, 1): 2.0, (1, 2): 2.0, (2, 0): 2.0, (1, 0): 1.0, (2, 1): 1.0, (0, 2): 1.0})
    with pytest.raises(ValueError, match="not reversible"):
        spectral_gap(cyc, ProbMeasure(np.full(3, 1 / 3)))


@given(st.integers(0, 10_000))
def test_gap_matches_tv_decay(seed):
    r = np.random.default_rng(seed)
    ch, mu = random_reversible(r, 6, density=1.0)
    gap = spectral_gap(ch, mu)
    t = np.array([20.0, 25.0]) / gap
    d = tv_curve(ch, mu, t)
    fitted = -np.log(d[1] / d[0]) / (t[1] - t[0])
    assert fitted == pytest.approx(gap, rel=0.05)


# -- capacity ratio and jump rates --------------------------------------------

def test_h0h1_singletons(path3):
    mu = stationary_distribution(path3)
    rep = check_H0_H1(path3, mu, ENDS, {0: 0, 2: 2})
    assert rep.diagnostics[0]["h1_ratio"] == 0.0
    assert rep.diagnostics[0]["jump_rates"] == {2: pytest.approx(0.5)}
    with pytest.raises(ValueError):
        check_H0_H1(path3, mu, ENDS, {0: 1, 2: 2})


def test_h1_ratio_double_well_vanishes():
    ratios = []
    for beta in (2.0, 4.0, 8.0):
        ch, mu, wells = double_well_chain(20, beta, 3)
        ratios.append(h1_ratio(ch, mu, wells, 1, 0))
    assert ratios[0] > ratios[1] > ratios[2] and ratios[2] < 1e-2


def test_double_well_structure():
    ch, mu, wells = double_well_chain(10, 3.0, 2)
    assert ch.n == 11 and wells[1].tolist() == [0, 1, 2] and wells[2].tolist() == [8, 9, 10]
    np.testing.assert_allclose(stationary_distribution(ch).weights, mu.weights, rtol=1e-10)
