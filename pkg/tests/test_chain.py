import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metastab.chain import (
    MarkovChain,
    ProbMeasure,
    adjoint_chain,
    build_chain,
    check_reversible,
    dirichlet_form,
    dirichlet_form_edges,
    read_chain,
    read_measure,
    stationary_distribution,
    stationary_distribution_dense,
    write_chain,
    write_measure,
)
from metastab.zero_range import ZRModel, zr_generator, zr_measure

from conftest import random_chain, random_reversible


def cycle3():
    # clockwise 2, counterclockwise 1
    return build_chain(3, {(0, 1): 2.0, (1, 2): 2.0, (2, 0): 2.0,
                           (1, 0): 1.0, (2, 1): 1.0, (0, 2): 1.0})


def test_two_state_holding(two_state):
    assert two_state.holding.tolist() == [1.0, 1.0]
    assert two_state.irreducible


def test_absorbing_not_irreducible():
    assert not build_chain(2, {(0, 1): 1.0}).irreducible


def test_path_holding(path3):
    assert path3.holding.tolist() == [1.0, 2.0, 1.0]


def test_build_rejects_bad_entries():
    with pytest.raises(ValueError):
        build_chain(2, {(0, 1): -1.0})
    with pytest.raises(ValueError):
        build_chain(2, [(0, 1, 1.0), (0, 1, 2.0)])
    with pytest.raises(ValueError):
        build_chain(2, {(1, 1): 1.0})
    with pytest.raises(IndexError):
        build_chain(2, {(0, 5): 1.0})


def test_state_keys():
    ch = build_chain(["a", "b"], {(0, 1): 1.0, (1, 0): 3.0})
    assert ch.index_of("b") == 1
    assert ch.indices(["b", "a"]).tolist() == [0, 1]


def test_generator_rows_sum_to_zero(rng):
    ch = random_chain(rng, 20)
    assert np.array_equal(ch.holding, np.asarray(ch.rates.sum(axis=1)).ravel())
    # only round-off separates the row sums from zero
    assert np.abs(np.asarray(ch.generator.sum(axis=1))).max() <= 8 * np.finfo(float).eps * ch.scale


def test_stationary_two_state(two_state):
    np.testing.assert_allclose(stationary_distribution(two_state).weights, [0.5, 0.5], atol=1e-15)


def test_stationary_zero_range_small():
    m = ZRModel.complete(2, 2, speedup=False)
    mu = stationary_distribution(zr_generator(m))
    np.testing.assert_allclose(mu.weights, [0.25, 0.5, 0.25], atol=1e-12)


def test_stationary_matches_dense_oracle(rng):
    for _ in range(5):
        ch = random_chain(rng, 4, density=0.8)
        np.testing.assert_allclose(stationary_distribution(ch).weights,
                                   stationary_distribution_dense(ch).weights, atol=1e-10)


def test_stationary_residual(rng):
    ch = random_chain(rng, 60)
    mu = stationary_distribution(ch)
    assert np.abs(ch.generator.T @ mu.weights).max() <= 1e-10 * ch.scale


def test_stationary_requires_irreducible():
    with pytest.raises(ValueError, match="irreducible"):
        stationary_distribution(build_chain(2, {(0, 1): 1.0}))


def test_prob_measure_validation():
    with pytest.raises(ValueError):
        ProbMeasure(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ProbMeasure(np.array([1.5, -0.5]))
    assert ProbMeasure.point_mass(3, 1).weights.tolist() == [0.0, 1.0, 0.0]


def test_adjoint_of_reversible_is_identity(rng):
    ch, mu = random_reversible(rng, 12)
    adj = adjoint_chain(ch, mu)
    assert abs(adj.rates - ch.rates).max() < 1e-12


def test_adjoint_preserves_holding(rng):
    ch = random_chain(rng, 15)
    mu = stationary_distribution(ch)
    np.testing.assert_allclose(adjoint_chain(ch, mu).holding, ch.holding, rtol=1e-10)


def test_adjoint_cycle_swaps_rates():
    ch = cycle3()
    adj = adjoint_chain(ch, ProbMeasure(np.full(3, 1 / 3)))
    assert adj.rates[0, 1] == pytest.approx(1.0)
    assert adj.rates[1, 0] == pytest.approx(2.0)


def test_adjoint_needs_positive_measure(two_state):
    with pytest.raises(ValueError):
        adjoint_chain(two_state, ProbMeasure(np.array([1.0, 0.0])))


def test_adjoint_involution(rng):
    ch = random_chain(rng, 10)
    mu = stationary_distribution(ch)
    back = adjoint_chain(adjoint_chain(ch, mu), mu)
    assert abs(back.rates - ch.rates).max() < 1e-12


def test_dirichlet_examples(two_state):
    mu = ProbMeasure(np.array([0.5, 0.5]))
    assert dirichlet_form(two_state, mu, [3.0, 3.0]) == 0.0
    assert dirichlet_form(two_state, mu, [1.0, 0.0]) == pytest.approx(0.5, abs=1e-15)


def test_dirichlet_shape_mismatch(two_state):
    with pytest.raises(ValueError):
        dirichlet_form(two_state, ProbMeasure(np.array([0.5, 0.5])), [1.0, 0.0, 2.0])


@given(st.integers(0, 10_000))
def test_dirichlet_two_formulas_agree(seed):
    r = np.random.default_rng(seed)
    ch, mu = random_reversible(r, int(r.integers(2, 15)))
    F = r.normal(size=ch.n)
    a, b = dirichlet_form(ch, mu, F), dirichlet_form_edges(ch, mu, F)
    assert a >= -1e-12
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)
    assert dirichlet_form(adjoint_chain(ch, mu), mu, F) == pytest.approx(a, rel=1e-10, abs=1e-14)


def test_check_reversible_examples(two_state):
    ok, viol = check_reversible(two_state, ProbMeasure(np.array([0.5, 0.5])))
    assert ok and viol == 0.0
    ok, viol = check_reversible(cycle3(), ProbMeasure(np.full(3, 1 / 3)))
    assert not ok and viol == pytest.approx(1 / 3)


@pytest.mark.parametrize("N,kappa", [(5, 2), (8, 3), (6, 4)])
def test_zero_range_is_reversible(N, kappa):
    m = ZRModel.complete(kappa, N)
    mu, _ = zr_measure(m)
    assert check_reversible(zr_generator(m), mu)[0]


def test_chain_text_roundtrip(rng):
    ch = random_chain(rng, 7)
    buf = io.StringIO()
    write_chain(ch, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "states 7"
    back = read_chain(io.StringIO(text))
    assert (back.rates != ch.rates).nnz == 0
    buf2 = io.StringIO()
    write_chain(back, buf2)
    assert buf2.getvalue() == text


def test_measure_text_roundtrip(rng):
    mu = stationary_distribution(random_chain(rng, 5))
    buf = io.StringIO()
    write_measure(mu, buf)
    assert np.array_equal(read_measure(io.StringIO(buf.getvalue())).weights, mu.weights)


def test_chain_is_immutable(two_state):
    with pytest.raises(ValueError):
        two_state.holding[0] = 5.0
    assert isinstance(two_state, MarkovChain)
