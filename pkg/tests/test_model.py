from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peerchoice.model import (ModelError, ModelSpec, Network, choice_prob, choice_prob_factorized, choice_probs,
                              consideration_set_prob, load_model, model_from_dict, model_to_dict, peer_counts,
                              random_model, random_network, random_tables, restricted_choice_prob, save_model,
                              subsets, tabulate, validate_assumptions)


def _binary_model(q1=0.4, r1=0.5):
    net = Network.from_sets(2, [(), ()], [(), ()])
    r = {((), ()): np.array([1.0, 0.0]), ((1,), (0,)): np.array([1 - r1, r1])}
    return ModelSpec(1, net, (np.array([[q1]]), np.array([[0.5]])), (r, dict(r)), np.ones(2))


def _two_alt_model():
    net = Network.from_sets(2, [(), ()], [(), ()])
    r = {((), ()): [1.0, 0.0, 0.0], ((1,), (0,)): [0.6, 0.4, 0.0], ((2,), (0,)): [0.3, 0.0, 0.7],
         ((1, 2), (0, 0)): [0.2, 0.3, 0.5]}
    r = {k: np.array(v) for k, v in r.items()}
    q = np.array([[0.4], [0.5]])
    return ModelSpec(2, net, (q, q.copy()), (r, dict(r)), np.ones(2))


def test_peer_counts_examples():
    net = Network.from_sets(3, [(1, 2), (), ()], [(), (), ()])
    nc, _ = peer_counts(net, 0, (0, 1, 1), 1)
    assert nc[1] == 2
    net = Network.from_sets(4, [(1,), (), (), ()], [(2, 3), (), (), ()])
    nc, nr = peer_counts(net, 0, (0, 2, 2, 0), 2)
    assert nc[2] == 1 and nr[2] == 1
    empty = Network.from_sets(3, [(), (), ()], [(), (), ()])
    nc, nr = peer_counts(empty, 0, (1, 1, 1), 1)
    assert not nc[1:].any() and not nr[1:].any()
    with pytest.raises(ModelError):
        peer_counts(net, 0, (0, 1), 2)


def test_network_rejects_self_loops_and_single_agent():
    with pytest.raises(ModelError):
        Network.from_sets(2, [(0,), ()], [(), ()])
    with pytest.raises(ModelError):
        Network.from_sets(1, [()], [()])


def test_consideration_set_examples():
    m = _binary_model()
    assert consideration_set_prob(m, 0, {0, 1}, (0, 0)) == pytest.approx(0.4, abs=1e-15)
    assert consideration_set_prob(m, 0, {0}, (0, 0)) == pytest.approx(0.6, abs=1e-15)
    assert consideration_set_prob(m, 0, {1}, (0, 0)) == 0.0
    m2 = _two_alt_model()
    assert consideration_set_prob(m2, 0, {0, 1}, (0, 0)) == pytest.approx(0.4 * 0.5, abs=1e-15)
    total = sum(consideration_set_prob(m2, 0, (0,) + C, (0, 0)) for C in subsets(2))
    assert total == pytest.approx(1.0, abs=1e-15)


def test_choice_prob_examples():
    assert choice_prob(_binary_model(), 0, 1, (0, 0)) == pytest.approx(0.2, abs=1e-15)
    m2 = _two_alt_model()
    # brute force over the four consideration sets
    sets = {(): 0.6 * 0.5, (1,): 0.4 * 0.5, (2,): 0.6 * 0.5, (1, 2): 0.4 * 0.5}
    for v in range(3):
        brute = sum(w * m2.r[0][(alts, (0,) * len(alts))][v] for alts, w in sets.items())
        assert choice_prob(m2, 0, v, (0, 0)) == pytest.approx(brute, abs=1e-15)


def test_full_consideration_reduces_to_rule():
    net = Network.from_sets(2, [(1,), ()], [(1,), ()])
    m = tabulate(2, net, lambda a, v, n: 1.0, lambda a, alts, c: np.arange(3) + 1.0 + np.r_[0, c, [0] * (2 - len(c))][:3])
    for y in itertools.product(range(3), repeat=2):
        nr = tuple(1 if y[1] == u else 0 for u in (1, 2))
        np.testing.assert_allclose(choice_probs(m, 0, y), m.r[0][((1, 2), nr)], atol=1e-15)


def test_restricted_examples():
    m2 = _two_alt_model()
    y = (0, 0)
    assert restricted_choice_prob(m2, 0, 1, y, ()) == choice_prob(m2, 0, 1, y)
    # binary menu: Q(v) R(v | {0, v})
    assert restricted_choice_prob(m2, 0, 1, y, (2,)) == pytest.approx(0.4 * 0.4, abs=1e-15)
    # brute force over subsets of {0, 1}
    brute = 0.6 * m2.r[0][((), ())][0] + 0.4 * m2.r[0][((1,), (0,))][0]
    assert restricted_choice_prob(m2, 0, 0, y, (2,)) == pytest.approx(brute, abs=1e-15)
    with pytest.raises(ModelError):
        restricted_choice_prob(m2, 0, 2, y, (2,))


def test_validator_flags_exponential_consideration():
    net = Network.from_sets(3, [(1, 2), (), ()], [(), (), ()])
    m = tabulate(1, net, lambda a, v, n: 0.2 * 2.0 ** n, lambda a, alts, c: np.array([1.0, 1.0]))
    report = validate_assumptions(m)
    assert report.status("A2(iii)", 0) == [False]


def test_validator_flags_exclusion_failure():
    net = Network.from_sets(2, [(1,), ()], [(1,), ()])
    m = tabulate(1, net, lambda a, v, n: 0.3 + 0.4 * n, lambda a, alts, c: np.array([1.0, 1.0 + sum(c)]))
    assert validate_assumptions(m).status("A4", 0) == [False]


def test_random_tables_fail_only_on_network_structure():
    # the tables always pass; a random network may still break the exclusion restriction
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = random_tables(2, random_network(3, rng), rng)
        assert {c.clause for c in validate_assumptions(m).failures()} <= {"A4"}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), A=st.integers(2, 4), Y=st.integers(1, 3))
def test_probability_identities(seed, A, Y):
    m = random_model(A, Y, np.random.default_rng(seed))
    for y in itertools.product(range(Y + 1), repeat=A):
        for a in range(A):
            total = sum(consideration_set_prob(m, a, (0,) + C, y) for C in subsets(Y))
            assert abs(total - 1) <= 1e-12
            p = choice_probs(m, a, y)
            assert abs(p.sum() - 1) <= 1e-12
            assert np.all((p > 0) & (p < 1))
            for v in range(1, Y + 1):
                assert abs(choice_prob_factorized(m, a, v, y) - p[v]) <= 1e-12
                assert restricted_choice_prob(m, a, v, y, ()) == p[v]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_choice_depends_on_counts_only(seed):
    rng = np.random.default_rng(seed)
    net = Network.from_sets(4, [(1, 2), (), (), ()], [(3,), (), (), ()])
    m = random_model(4, 2, rng, network=net)
    for y in itertools.product(range(3), repeat=4):
        swapped = (y[0], y[2], y[1], y[3])
        assert np.array_equal(choice_probs(m, 0, y), choice_probs(m, 0, swapped))


def test_model_file_round_trip(tmp_path):
    m = random_model(3, 2, np.random.default_rng(5))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.network == m.network
    assert model_to_dict(back) == model_to_dict(m)
    assert model_to_dict(model_from_dict(model_to_dict(m))) == model_to_dict(m)
