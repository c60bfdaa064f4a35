from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peerchoice.benchmarks import cancelling_example, identification_benchmark, removal_example
from peerchoice.ctmc import all_configs, simulate_trajectory
from peerchoice.identification import (Anchor, IdentificationError, IdentifyOptions, Thresholds, classify_peers,
                                       counterfactual_ccp, identify_binary, identify_pipeline, load_anchors,
                                       recover_q_and_r, recover_q_ratios, recover_reference_groups, resolve_ncr)
from peerchoice.model import (ModelSpec, Network, identifiable_network, random_model, random_tables,
                              restricted_choice_prob)
from peerchoice.recovery import ccp_from_events, exact_ccp_table


def _relabel(m: ModelSpec, perm) -> ModelSpec:
    """Agent ``a`` becomes ``perm[a]``; tables only depend on peer counts."""
    A = m.n_agents
    inv = np.argsort(perm)
    net = Network.from_sets(A, [[perm[p] for p in m.network.nc[inv[b]]] for b in range(A)],
                            [[perm[p] for p in m.network.nr[inv[b]]] for b in range(A)])
    return ModelSpec(m.menu_size, net, tuple(m.q[inv[b]] for b in range(A)),
                     tuple(m.r[inv[b]] for b in range(A)), m.rates[inv])


def test_removal_example_counterfactual():
    m = removal_example()
    table = exact_ccp_table(m)
    ratios = recover_q_ratios(table, m.network)
    np.testing.assert_allclose(ratios[0][1], [2.0], atol=1e-12)
    value = counterfactual_ccp(table, m.network, ratios, (2,), (0, 0), 0, 1)
    assert value == pytest.approx(0.1, abs=1e-12)
    assert value == pytest.approx(restricted_choice_prob(m, 0, 1, (0, 0), (2,)), abs=1e-12)


def test_empty_removal_is_the_observed_ccp():
    m = random_model(3, 2, np.random.default_rng(4), network=lambda g: identifiable_network(3, 2, g))
    table = exact_ccp_table(m)
    ratios = recover_q_ratios(table, m.network)
    for y in all_configs(2, 3):
        for v in (1, 2):
            got = counterfactual_ccp(table, m.network, ratios, (), y, 1, v)
            assert got == pytest.approx(table.prob(1, v, y), abs=1e-14)


def test_removal_needs_enough_consideration_only_peers():
    m = removal_example()
    table = exact_ccp_table(m)
    ratios = recover_q_ratios(table, m.network)
    with pytest.raises(IdentificationError):
        counterfactual_ccp(table, m.network, ratios, (2,), (0, 2), 0, 1)
    with pytest.raises(IdentificationError):
        counterfactual_ccp(table, m.network, ratios, (1,), (0, 0), 0, 1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_removal_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    net = Network.from_sets(4, [(1, 2, 3), (0, 2), (0, 3), (1, 2)], [(3,), (3,), (1,), (0,)])
    m = random_model(4, 3, rng, network=net)
    table = exact_ccp_table(m)
    ratios = recover_q_ratios(table, m.network)
    y = (0, 0, 0, 1)
    for v, Z in ((1, (2, 3)), (3, (1, 2))):
        values = [counterfactual_ccp(table, m.network, ratios, Z, y, 0, v, order=o) for o in itertools.permutations(Z)]
        assert max(values) - min(values) <= 1e-11
        assert values[0] == pytest.approx(restricted_choice_prob(m, 0, v, y, Z), abs=1e-10)


def test_anchor_kinds_reproduce_the_tables():
    rng = np.random.default_rng(8)
    net = Network.from_sets(3, [(1, 2), (0,), (0, 1)], [(2,), (0, 2), (1,)])
    m = random_model(3, 2, rng, network=net)
    table = exact_ccp_table(m)
    ratios = recover_q_ratios(table, net)
    top = {(a, v): Anchor("q", len(net.nc[a]), float(m.q[a][v - 1, -1])) for a in range(3) for v in (1, 2)}
    rule = {(a, v): Anchor("r", len(net.nr[a]), float(m.r[a][((v,), (len(net.nr[a]),))][v]))
            for a in range(3) for v in (1, 2)}
    for anchors in (top, rule):
        q, r, notes = recover_q_and_r(table, net, ratios, anchors)
        for a in (0, 2):
            np.testing.assert_allclose(q[a], m.q[a], atol=1e-10)
            for key, dist in m.r[a].items():
                np.testing.assert_allclose(r[a][key], dist, atol=1e-9)
        # agent 1 has no consideration-only peer, so only its ratios are known
        assert 1 not in r and "consideration-only" in notes[1]
    with pytest.raises(IdentificationError):
        recover_q_and_r(table, net, ratios, {**top, (0, 1): Anchor("q", 5, 0.5)})


def test_anchor_file_round_trip(tmp_path):
    path = tmp_path / "anchors.json"
    path.write_text('[{"agent": 0, "alt": 1, "kind": "r", "count": 1, "value": 0.25}]')
    assert load_anchors(path) == {(0, 1): Anchor("r", 1, 0.25)}
    with pytest.raises(ValueError):
        Anchor("x", 0, 0.5)
    with pytest.raises(ValueError):
        Anchor("q", 0, 0.0)


def test_cancelling_peer_is_invisible():
    groups = recover_reference_groups(exact_ccp_table(cancelling_example()))
    assert groups.peers[0] == (2,)


def test_isolated_agent_has_no_peers():
    net = Network.from_sets(3, [(1,), (0,), ()], [(1,), (0,), ()])
    m = random_tables(2, net, np.random.default_rng(0))
    res = identify_pipeline(exact_ccp_table(m))
    assert res.peers[2] == ()
    assert res.nc[2] == () and res.nr[2] == ()


def test_single_alternative_cannot_be_classified():
    m = random_model(3, 1, np.random.default_rng(2), network=lambda g: identifiable_network(3, 1, g))
    table = exact_ccp_table(m)
    cls = classify_peers(table, recover_reference_groups(table))
    assert {info.status for info in cls.agents.values()} <= {"not_classifiable", "empty"}
    assert any(info.status == "not_classifiable" for info in cls.agents.values())


def test_binary_with_empty_preference_group():
    net = Network.from_sets(3, [(1, 2), (0, 2), (0, 1)], [(), (), ()])
    m = random_tables(1, net, np.random.default_rng(3))
    table = exact_ccp_table(m)
    cls = identify_binary(table, {a: ("nr", ()) for a in range(3)})
    for a in range(3):
        assert cls.agents[a].nr == ()
        assert cls.agents[a].nc == net.nc[a]
    with pytest.raises(IdentificationError):
        identify_binary(exact_ccp_table(identification_benchmark()), {})


def test_two_peers_without_consideration_only_peer_are_unresolved():
    net = Network.from_sets(3, [(1,), (0,), (0,)], [(1, 2), (0, 2), (0, 1)])
    m = random_tables(2, net, np.random.default_rng(11))
    table = exact_ccp_table(m)
    cls = resolve_ncr(table, classify_peers(table, recover_reference_groups(table)))
    info = cls.agents[0]
    assert info.peers == (1, 2)
    assert info.status == "unresolved" and not info.resolved


def test_effect_size_groups_on_benchmark():
    m = identification_benchmark()
    table = exact_ccp_table(m)
    cls = resolve_ncr(table, classify_peers(table, recover_reference_groups(table)))
    for a in range(m.n_agents):
        info = cls.agents[a]
        assert info.status == "resolved"
        pref = set(info.m1) | set(info.m2)
        assert pref == set(m.network.nr[a])
        assert set(info.consideration_only) == set(m.network.consideration_only(a))
        ncr = set(m.network.nc[a]) & set(m.network.nr[a])
        # both-group peers form one of at most two effect-size groups
        assert ncr in ({*info.m1}, {*info.m2}) or (not ncr and not info.m2)
        assert info.nc == m.network.nc[a] and info.nr == m.network.nr[a]


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), perm=st.permutations(range(4)))
def test_relabelling_agents_relabels_the_network(seed, perm):
    m = random_model(4, 2, np.random.default_rng(seed), network=lambda g: identifiable_network(4, 2, g))
    perm = list(perm)
    res = identify_pipeline(exact_ccp_table(m))
    res2 = identify_pipeline(exact_ccp_table(_relabel(m, perm)))
    for a in range(4):
        assert res2.nc[perm[a]] == tuple(sorted(perm[p] for p in res.nc[a]))
        assert res2.nr[perm[a]] == tuple(sorted(perm[p] for p in res.nr[a]))


def _edge_accuracy(res, net: Network) -> float:
    right = total = 0
    for a in range(net.n_agents):
        for p in range(net.n_agents):
            if p == a:
                continue
            for est, truth in ((res.nc[a], net.nc[a]), (res.nr[a], net.nr[a])):
                total += 1
                right += est is not None and (p in est) == (p in truth)
    return right / total


def test_statistical_mode_on_event_data():
    m = identification_benchmark()
    scores = []
    for seed in range(10):
        log = simulate_trajectory(m, [0] * m.n_agents, 1e6 / m.rates.sum(), seed)
        _, table, _ = ccp_from_events(log, m.n_agents, m.menu_size)
        res = identify_pipeline(table, IdentifyOptions(thresholds=Thresholds("statistical")))
        scores.append(_edge_accuracy(res, m.network))
    assert np.mean(scores) >= 0.95
