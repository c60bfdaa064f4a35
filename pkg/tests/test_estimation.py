from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peerchoice.estimation import (SAME_DAY_GAP, EstimationError, FirmPanel, Geography, Theta, attention_index,
                                   build_neighborhood_network, candidate_links, greedy_network_search,
                                   log_likelihood, log_likelihood_grad, maximize_likelihood, opening_probs,
                                   profit_index, read_firm_panel, read_geography, read_network,
                                   simulate_firm_panel, standard_errors, write_firm_data, write_network)


def _ring(M: int) -> np.ndarray:
    nbr = np.zeros((M, M), dtype=bool)
    for m in range(M):
        nbr[m, (m - 1) % M] = nbr[m, (m + 1) % M] = True
    return nbr


def test_neighbourhood_by_hand():
    # markets on the equator at these longitudes; ties go to the lower index
    geo = Geography([f"m{i}" for i in range(6)], ["P", "P", "Q", "Q", "R", "S"],
                    np.zeros(6), [0.0, 1.0, 2.0, 3.0, 5.0, 10.0], {(5, 4)})
    nbr = build_neighborhood_network(geo, 1)
    expected = {0: {1}, 1: {0}, 2: {1, 3}, 3: {2}, 4: {3, 5}, 5: {4}}
    assert {m: set(np.flatnonzero(nbr[m]).tolist()) for m in range(6)} == expected
    # nearest-neighbour links are directional
    assert nbr[2, 1] and not nbr[1, 2]
    W = candidate_links(nbr, 2)
    assert W.shape == (12, 2, 6)
    assert W[6 + 2, 0, 1] and W[6 + 2, 1, 3] and not W[6 + 2, 0, 0]


def test_indices_by_hand():
    F, M, K = 2, 2, 1
    th = Theta.zeros(F, K)
    v = th.values
    v[th.index("att_beta", 0, 0)] = 0.3
    v[th.index("att_alpha", 0, 0)] = 0.5
    v[th.index("att_gamma", 0, 0)] = -0.2
    v[th.index("att_delta", 0, 1)] = 0.7
    v[th.index("att_eta", 0, 1)] = 0.1
    v[th.index("pro_beta", 1, 0)] = -0.4
    v[th.index("pro_alpha", 1)] = 0.9
    v[th.index("pro_alpha_comp", 1)] = -1.1
    v[th.index("pro_gamma_comp", 1)] = 0.25
    th = Theta(F, K, v)
    W = np.zeros((F * M, F, M), dtype=bool)
    W[0, 1, 1] = True                       # firm 0 in market 0 watches firm 1 in market 1
    N = np.array([[1, 0], [2, 3]])
    S = np.ones((M, K))
    l2, l4 = np.log(2.0), np.log(4.0)
    want = 0.3 + 0.5 * l2 - 0.2 * l2 ** 2 + 0.7 * l4 + 0.1 * l4 ** 2
    assert attention_index(th, W, S, N, 0) == pytest.approx(want, abs=1e-14)
    # firm 1 in market 0: own count 2, competitor count 1
    want = -0.4 + 0.9 * np.log(3.0) - 1.1 * l2 + 0.25 * l2 ** 2
    assert profit_index(th, S, N, 2) == pytest.approx(want, abs=1e-14)


def test_opening_probabilities_at_zero():
    th = Theta.zeros(2, 1)
    W = candidate_links(_ring(3), 2)
    N = np.ones((2, 3), dtype=np.int64)
    np.testing.assert_allclose(opening_probs(th, W, np.ones((3, 1)), N), 0.25, atol=1e-15)
    full = Theta.zeros(2, 1, full_consideration=True)
    np.testing.assert_allclose(opening_probs(full, W, np.ones((3, 1)), N), 0.5, atol=1e-15)


def test_theta_layout_and_round_trip():
    th = Theta(2, 3, np.arange(Theta.size(2, 3), dtype=float))
    assert Theta.size(2, 3) == 2 * (3 + 8) + 2 * (3 + 4)
    names = th.names(["A", "B"], ["c", "x", "z"])
    assert names[th.index("att_delta", 1, 0)] == "att_delta[B,A]"
    assert names[th.index("pro_gamma_comp", 0)] == "pro_gamma_comp[A]"
    assert len(th.spillover_indices()) == 8
    back = Theta.from_dict(th.to_dict(["A", "B"], ["c", "x", "z"]))
    np.testing.assert_array_equal(back.values, th.values)
    with pytest.raises(EstimationError):
        Theta(2, 3, np.zeros(5))


def _single_firm_panel(horizon: float, seed: int):
    M = 6
    S = np.column_stack([np.ones(M), np.linspace(-1.0, 1.0, M)])
    th = Theta.zeros(1, 2)
    v, mask = th.values, np.zeros(th.values.size, dtype=bool)
    v[th.index("att_beta", 0, 0)] = 0.5
    v[th.index("pro_beta", 0, 1)] = -1.0
    v[th.index("pro_beta", 0, 0)] = -3.0
    mask[th.index("att_beta", 0, 0)] = mask[th.index("pro_beta", 0, 1)] = True
    truth = Theta(1, 2, v, mask)
    panel = simulate_firm_panel(truth, None, np.zeros((1, M), dtype=np.int64), S, horizon, seed)
    return panel, truth


def test_standard_errors_shrink_with_the_sample():
    ses = []
    for horizon in (2000.0, 20000.0):
        panel, truth = _single_firm_panel(horizon, 3)
        fit = maximize_likelihood(panel, None, truth)
        assert fit.converged
        se = standard_errors(fit.theta, None, panel)
        assert se.negative_definite
        assert se.asymmetry <= 1e-4 * np.abs(se.hessian).max()
        ses.append(se.se[truth.mask])
    ratio = ses[0] / ses[1]
    assert np.all((ratio > 2.5) & (ratio < 4.0)), ratio


def test_singular_hessian_is_reported():
    panel, truth = _single_firm_panel(500.0, 1)
    mask = truth.mask.copy()
    mask[truth.index("att_delta", 0, 0)] = True      # without links this feature is always zero
    with pytest.raises(EstimationError):
        standard_errors(Theta(1, 2, truth.values, mask), None, panel)


def test_zero_event_panel_is_degenerate():
    panel = FirmPanel(["A"], ["m0", "m1"], np.zeros((1, 2)), np.zeros(0), np.zeros((0, 2)), 50.0,
                      np.zeros(1), np.ones((1, 2, 1)), ["const"])
    th = Theta.zeros(1, 1)
    fit = maximize_likelihood(panel, None, th, max_iter=50, polish=0)
    assert fit.degenerate and not fit.converged
    assert fit.loglik > log_likelihood(th, None, panel)


def _two_firm_instance(seed: int = 0, M: int = 4, horizon: float = 800.0):
    W = candidate_links(_ring(M), 2)
    rng = np.random.default_rng(seed)
    th = Theta.zeros(2, 2)
    v = th.values
    for f in range(2):
        v[th.index("att_beta", f, 1)] = 1.0
        v[th.index("att_delta", f, 1 - f)] = 0.5
        v[th.index("pro_beta", f, 0)] = -1.5
        v[th.index("pro_alpha", f)] = -1.0
    truth = Theta(2, 2, v)
    S = np.column_stack([np.ones(M), rng.normal(size=M)])
    panel = simulate_firm_panel(truth, W, np.ones((2, M), dtype=np.int64), S, horizon, seed)
    return panel, truth, W


@settings(max_examples=10, deadline=None)
@given(perm=st.permutations(range(4)), seed=st.integers(0, 1000))
def test_relabelling_markets_keeps_the_likelihood(perm, seed):
    panel, truth, W = _two_firm_instance(seed % 5, horizon=200.0)
    perm = np.array(perm)
    F, M = 2, 4
    W2 = np.zeros_like(W)
    for f in range(F):
        for m in range(M):
            W2[f * M + perm[m]][:, perm] = W[f * M + m]
    theta = truth.with_values(truth.values + np.random.default_rng(seed).normal(scale=0.2, size=truth.values.size))
    a = log_likelihood(theta, W, panel)
    b = log_likelihood(theta, W2, panel.relabel_markets(perm))
    assert b == pytest.approx(a, rel=1e-12, abs=1e-9)


def test_full_consideration_has_no_attention_gradient():
    panel, truth, W = _two_firm_instance(horizon=200.0)
    th = Theta(2, 2, truth.values, full_consideration=True)
    _, g = log_likelihood_grad(th, W, panel)
    assert np.all(g[th.attention_indices()] == 0.0)
    assert np.any(g[th.attention_indices().size:] != 0.0)


def test_links_do_not_matter_without_spillover_coefficients():
    panel, truth, W = _two_firm_instance(horizon=300.0)
    mask = np.ones(truth.values.size, dtype=bool)
    vals = truth.values.copy()
    vals[truth.spillover_indices()] = 0.0
    mask[truth.spillover_indices()] = False
    start = Theta(2, 2, vals, mask)
    res = greedy_network_search(panel, W, start)
    assert res.trace[1]["stopped"] and res.trace[1]["delta"] == 0.0
    assert np.array_equal(res.W, W)
    assert res.fit.loglik == pytest.approx(maximize_likelihood(panel, None, start).loglik, abs=1e-6)


def test_greedy_trace_improves_every_round():
    panel, truth, W = _two_firm_instance(seed=2, M=3, horizon=600.0)
    res = greedy_network_search(panel, W, truth, max_rounds=3)
    steps = [row for row in res.trace[1:] if not row.get("stopped")]
    assert steps
    assert all(row["delta"] > 0 for row in steps)
    assert [row["links"] for row in res.trace[:len(steps) + 1]] == list(range(int(W.sum()), int(W.sum()) - len(steps) - 1, -1))


def _write(path, text):
    path.write_text(text)
    return path


def test_csv_round_trip(tmp_path):
    geo = Geography(["x", "y"], ["P", "Q"], [30.0, 30.1], [110.0, 110.5], {(0, 1)})
    panel = FirmPanel(["A", "B"], ["x", "y"], [[1, 0], [0, 2]], [1.0, 3.0, 7.0],
                      [[0, 1, 0, 0], [0, 0, 2, 0], [1, 0, 0, 0]], 7.0,
                      [0.0, 5.0], np.array([[[1.0, 0.5], [1.0, -0.5]], [[1.0, 0.25], [1.0, 2.0]]]),
                      ["const", "income"])
    write_firm_data(panel, geo, tmp_path)
    geo2 = read_geography(tmp_path / "geo.csv", tmp_path / "borders.csv")
    assert geo2.markets == geo.markets and geo2.borders == {(0, 1)}
    back = read_firm_panel(tmp_path / "openings.csv", tmp_path / "markets.csv", geo2, start="2020-01-01")
    assert back.firms == ["A", "B"]
    np.testing.assert_array_equal(back.n0, panel.n0)
    np.testing.assert_array_equal(back.times, panel.times)
    np.testing.assert_array_equal(back.increments, panel.increments)
    np.testing.assert_array_equal(back.cov_values, panel.cov_values)
    assert back.cov_names == panel.cov_names
    W = candidate_links(build_neighborhood_network(geo2, 1), 2)
    write_network(W, back, tmp_path / "network.json")
    np.testing.assert_array_equal(read_network(tmp_path / "network.json", back), W)


def test_same_day_openings_are_spaced(tmp_path):
    geo = Geography(["x", "y"], ["P", "P"], [0.0, 0.0], [0.0, 1.0])
    openings = _write(tmp_path / "o.csv", "date,firm,market\n2021-03-02,B,y\n2021-03-01,A,x\n"
                                          "2021-03-02,A,x\n2021-03-02,B,y\n")
    markets = _write(tmp_path / "m.csv", "market,date,pop\nx,2021-03-01,1.0\ny,2021-03-01,2.0\n")
    panel = read_firm_panel(openings, markets, geo)
    np.testing.assert_allclose(panel.times, [0.0, 1.0, 1.0 + SAME_DAY_GAP])
    # two rows for the same agent and day form one event of two stores
    np.testing.assert_array_equal(panel.increments, [[1, 0, 0, 0], [0, 0, 0, 2], [1, 0, 0, 0]])
    bad = _write(tmp_path / "bad.csv", "date,firm,market\n2021-03-01,A,z\n")
    with pytest.raises(EstimationError):
        read_firm_panel(bad, markets, geo)
    with pytest.raises(EstimationError):
        read_geography(_write(tmp_path / "g.csv", "market,province,lat\nx,P,1\n"))
