from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from peerchoice.benchmarks import counterfactual_economy
from peerchoice.counterfactual import (SCENARIOS, ScenarioError, apply_scenario, common_uniforms,
                                       market_structure_stats, run_scenarios, simulate_market_paths, summarize,
                                       write_structure_series, write_summary)
from peerchoice.estimation import Theta


def _closed_theta(F: int = 2) -> Theta:
    """Opening probability exactly zero everywhere."""
    th = Theta.zeros(F, 1)
    for f in range(F):
        th.values[th.index("pro_beta", f, 0)] = -800.0
    return th


def test_swapping_twice_is_the_identity():
    theta, W, n0, _ = counterfactual_economy()
    th, w, n = apply_scenario(theta, W, n0, "swapped_initial")
    np.testing.assert_array_equal(n, n0[::-1])
    _, _, back = apply_scenario(th, w, n, "swapped_initial")
    np.testing.assert_array_equal(back, n0)
    np.testing.assert_array_equal(th.values, theta.values)


def test_scenarios_touch_only_their_part():
    theta, W, n0, _ = counterfactual_economy()
    th, _, _ = apply_scenario(theta, W, n0, "no_spillover")
    changed = np.flatnonzero(th.values != theta.values)
    assert set(changed) <= set(theta.spillover_indices()) and changed.size
    again, _, _ = apply_scenario(th, W, n0, "no_spillover")
    np.testing.assert_array_equal(again.values, th.values)
    full, w, n = apply_scenario(theta, W, n0, "full_consideration")
    assert full.full_consideration and not theta.full_consideration
    np.testing.assert_array_equal(full.values, theta.values)
    np.testing.assert_array_equal(w, W)
    np.testing.assert_array_equal(n, n0)


def test_scenario_errors():
    three = Theta.zeros(3, 1)
    with pytest.raises(ScenarioError):
        apply_scenario(three, None, np.zeros((3, 2)), "swapped_initial")
    with pytest.raises(ScenarioError):
        apply_scenario(three, None, np.zeros((3, 2)), "merger")


def test_closed_markets_never_open():
    n0 = np.zeros((2, 3), dtype=np.int64)
    paths = simulate_market_paths(_closed_theta(), None, n0, np.ones((3, 1)), 50, 3, 0)
    assert all(d.size == 0 for d in paths.days)
    s = market_structure_stats(paths, np.arange(51))
    np.testing.assert_array_equal(s.unserved, 1.0)
    np.testing.assert_array_equal(s.duopoly, 0.0)


def test_zero_horizon_gives_empty_paths():
    theta, W, n0, S = counterfactual_economy()
    paths = simulate_market_paths(theta, W, n0, S, 0, 4, 1)
    assert paths.replications == 4
    assert all(d.size == 0 and a.size == 0 for d, a in zip(paths.days, paths.agents))


def test_constant_probability_gives_binomial_counts():
    # every coefficient zero: each agent opens with probability 1/4 every day
    theta = Theta.zeros(2, 1)
    paths = simulate_market_paths(theta, None, np.zeros((2, 3), dtype=np.int64), np.ones((3, 1)), 400, 20, 5)
    mean = np.mean([a.size for a in paths.agents]) / (400 * 6)
    assert abs(mean - 0.25) < 0.01


def test_market_structure_partition():
    n0 = np.zeros((2, 4), dtype=np.int64)
    n0[0] = 1
    s = market_structure_stats(simulate_market_paths(_closed_theta(), None, n0, np.ones((4, 1)), 10, 2, 0),
                               np.arange(11))
    np.testing.assert_array_equal(s.monopoly, 1.0)
    theta, W, n0, S = counterfactual_economy()
    s = market_structure_stats(simulate_market_paths(theta, W, n0, S, 100, 5, 3), np.arange(101))
    np.testing.assert_allclose(s.duopoly + s.monopoly + s.unserved, 1.0, atol=1e-15)
    assert np.all(np.diff(s.unserved, axis=1) <= 0)
    assert np.all(np.diff(s.duopoly, axis=1) >= 0)


def test_draws_are_reproducible_and_shared():
    theta, W, n0, S = counterfactual_economy()
    a = simulate_market_paths(theta, W, n0, S, 60, 3, 42)
    b = simulate_market_paths(theta, W, n0, S, 60, 3, 42)
    for x, y in zip(a.days + a.agents, b.days + b.agents):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(common_uniforms(42, 1, 5, 4), common_uniforms(42, 1, 5, 4))
    assert not np.array_equal(common_uniforms(42, 1, 5, 4), common_uniforms(42, 2, 5, 4))


def test_summary_and_files(tmp_path):
    theta, W, n0, S = counterfactual_economy()
    series = run_scenarios(theta, W, n0, S, 40, 2, 7, scenarios=SCENARIOS)
    summary = summarize(series, levels=(0.25,))
    assert set(summary) == set(SCENARIOS)
    assert "delay_vs_baseline_duopoly" not in summary["baseline"]
    full = summary["full_consideration"]
    base_t, full_t = summary["baseline"]["first_time_duopoly"]["0.25"], full["first_time_duopoly"]["0.25"]
    if base_t is not None and full_t is not None:
        assert full["delay_vs_baseline_duopoly"]["0.25"] == base_t - full_t
    write_structure_series(series, tmp_path / "s.csv")
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(SCENARIOS) * (2 + 1) * 41
    write_summary(summary, tmp_path / "summary.json")
    assert json.loads((tmp_path / "summary.json").read_text()) == json.loads(json.dumps(summary))
