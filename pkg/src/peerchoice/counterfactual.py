"""Counterfactual scenarios for the fitted store-opening model."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .estimation import EstimationError, Theta, opening_probs

SCENARIOS = ("baseline", "full_consideration", "no_spillover", "swapped_initial")


class ScenarioError(ValueError):
    pass


def apply_scenario(theta: Theta, W, n0, scenario: str):
    """Return ``(theta, W, n0)`` transformed for one scenario.

    ``full_consideration`` sets every attention probability to one,
    ``no_spillover`` zeroes the neighbourhood coefficients and
    ``swapped_initial`` exchanges the two firms' initial store counts.  Profit
    coefficients are never touched.
    """
    n0 = np.array(n0, dtype=np.int64, copy=True)
    W = None if W is None else np.array(W, dtype=bool, copy=True)
    if scenario == "baseline":
        return replace(theta), W, n0
    if scenario == "full_consideration":
        return replace(theta, full_consideration=True), W, n0
    if scenario == "no_spillover":
        v = theta.values.copy()
        v[theta.spillover_indices()] = 0.0
        return theta.with_values(v), W, n0
    if scenario == "swapped_initial":
        if theta.n_firms != 2 or n0.shape[0] != 2:
            raise ScenarioError("swapping initial conditions needs exactly two firms")
        return replace(theta), W, n0[::-1].copy()
    raise ScenarioError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")


@dataclass
class MarketPaths:
    """Opening events per replication: ``days[r]`` and ``agents[r]`` list
    every opening (day index from 1, agent ``f * M + m``) in time order."""

    n0: np.ndarray
    horizon: int
    days: list
    agents: list

    @property
    def replications(self) -> int:
        return len(self.days)


def common_uniforms(seed: int, rep: int, horizon: int, n_agents: int) -> np.ndarray:
    """The shared per agent-day uniform draws of one replication."""
    return np.random.default_rng([seed, rep]).random((horizon, n_agents))


def simulate_market_paths(theta: Theta, W, n0, S, horizon: int, replications: int,
                          seed: int) -> MarketPaths:
    """Daily simulation: every agent decides once per day and opens a store
    when its uniform draw falls below its opening probability at the
    start-of-day state.  Covariates ``S`` (M, K) are held fixed.  Draws depend
    only on ``(seed, replication)``, so scenarios run with the same seed are
    coupled through common random numbers."""
    n0 = np.asarray(n0, dtype=np.int64)
    horizon = int(horizon)
    if horizon < 0:
        raise EstimationError("horizon must be nonnegative")
    S = np.asarray(S, dtype=float)
    A = n0.size
    days, agents = [], []
    for rep in range(replications):
        U = common_uniforms(seed, rep, horizon, A)
        N = n0.reshape(-1).copy()
        d_out, a_out = [], []
        for d in range(horizon):
            opened = np.flatnonzero(U[d] < opening_probs(theta, W, S, N))
            if opened.size:
                N[opened] += 1
                d_out += [d + 1] * opened.size
                a_out += opened.tolist()
        days.append(np.array(d_out, dtype=np.int64))
        agents.append(np.array(a_out, dtype=np.int64))
    return MarketPaths(n0.copy(), horizon, days, agents)


@dataclass
class MarketStructureSeries:
    """Fractions of markets served by both firms, one firm, or none.

    Per-replication arrays have shape ``(R, G)``; the means average over
    replications."""

    grid: np.ndarray
    duopoly: np.ndarray
    monopoly: np.ndarray
    unserved: np.ndarray

    @property
    def mean(self) -> dict:
        return {k: getattr(self, k).mean(axis=0) for k in ("duopoly", "monopoly", "unserved")}

    def first_time(self, kind: str, level: float):
        """First grid time at which the mean fraction reaches ``level``."""
        hit = np.flatnonzero(self.mean[kind] >= level)
        return None if hit.size == 0 else float(self.grid[hit[0]])


def market_structure_stats(paths: MarketPaths, grid) -> MarketStructureSeries:
    """Classify every market on the grid by how many firms have a store."""
    grid = np.asarray(grid, dtype=float)
    F, M = paths.n0.shape
    counts = np.zeros((3, paths.replications, grid.size), dtype=np.int64)
    first0 = np.where(paths.n0.reshape(-1) > 0, 0.0, np.inf)
    for r in range(paths.replications):
        first = first0.copy()
        for d, a in zip(paths.days[r], paths.agents[r]):
            first[a] = min(first[a], d)
        served = (first.reshape(F, M)[None] <= grid[:, None, None]).sum(axis=1)   # (G, M)
        counts[0, r] = (served >= 2).sum(axis=1)
        counts[1, r] = (served == 1).sum(axis=1)
        counts[2, r] = (served == 0).sum(axis=1)
    return MarketStructureSeries(grid, counts[0] / M, counts[1] / M, counts[2] / M)


def write_structure_series(series: dict, path) -> None:
    """``series`` maps scenario name to its MarketStructureSeries."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["t", "frac_duopoly", "frac_monopoly", "frac_unserved", "scenario", "replication"])
        for name, s in series.items():
            for r in range(s.duopoly.shape[0]):
                for g, t in enumerate(s.grid):
                    out.writerow([repr(float(t)), repr(float(s.duopoly[r, g])), repr(float(s.monopoly[r, g])),
                                  repr(float(s.unserved[r, g])), name, r])
            m = s.mean
            for g, t in enumerate(s.grid):
                out.writerow([repr(float(t)), repr(float(m["duopoly"][g])), repr(float(m["monopoly"][g])),
                              repr(float(m["unserved"][g])), name, "mean"])


def summarize(series: dict, levels=(0.25, 0.5, 0.75)) -> dict:
    """Time-to-threshold statistics and final fractions for each scenario."""
    out = {}
    for name, s in series.items():
        m = s.mean
        out[name] = {
            "final": {k: float(v[-1]) for k, v in m.items()},
            "first_time_duopoly": {str(x): s.first_time("duopoly", x) for x in levels},
            "first_time_monopoly": {str(x): s.first_time("monopoly", x) for x in levels},
        }
    base = out.get("baseline")
    if base is not None:
        for name, doc in out.items():
            if name == "baseline":
                continue
            doc["delay_vs_baseline_duopoly"] = {
                x: (None if doc["first_time_duopoly"][x] is None or base["first_time_duopoly"][x] is None
                    else base["first_time_duopoly"][x] - doc["first_time_duopoly"][x])
                for x in doc["first_time_duopoly"]}
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_scenarios(theta: Theta, W, n0, S, horizon: int, replications: int, seed: int,
                  scenarios=SCENARIOS, grid=None) -> dict:
    """Simulate each scenario with the same seed and return their series."""
    grid = np.arange(0, int(horizon) + 1) if grid is None else np.asarray(grid)
    out = {}
    for name in scenarios:
        th, w, n = apply_scenario(theta, W, n0, name)
        out[name] = market_structure_stats(simulate_market_paths(th, w, n, S, horizon, replications, seed), grid)
    return out
