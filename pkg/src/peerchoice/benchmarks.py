"""Fixed models used by the test suite and the ``generate --benchmark`` command."""
from __future__ import annotations

import numpy as np

from .model import ModelSpec, Network, logit_rule, tabulate, threshold_consideration


def identification_benchmark() -> ModelSpec:
    """Four agents, two alternatives, every peer type present.

    Preference peers interact strongly across alternatives and the default is
    visited often, so all identification tests have power at about 10^6 events.
    """
    net = Network.from_sets(4, [(1, 2), (0,), (3,), (0, 2)], [(2, 3), (2, 3), (0, 1), (0, 1)])

    def utility(a, v, alts, counts):
        own = counts[alts.index(v)]
        return -1.0 + 0.2 * v + 0.35 * own - 3.3 * own * (sum(counts) - own)

    q = threshold_consideration(lambda a, v: 0.2, lambda a, v, n: 1.9 * n)
    return tabulate(2, net, q, logit_rule(2, utility))


def small_binary_benchmark() -> ModelSpec:
    """Three agents, one alternative; every configuration is visited often."""
    net = Network.from_sets(3, [(1,), (2,), (0,)], [(2,), (0,), (1,)])
    q = threshold_consideration(lambda a, v: 0.3, lambda a, v, n: 0.8 * n)
    return tabulate(1, net, q, logit_rule(1, lambda a, v, alts, c: -0.2 + 0.7 * c[0]),
                    rates=[1.0, 1.3, 0.8])


def small_menu_benchmark() -> ModelSpec:
    """Three agents, two alternatives, moderate effects."""
    net = Network.from_sets(3, [(1, 2), (0,), (0, 1)], [(2,), (0, 2), (1,)])
    q = threshold_consideration(lambda a, v: 0.2 * v, lambda a, v, n: 0.9 * n)

    def utility(a, v, alts, counts):
        return -0.3 + 0.1 * v + 0.8 * counts[alts.index(v)]

    return tabulate(2, net, q, logit_rule(2, utility), rates=[1.0, 0.7, 1.4])


def removal_example() -> ModelSpec:
    """One consideration-only peer whose choice doubles the chance that the
    agent notices alternative 2.  Removing alternative 2 leaves ``P*(1|0) = 0.1``."""
    net = Network.from_sets(2, [(1,), ()], [(), ()])
    q = [np.array([[0.8, 0.6], [0.4, 0.8]]), np.array([[0.5], [0.5]])]
    r0 = {((), ()): [1.0, 0.0, 0.0], ((1,), (0,)): [0.875, 0.125, 0.0], ((2,), (0,)): [0.5, 0.0, 0.5],
          ((1, 2), (0, 0)): [0.3125, 0.4375, 0.25]}
    r1 = {((), ()): [1.0, 0.0, 0.0], ((1,), (0,)): [0.5, 0.5, 0.0], ((2,), (0,)): [0.5, 0.0, 0.5],
          ((1, 2), (0, 0)): [0.4, 0.3, 0.3]}
    r = tuple({k: np.array(v) for k, v in d.items()} for d in (r0, r1))
    return ModelSpec(2, net, tuple(q), r, np.ones(2))


def cancelling_example() -> ModelSpec:
    """Agent 0's peer 1 doubles consideration and halves the choice rule at
    every support point, so switching it never moves agent 0's choice
    probability.  The regularity condition fails and the peer is invisible."""
    net = Network.from_sets(3, [(1,), (), ()], [(1, 2), (), ()])
    q = [np.array([[0.4, 0.8]]), np.array([[0.5]]), np.array([[0.5]])]
    r0 = {((), ()): np.array([1.0, 0.0])}
    for n, p in enumerate((0.6, 0.3, 0.15)):
        r0[((1,), (n,))] = np.array([1.0 - p, p])
    other = {((), ()): np.array([1.0, 0.0]), ((1,), (0,)): np.array([0.5, 0.5])}
    return ModelSpec(1, net, tuple(q), (r0, other, dict(other)), np.ones(3))


BENCHMARKS = {
    "identification": identification_benchmark,
    "binary": small_binary_benchmark,
    "small": small_menu_benchmark,
    "removal": removal_example,
    "cancelling": cancelling_example,
}


def counterfactual_economy(n_markets: int = 12, seed: int = 0):
    """Two firms on a ring of markets with attention well below one.

    Returns ``(theta, W, n0, S)``.  Profit does not depend on the
    competitor's count, so a firm's first entry into a market can only come
    earlier when attention is switched on everywhere.
    """
    from .estimation import Theta, candidate_links

    rng = np.random.default_rng(seed)
    F, M, K = 2, n_markets, 2
    nbr = np.zeros((M, M), dtype=bool)
    for m in range(M):
        nbr[m, (m - 1) % M] = nbr[m, (m + 1) % M] = True
    W = candidate_links(nbr, F)
    th = Theta.zeros(F, K)
    v = th.values
    for f in range(F):
        v[th.index("att_beta", f, 0)] = -2.5
        v[th.index("att_beta", f, 1)] = 0.5
        v[th.index("att_delta", f, f)] = 1.2
        v[th.index("att_delta", f, 1 - f)] = 0.6
        v[th.index("att_alpha", f, f)] = 1.0
        v[th.index("pro_beta", f, 0)] = -3.0
        v[th.index("pro_beta", f, 1)] = 0.4
        v[th.index("pro_alpha", f)] = -1.5
    S = np.column_stack([np.ones(M), rng.normal(size=M)])
    n0 = np.zeros((F, M), dtype=np.int64)
    n0[0, : M // 3] = 1
    n0[1, M - M // 4:] = 1
    return Theta(F, K, v), W, n0, S


def firm_data_benchmark(n_markets: int = 10, horizon: float = 2000.0, seed: int = 0, k_nearest: int = 2):
    """Simulated two-firm data on a line of markets.

    Returns ``(panel, geo, theta, W)``.  The first covariate only shifts
    attention and the second only shifts profit; ``theta.mask`` frees exactly
    the coefficients that the data can pin down.
    """
    from .estimation import Geography, Theta, build_neighborhood_network, candidate_links, simulate_firm_panel

    rng = np.random.default_rng(seed)
    F, M, K = 2, n_markets, 3
    geo = Geography([f"m{m:02d}" for m in range(M)], [f"p{m}" for m in range(M)],
                    30.0 + 0.05 * rng.normal(size=M), 110.0 + 0.5 * np.arange(M))
    W = candidate_links(build_neighborhood_network(geo, k_nearest), F)
    th = Theta.zeros(F, K)
    v, mask = th.values, np.ones(th.values.size, dtype=bool)
    for f in range(F):
        v[th.index("att_beta", f, 1)] = 3.0
        v[th.index("att_alpha", f, f)] = 0.3
        v[th.index("att_delta", f, f)] = 0.4
        v[th.index("pro_beta", f, 2)] = 0.8
        v[th.index("pro_alpha", f)] = -1.2
        v[th.index("pro_alpha_comp", f)] = -0.4
        mask[th.index("att_beta", f, 2)] = False
        mask[th.index("pro_beta", f, 1)] = False
    theta = Theta(F, K, v, mask)
    T = int(horizon // 100) + 1
    base = np.column_stack([np.linspace(-1.5, 1.5, M), np.cos(2.0 * np.arange(M))])
    walk = np.cumsum(rng.normal(scale=0.35, size=(T, M, 2)), axis=0) + base
    path = np.concatenate([np.ones((T, M, 1)), walk], axis=2)
    panel = simulate_firm_panel(theta, W, np.ones((F, M), dtype=np.int64), path, horizon, seed,
                                cov_times=100.0 * np.arange(T), firms=["A", "B"], markets=geo.markets,
                                cov_names=["const", "s1", "s2"])
    return panel, geo, theta, W
