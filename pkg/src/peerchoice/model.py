"""Structural choice model with peer effects in consideration and preferences.

Agents pick from a menu ``{0, 1, ..., Y}`` where 0 is the default.  Agent ``a``
considers each nondefault alternative ``v`` independently with probability
``Q_a(v | n)``, where ``n`` counts the consideration peers currently choosing
``v``.  From the realised consideration set ``C`` it picks according to the
choice rule ``R_a(. | nr^C, C)``, where ``nr^C`` counts preference peers per
nondefault alternative in ``C``.

Tables are stored explicitly.  Parametric families are only used to fill them.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np

STATE_CAP = 2 ** 20
ZERO_TOL = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Network:
    """Directed consideration and preference edges.

    ``nc[a]`` and ``nr[a]`` are ascending tuples of peer indices.
    """

    n_agents: int
    nc: tuple[tuple[int, ...], ...]
    nr: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.n_agents < 2:
            raise ModelError("at least two agents are required")
        if len(self.nc) != self.n_agents or len(self.nr) != self.n_agents:
            raise ModelError("one peer set per agent is required")
        for a in range(self.n_agents):
            for peers in (self.nc[a], self.nr[a]):
                if a in peers:
                    raise ModelError(f"agent {a} cannot be its own peer")
                if any(p < 0 or p >= self.n_agents for p in peers):
                    raise ModelError(f"peer index out of range for agent {a}")
                if list(peers) != sorted(set(peers)):
                    raise ModelError(f"peer sets must be ascending and unique (agent {a})")

    @classmethod
    def from_sets(cls, n_agents: int, nc: Sequence[Iterable[int]], nr: Sequence[Iterable[int]]) -> "Network":
        return cls(n_agents,
                   tuple(tuple(sorted(set(s))) for s in nc),
                   tuple(tuple(sorted(set(s))) for s in nr))

    def peers(self, a: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.nc[a]) | set(self.nr[a])))

    def both(self, a: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.nc[a]) & set(self.nr[a])))

    def consideration_only(self, a: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.nc[a]) - set(self.nr[a])))

    def preference_only(self, a: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.nr[a]) - set(self.nc[a])))


def subsets(menu_size: int, exclude: Iterable[int] = ()) -> list[tuple[int, ...]]:
    """Nondefault parts of all consideration sets avoiding ``exclude``.

    Ordered by bitmask over ascending alternatives, so the empty set comes first.
    """
    excl = set(exclude)
    alts = [v for v in range(1, menu_size + 1) if v not in excl]
    out = []
    for mask in range(2 ** len(alts)):
        out.append(tuple(v for i, v in enumerate(alts) if mask >> i & 1))
    return out


def count_vectors(k: int, total: int) -> list[tuple[int, ...]]:
    """All length-``k`` nonnegative integer vectors with sum at most ``total``."""
    return [c for c in product(range(total + 1), repeat=k) if sum(c) <= total]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Ground-truth model.

    q[a] has shape ``(Y, |NC_a| + 1)``; row ``v - 1`` holds ``Q_a(v | n)``.
    r[a] maps ``(alts, counts)`` to a length ``Y + 1`` distribution, where
    ``alts`` is the ascending tuple of nondefault alternatives in the
    consideration set and ``counts`` the preference-peer counts for them.
    """

    menu_size: int
    network: Network
    q: tuple[np.ndarray, ...]
    r: tuple[dict, ...]
    rates: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        Y, net = self.menu_size, self.network
        if Y < 1:
            raise ModelError("menu needs at least one nondefault alternative")
        A = net.n_agents
        rates = np.asarray(self.rates, dtype=float)
        if rates.shape != (A,) or np.any(rates <= 0):
            raise ModelError("rates must be positive, one per agent")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        if len(self.q) != A or len(self.r) != A:
            raise ModelError("one Q and one R table per agent")
        qs = []
        for a in range(A):
            qa = np.array(self.q[a], dtype=float)
            if qa.shape != (Y, len(net.nc[a]) + 1):
                raise ModelError(f"Q table of agent {a} has shape {qa.shape}")
            if np.any(qa < 0) or np.any(qa > 1):
                raise ModelError(f"Q table of agent {a} outside [0, 1]")
            qa.setflags(write=False)
            qs.append(qa)
        object.__setattr__(self, "q", tuple(qs))
        for a in range(A):
            n_nr = len(net.nr[a])
            for alts in subsets(Y):
                for counts in count_vectors(len(alts), n_nr):
                    dist = self.r[a].get((alts, counts))
                    if dist is None:
                        raise ModelError(f"R table of agent {a} misses {(alts, counts)}")
                    dist = np.asarray(dist)
                    support = (0,) + alts
                    outside = np.delete(dist, support)
                    if (dist.shape != (Y + 1,) or np.any(dist < 0) or np.any(outside != 0)
                            or abs(dist.sum() - 1) > 1e-9):
                        raise ModelError(f"R row {(alts, counts)} of agent {a} is not a distribution on C")

    @property
    def n_agents(self) -> int:
        return self.network.n_agents

    @property
    def n_states(self) -> int:
        return (self.menu_size + 1) ** self.n_agents

    def rule(self, a: int, alts: tuple[int, ...], counts: tuple[int, ...]) -> np.ndarray:
        try:
            return self.r[a][(alts, counts)]
        except KeyError:
            raise ModelError(f"infeasible count vector {counts} for set {alts} of agent {a}") from None

    def ccp_from_counts(self, a: int, nc_counts: Sequence[int], nr_counts: Sequence[int]) -> np.ndarray:
        """Choice probabilities of agent ``a`` given peer counts per alternative."""
        key = (a, tuple(nc_counts), tuple(nr_counts))
        hit = self._cache.get(key)
        if hit is None:
            hit = _mixture(self, a, key[1], key[2], ())
            hit.setflags(write=False)
            self._cache[key] = hit
        return hit


def _check_config(net: Network, y: Sequence[int], menu_size: int | None = None) -> None:
    if len(y) != net.n_agents:
        raise ModelError(f"configuration has length {len(y)}, expected {net.n_agents}")
    if menu_size is not None and any(not 0 <= v <= menu_size for v in y):
        raise ModelError("configuration entry outside the menu")


def peer_counts(network: Network, a: int, y: Sequence[int], menu_size: int | None = None):
    """Counts of consideration and preference peers choosing each alternative.

    Both arrays have length ``Y + 1`` and are indexed by alternative.
    """
    _check_config(network, y, menu_size)
    Y = menu_size if menu_size is not None else max(max(y), 1)
    nc = np.zeros(Y + 1, dtype=int)
    nr = np.zeros(Y + 1, dtype=int)
    for p in network.nc[a]:
        nc[y[p]] += 1
    for p in network.nr[a]:
        nr[y[p]] += 1
    return nc, nr


def _set_prob(qv: Sequence[float], alts: tuple[int, ...], over: Iterable[int]) -> float:
    prob = 1.0
    for u in over:
        prob *= qv[u - 1] if u in alts else 1.0 - qv[u - 1]
    return prob


def _mixture(model: ModelSpec, a: int, nc: tuple, nr: tuple, removed: tuple) -> np.ndarray:
    Y = model.menu_size
    qv = [model.q[a][v - 1, nc[v]] for v in range(1, Y + 1)]
    over = [u for u in range(1, Y + 1) if u not in removed]
    out = np.zeros(Y + 1)
    for alts in subsets(Y, removed):
        w = _set_prob(qv, alts, over)
        if w:
            out += w * model.rule(a, alts, tuple(nr[u] for u in alts))
    return out


def consideration_set_prob(model: ModelSpec, a: int, C: Iterable[int], y: Sequence[int]) -> float:
    C = set(C)
    if 0 not in C:
        return 0.0
    nc, _ = peer_counts(model.network, a, y, model.menu_size)
    qv = [model.q[a][v - 1, nc[v]] for v in range(1, model.menu_size + 1)]
    alts = tuple(sorted(C - {0}))
    return _set_prob(qv, alts, range(1, model.menu_size + 1))


def choice_probs(model: ModelSpec, a: int, y: Sequence[int]) -> np.ndarray:
    nc, nr = peer_counts(model.network, a, y, model.menu_size)
    return model.ccp_from_counts(a, nc, nr)


def choice_prob(model: ModelSpec, a: int, v: int, y: Sequence[int]) -> float:
    return float(choice_probs(model, a, y)[v])


def choice_prob_factorized(model: ModelSpec, a: int, v: int, y: Sequence[int]) -> float:
    """Same quantity as :func:`choice_prob` for ``v != 0``, with ``Q_a(v|.)`` pulled out."""
    if v == 0:
        raise ModelError("the factorized form applies to nondefault alternatives")
    Y = model.menu_size
    nc, nr = peer_counts(model.network, a, y, Y)
    qv = [model.q[a][u - 1, nc[u]] for u in range(1, Y + 1)]
    over = [u for u in range(1, Y + 1) if u != v]
    total = 0.0
    for alts in subsets(Y, (v,)):
        full = tuple(sorted(alts + (v,)))
        total += model.rule(a, full, tuple(nr[u] for u in full))[v] * _set_prob(qv, alts, over)
    return qv[v - 1] * total


def restricted_choice_prob(model: ModelSpec, a: int, v: int, y: Sequence[int], Z: Iterable[int]) -> float:
    """Choice probability when the alternatives in ``Z`` are removed from the menu."""
    Z = tuple(sorted(set(Z)))
    if 0 in Z or any(not 1 <= z <= model.menu_size for z in Z):
        raise ModelError("removed alternatives must be nondefault menu items")
    if v in Z:
        raise ModelError("alternative is not on the restricted menu")
    nc, nr = peer_counts(model.network, a, y, model.menu_size)
    if not Z:
        return float(model.ccp_from_counts(a, nc, nr)[v])
    return float(_mixture(model, a, tuple(nc), tuple(nr), Z)[v])


# ---------------------------------------------------------------- validation

@dataclass
class Clause:
    agent: int
    clause: str
    ok: bool | None
    detail: str = ""


@dataclass
class ValidationReport:
    clauses: list[Clause]

    @property
    def passed(self) -> bool:
        return all(c.ok is not False for c in self.clauses)

    def failures(self) -> list[Clause]:
        return [c for c in self.clauses if c.ok is False]

    def status(self, clause: str, agent: int | None = None) -> list[bool | None]:
        return [c.ok for c in self.clauses if c.clause == clause and (agent is None or c.agent == agent)]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "clauses": [{"agent": c.agent, "clause": c.clause, "ok": c.ok, "detail": c.detail}
                            for c in self.clauses]}


def _peer_configs(model: ModelSpec, a: int, fixed: dict[int, int]):
    """Configurations over agent ``a``'s peers, with ``fixed`` entries pinned; others at 0."""
    free = [p for p in model.network.peers(a) if p not in fixed]
    base = [0] * model.n_agents
    for p, v in fixed.items():
        base[p] = v
    for vals in product(range(model.menu_size + 1), repeat=len(free)):
        y = list(base)
        for p, v in zip(free, vals):
            y[p] = v
        yield y


def _logp(model: ModelSpec, a: int, y: Sequence[int]) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(choice_probs(model, a, y))


def _switched(y: Sequence[int], *moves: tuple[int, int]) -> list[int]:
    y = list(y)
    for p, v in moves:
        y[p] = v
    return y


def validate_assumptions(model: ModelSpec, tol: float = ZERO_TOL) -> ValidationReport:
    """Check the maintained assumptions clause by clause.

    ``ok`` is ``None`` when a clause is vacuous for that agent.
    """
    net, Y = model.network, model.menu_size
    out: list[Clause] = []
    for a in range(model.n_agents):
        q = model.q[a]
        n_nc, n_nr = len(net.nc[a]), len(net.nr[a])

        out.append(Clause(a, "A2(i)", bool(np.all(q > 0)), f"min Q = {q.min():.3g}"))
        out.append(Clause(a, "A2(ii)", True, "tables indexed by counts"))
        ok, notes = True, []
        with np.errstate(divide="ignore"):
            lq = np.log(q)
        for v in range(1, Y + 1):
            if n_nc >= 1:
                step0 = lq[v - 1, 1] - lq[v - 1, 0]
                if abs(step0) <= tol:
                    ok = False
                    notes.append(f"v={v}: Q(1)/Q(0) = 1")
                if n_nc >= 2 and abs(step0 - (lq[v - 1, 2] - lq[v - 1, 1])) <= tol:
                    ok = False
                    notes.append(f"v={v}: Q(1)/Q(0) = Q(2)/Q(1)")
            for n in range(1, n_nc - 1):
                s0 = lq[v - 1, n + 1] - lq[v - 1, n]
                s1 = lq[v - 1, n + 2] - lq[v - 1, n + 1]
                if abs(s0) <= tol or abs(s0 - s1) <= tol:
                    notes.append(f"info: v={v} shape condition also fails at n={n}")
        out.append(Clause(a, "A2(iii)", ok if n_nc else None, "; ".join(notes)))

        # A3(i): every nondefault alternative is picked with positive probability
        # at every reachable state of the peers.
        ok = True
        for y in _peer_configs(model, a, {}):
            if np.any(choice_probs(model, a, y)[1:] <= 0):
                ok = False
                break
        out.append(Clause(a, "A3(i)", ok, "" if ok else f"zero choice probability at {y}"))
        out.append(Clause(a, "A3(ii)", True, "tables indexed by counts"))

        if n_nr == 0:
            out.append(Clause(a, "A3(iii)", None, "no preference peers"))
        else:
            ok, notes = True, []
            for v in range(1, Y + 1):
                signs = set()
                for alts in subsets(Y):
                    if v not in alts:
                        continue
                    zero = tuple(0 for _ in alts)
                    one = tuple(1 if u == v else 0 for u in alts)
                    d = model.rule(a, alts, one)[v] - model.rule(a, alts, zero)[v]
                    signs.add(0 if abs(d) <= tol else int(np.sign(d)))
                if 0 in signs or len(signs) > 1:
                    ok = False
                    notes.append(f"v={v}: signs {sorted(signs)}")
            out.append(Clause(a, "A3(iii)", ok, "; ".join(notes)))

        ncr = net.both(a)
        if ncr:
            ok = len(net.consideration_only(a)) + len(net.preference_only(a)) >= 1
            out.append(Clause(a, "A4", ok, ""))
        else:
            out.append(Clause(a, "A4", None, "no peer in both groups"))

        # Regularity: effects of a peer in both groups never cancel everywhere.
        if ncr:
            bad = [p for p in ncr if not _detectable(model, a, p, tol)]
            out.append(Clause(a, "A5(i)", not bad, f"undetectable peers {bad}" if bad else ""))
        else:
            out.append(Clause(a, "A5(i)", None, "no peer in both groups"))

        # Regularity: every preference peer shows a cross-alternative interaction.
        if Y >= 2 and n_nr and len(net.peers(a)) >= 2:
            bad = [p for p in net.nr[a] if not _interacts(model, a, p, tol)]
            out.append(Clause(a, "A5(ii)", not bad, f"no interaction for peers {bad}" if bad else ""))
        else:
            out.append(Clause(a, "A5(ii)", None, "needs Y >= 2 and two peers"))
    return ValidationReport(out)


def _detectable(model: ModelSpec, a: int, p: int, tol: float) -> bool:
    for y in _peer_configs(model, a, {p: 0}):
        base = _logp(model, a, y)
        for v in range(1, model.menu_size + 1):
            if abs(_logp(model, a, _switched(y, (p, v)))[v] - base[v]) > tol:
                return True
    return False


def _interacts(model: ModelSpec, a: int, p: int, tol: float) -> bool:
    Y = model.menu_size
    for w_peer in model.network.peers(a):
        if w_peer == p:
            continue
        for y in _peer_configs(model, a, {p: 0, w_peer: 0}):
            base = _logp(model, a, y)
            for v in range(1, Y + 1):
                first = _logp(model, a, _switched(y, (p, v)))[v]
                for w in range(1, Y + 1):
                    if w == v:
                        continue
                    second = _logp(model, a, _switched(y, (w_peer, w)))[v]
                    both = _logp(model, a, _switched(y, (p, v), (w_peer, w)))[v]
                    if abs(both - first - second + base[v]) > tol:
                        return True
    return False


# ---------------------------------------------------------------- generators

def tabulate(menu_size: int, network: Network, q_fn: Callable, r_fn: Callable, rates=None) -> ModelSpec:
    """Build a model from functions.

    ``q_fn(a, v, n)`` returns ``Q_a(v|n)``; ``r_fn(a, alts, counts)`` returns a
    length ``Y + 1`` vector of nonnegative weights on ``(0,) + alts``.
    """
    Y, A = menu_size, network.n_agents
    q = [np.array([[q_fn(a, v, n) for n in range(len(network.nc[a]) + 1)]
                   for v in range(1, Y + 1)]) for a in range(A)]
    r = []
    for a in range(A):
        table = {}
        for alts in subsets(Y):
            for counts in count_vectors(len(alts), len(network.nr[a])):
                w = np.zeros(Y + 1)
                raw = np.asarray(r_fn(a, alts, counts), dtype=float)
                support = [0, *alts]
                w[support] = raw[support]
                table[(alts, counts)] = w / w.sum()
        r.append(table)
    rates = np.ones(A) if rates is None else rates
    return ModelSpec(Y, network, tuple(q), tuple(r), np.asarray(rates, dtype=float))


def logit_rule(menu_size: int, utility: Callable) -> Callable:
    """Choice rule from a utility ``utility(a, v, alts, counts)``; the default has utility 0."""
    def rule(a, alts, counts):
        w = np.zeros(menu_size + 1)
        w[0] = 1.0
        for v in alts:
            w[v] = math.exp(utility(a, v, alts, counts))
        return w
    return rule


def threshold_consideration(base: Callable, shift: Callable, cdf: Callable = None) -> Callable:
    """Consideration from a latent threshold: ``Q_a(v|n) = cdf(base(a, v) + shift(a, v, n))``."""
    cdf = cdf or (lambda x: 1.0 / (1.0 + math.exp(-x)))
    return lambda a, v, n: cdf(base(a, v) + shift(a, v, n))


def random_network(n_agents: int, rng: np.random.Generator, p_c: float = 0.4, p_r: float = 0.4) -> Network:
    nc, nr = [], []
    for a in range(n_agents):
        others = [b for b in range(n_agents) if b != a]
        nc.append([b for b in others if rng.random() < p_c])
        nr.append([b for b in others if rng.random() < p_r])
    return Network.from_sets(n_agents, nc, nr)


def identifiable_network(n_agents: int, menu_size: int, rng: np.random.Generator) -> Network:
    """Random network in which every agent has at least two peers and at least
    ``menu_size - 1`` consideration-only peers, so the full table recovery applies."""
    need = max(menu_size - 1, 1)
    if n_agents - 1 < max(need, 2):
        raise ModelError("too few agents for the requested menu")
    nc, nr = [], []
    for a in range(n_agents):
        others = [int(b) for b in rng.permutation([b for b in range(n_agents) if b != a])]
        c, r = others[:need], []
        for b in others[need:]:
            kind = rng.integers(4)
            if kind in (1, 3):
                c.append(b)
            if kind in (2, 3):
                r.append(b)
        if len(set(c) | set(r)) < 2:
            r.append(others[-1])
        nc.append(sorted(c))
        nr.append(sorted(r))
    return Network.from_sets(n_agents, nc, nr)


def random_tables(menu_size: int, network: Network, rng: np.random.Generator, *,
                  q_low: float = 0.1, q_high: float = 0.9, rates=None) -> ModelSpec:
    """Random tabular model.

    Q entries are i.i.d. uniform.  Each choice-rule row starts from a Dirichlet
    draw over the consideration set and is tilted by preference-peer counts:
    a random increasing profile in the own count (with an agent-specific sign)
    plus small cross-alternative terms, bounded so the own effect dominates.
    """
    Y, A = menu_size, network.n_agents
    q = [rng.uniform(q_low, q_high, size=(Y, len(network.nc[a]) + 1)) for a in range(A)]
    r = []
    for a in range(A):
        n_nr = len(network.nr[a])
        sign = rng.choice([-1.0, 1.0], size=Y + 1)
        steps = rng.uniform(0.3, 1.0, size=(Y + 1, n_nr + 1))
        steps[:, 0] = 0.0
        profile = np.cumsum(steps, axis=1)
        cross = rng.uniform(-0.2, 0.2, size=(Y + 1, Y + 1))
        table = {}
        for alts in subsets(Y):
            support = [0, *alts]
            base = rng.dirichlet(np.ones(len(support)))
            for counts in count_vectors(len(alts), n_nr):
                nr = dict(zip(alts, counts))
                logw = np.log(base)
                for i, v in enumerate(alts, start=1):
                    logw[i] += sign[v] * profile[v, nr[v]]
                    logw[i] += sum(cross[v, u] * nr[u] for u in alts if u != v)
                w = np.exp(logw - logw.max())
                dist = np.zeros(Y + 1)
                dist[support] = w / w.sum()
                table[(alts, counts)] = dist
        r.append(table)
    if rates is None:
        rates = rng.uniform(0.5, 2.0, size=A)
    return ModelSpec(Y, network, tuple(q), tuple(r), np.asarray(rates, dtype=float))


def random_model(n_agents: int, menu_size: int, rng: np.random.Generator, *,
                 network: Network | Callable | None = None, accept: Callable | None = None,
                 max_tries: int = 1000, **kwargs) -> ModelSpec:
    """Rejection-sample a validator-passing model (and ``accept(model)`` if given).

    ``network`` is a fixed network or a function ``rng -> Network``.
    """
    for _ in range(max_tries):
        if callable(network):
            net = network(rng)
        else:
            net = network or random_network(n_agents, rng)
        model = random_tables(menu_size, net, rng, **kwargs)
        if (accept is None or accept(model)) and validate_assumptions(model).passed:
            return model
    raise ModelError("rejection budget exhausted")


# ---------------------------------------------------------------- serialization

def model_to_dict(model: ModelSpec) -> dict:
    net = model.network
    rows = []
    for a in range(model.n_agents):
        recs = []
        for (alts, counts), dist in sorted(model.r[a].items()):
            support = (0,) + alts
            recs.append({"consideration_set": list(support), "nr_counts": list(counts),
                         "distribution": [float(dist[v]) for v in support]})
        rows.append(recs)
    return {
        "menu_size": model.menu_size,
        "agents": model.n_agents,
        "lambda": [float(x) for x in model.rates],
        "nc": [list(s) for s in net.nc],
        "nr": [list(s) for s in net.nr],
        "q": [[[float(x) for x in row] for row in qa] for qa in model.q],
        "r": rows,
    }


def model_from_dict(doc: dict) -> ModelSpec:
    Y, A = int(doc["menu_size"]), int(doc["agents"])
    net = Network.from_sets(A, doc["nc"], doc["nr"])
    r = []
    for recs in doc["r"]:
        table = {}
        for rec in recs:
            support = [int(v) for v in rec["consideration_set"]]
            if support[0] != 0 or support != sorted(set(support)):
                raise ModelError(f"bad consideration set {support}")
            dist = np.zeros(Y + 1)
            dist[support] = rec["distribution"]
            table[(tuple(support[1:]), tuple(int(c) for c in rec["nr_counts"]))] = dist
        r.append(table)
    q = tuple(np.array(qa, dtype=float) for qa in doc["q"])
    return ModelSpec(Y, net, q, tuple(r), np.asarray(doc["lambda"], dtype=float))


def dumps_model(model: ModelSpec) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def model_hash(model: ModelSpec) -> str:
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()[:16]
