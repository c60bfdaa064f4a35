"""Constructive identification of the network, consideration and preferences
from a table of conditional choice probabilities.

Every "is it zero" decision goes through :class:`Thresholds`.  Exact tables use
a fixed tolerance on log-probability differences.  Estimated tables use a
multiple of the delta-method standard error, or an absolute user threshold.
Each decision is recorded as an :class:`Evidence` entry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .ctmc import _strides
from .model import ZERO_TOL, ModelSpec, Network, count_vectors, subsets
from .recovery import CcpTable


class IdentificationError(ValueError):
    pass


class MissingCellError(IdentificationError):
    pass


@dataclass(frozen=True)
class Thresholds:
    mode: str = "exact"
    tol: float = ZERO_TOL
    z: float = 3.0
    threshold: float | None = None

    def __post_init__(self):
        if self.mode not in ("exact", "statistical"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class Evidence:
    agent: int
    test: str
    configs: list
    statistic: float
    threshold: float
    verdict: bool

    def to_dict(self) -> dict:
        return {"agent": self.agent, "test": self.test,
                "configs": [list(map(int, c)) for c in self.configs],
                "statistic": float(self.statistic), "threshold": float(self.threshold),
                "verdict": "nonzero" if self.verdict else "zero"}


def _sw(y: Sequence[int], *moves: tuple[int, int]) -> tuple[int, ...]:
    y = list(y)
    for p, v in moves:
        y[p] = v
    return tuple(y)


class _Cells:
    """Log-probability lookups and zero tests on one table."""

    def __init__(self, table: CcpTable, th: Thresholds):
        self.table = table
        self.th = th
        self.A = table.n_agents
        self.Y = table.menu_size
        self.zero = (0,) * self.A
        with np.errstate(divide="ignore", invalid="ignore"):
            self.logp = np.log(table.probs)
            if table.counts is not None:
                p = table.probs
                self.var = (1.0 - p) / (table.counts[:, :, None] * p)
            else:
                self.var = None

    def log(self, a: int, v: int, y) -> float:
        x = self.logp[a, self.table.index(y), v]
        if not np.isfinite(x):
            raise MissingCellError(f"cell P_{a}({v}|{tuple(y)}) is not observed")
        return float(x)

    def test(self, a: int, v: int, terms: Sequence[tuple[float, tuple]], name: str,
             evidence: list | None = None) -> tuple[float, bool]:
        stat = sum(c * self.log(a, v, y) for c, y in terms)
        if self.th.mode == "exact":
            thr = self.th.tol
        elif self.th.threshold is not None:
            thr = self.th.threshold
        else:
            var = sum(c * c * self.var[a, self.table.index(y), v] for c, y in terms)
            thr = self.th.z * float(np.sqrt(var))
        verdict = abs(stat) > thr
        if evidence is not None:
            evidence.append(Evidence(a, name, [y for _, y in terms], stat, thr, verdict))
        return stat, verdict


def _peer_grid(A: int, Y: int, free: Sequence[int], fixed: dict[int, int]):
    base = [0] * A
    for p, v in fixed.items():
        base[p] = v
    for vals in product(range(Y + 1), repeat=len(free)):
        y = list(base)
        for p, v in zip(free, vals):
            y[p] = v
        yield tuple(y)


# ---------------------------------------------------------------- reference groups

@dataclass
class ReferenceGroups:
    peers: dict[int, tuple[int, ...]]
    evidence: list[Evidence]


def recover_reference_groups(table: CcpTable, th: Thresholds | None = None, *,
                             exhaustive: bool | None = None) -> ReferenceGroups:
    """Peers of each agent: switching them moves its log choice probabilities.

    The canonical test switches a candidate from 0 to each ``v`` at the
    all-default configuration.  When that is silent and ``exhaustive`` is set
    (default in exact mode) every pair of observed configurations differing in
    the candidate's entry is scanned.
    """
    th = th or Thresholds()
    cells = _Cells(table, th)
    exhaustive = th.mode == "exact" if exhaustive is None else exhaustive
    A, Y = cells.A, cells.Y
    strides = _strides(A, Y)
    evidence: list[Evidence] = []
    peers: dict[int, tuple[int, ...]] = {}
    for a in range(A):
        found = []
        for p in range(A):
            if p == a:
                continue
            hit = False
            for v in range(1, Y + 1):
                _, verdict = cells.test(a, v, [(1.0, _sw(cells.zero, (p, v))), (-1.0, cells.zero)],
                                        f"reference switch peer={p} alt={v}", evidence)
                hit |= verdict
            if not hit and exhaustive:
                hit = _scan_switches(cells, a, p, strides, evidence)
            if hit:
                found.append(p)
        peers[a] = tuple(found)
    return ReferenceGroups(peers, evidence)


def _scan_switches(cells: _Cells, a: int, p: int, strides, evidence) -> bool:
    A, Y = cells.A, cells.Y
    S = cells.table.n_states
    logp = cells.logp[a]
    own = (np.arange(S) // strides[p]) % (Y + 1)
    best, where = 0.0, None
    for b in range(Y + 1):
        base = np.flatnonzero(own == b)
        for b2 in range(Y + 1):
            if b2 == b:
                continue
            partner = base + (b2 - b) * strides[p]
            with np.errstate(invalid="ignore"):
                d = np.abs(logp[partner] - logp[base])
            if cells.th.mode == "statistical":
                if cells.th.threshold is not None:
                    thr = cells.th.threshold
                else:
                    thr = cells.th.z * np.sqrt(cells.var[a][partner] + cells.var[a][base])
                with np.errstate(invalid="ignore"):
                    d = d - thr
            else:
                d = d - cells.th.tol
            d = np.where(np.isfinite(d), d, -np.inf)
            k = np.unravel_index(np.argmax(d), d.shape)
            if d[k] > best:
                best, where = float(d[k]), (int(base[k[0]]), int(partner[k[0]]), int(k[1]))
    if where is None:
        evidence.append(Evidence(a, f"reference scan peer={p}", [], 0.0, 0.0, False))
        return False
    s0, s1, v = where
    from .ctmc import lex_unindex
    y0, y1 = lex_unindex(s0, Y, A), lex_unindex(s1, Y, A)
    cells.test(a, v, [(1.0, y1), (-1.0, y0)], f"reference scan peer={p} alt={v}", evidence)
    return True


# ---------------------------------------------------------------- peer types

@dataclass
class AgentPeers:
    agent: int
    peers: tuple[int, ...]
    status: str
    consideration_only: tuple[int, ...] = ()
    m1: tuple[int, ...] = ()
    m2: tuple[int, ...] = ()
    nc: tuple[int, ...] | None = None
    nr: tuple[int, ...] | None = None
    note: str = ""

    @property
    def resolved(self) -> bool:
        return self.nc is not None and self.nr is not None


@dataclass
class PeerClassification:
    agents: dict[int, AgentPeers]
    evidence: list[Evidence] = field(default_factory=list)


def _double(cells: _Cells, a: int, v: int, y, first: tuple[int, int], second: tuple[int, int],
            name: str, evidence) -> bool:
    terms = [(1.0, _sw(y, first, second)), (-1.0, _sw(y, first)), (-1.0, _sw(y, second)), (1.0, tuple(y))]
    return cells.test(a, v, terms, name, evidence)[1]


def classify_peers(table: CcpTable, groups: ReferenceGroups | dict, th: Thresholds | None = None, *,
                   exhaustive: bool | None = None) -> PeerClassification:
    """Split each reference group into consideration-only peers and two
    preference groups separated by the size of their single-switch effect."""
    th = th or Thresholds()
    cells = _Cells(table, th)
    exhaustive = th.mode == "exact" if exhaustive is None else exhaustive
    A, Y = cells.A, cells.Y
    peer_map = groups.peers if isinstance(groups, ReferenceGroups) else groups
    evidence: list[Evidence] = []
    out: dict[int, AgentPeers] = {}
    for a in range(A):
        N = tuple(sorted(peer_map[a]))
        if not N:
            out[a] = AgentPeers(a, N, "empty", nc=(), nr=())
            continue
        if Y < 2 or len(N) < 2:
            out[a] = AgentPeers(a, N, "not_classifiable",
                                note="needs at least two alternatives besides the default and two peers")
            continue
        cons_only, pref = [], []
        for p in N:
            moved = False
            for y in [cells.zero]:
                moved = _cross_interaction(cells, a, p, N, y, evidence)
                if moved:
                    break
            if not moved and exhaustive:
                for w_peer in N:
                    if w_peer == p or moved:
                        continue
                    free = [q for q in N if q not in (p, w_peer)]
                    for y in _peer_grid(A, Y, free, {p: 0, w_peer: 0}):
                        if y == cells.zero:
                            continue
                        if _cross_interaction(cells, a, p, (p, w_peer), y, evidence, quiet=True):
                            moved = True
                            break
            (pref if moved else cons_only).append(p)
        m1, m2, ok = _magnitude_groups(cells, a, pref, evidence)
        status = "classified" if ok else "ambiguous"
        note = "" if ok else "preference peers fall into more than two effect sizes"
        out[a] = AgentPeers(a, N, status, tuple(cons_only), m1, m2, note=note)
    return PeerClassification(out, evidence)


def _cross_interaction(cells: _Cells, a: int, p: int, N, y, evidence, quiet: bool = False) -> bool:
    Y = cells.Y
    for w_peer in N:
        if w_peer == p:
            continue
        for v in range(1, Y + 1):
            for w in range(1, Y + 1):
                if w == v:
                    continue
                log = None if quiet else evidence
                try:
                    hit = _double(cells, a, v, y, (p, v), (w_peer, w),
                                  f"cross interaction peer={p} witness={w_peer} alt={v} other={w}", log)
                except MissingCellError:
                    if y == cells.zero:
                        raise
                    continue
                if hit:
                    if quiet:
                        _double(cells, a, v, y, (p, v), (w_peer, w),
                                f"cross interaction peer={p} witness={w_peer} alt={v} other={w}", evidence)
                    return True
    return False


def _magnitude_groups(cells: _Cells, a: int, pref: list[int], evidence):
    """Single-linkage grouping of preference peers by their switch effects at 0."""
    Y = cells.Y
    if not pref:
        return (), (), True
    parent = {p: p for p in pref}

    def find(p):
        while parent[p] != p:
            p = parent[p]
        return p

    for i, p in enumerate(pref):
        for q in pref[i + 1:]:
            same = True
            for v in range(1, Y + 1):
                terms = [(1.0, _sw(cells.zero, (p, v))), (-1.0, _sw(cells.zero, (q, v)))]
                if cells.test(a, v, terms, f"effect size peer={p} vs peer={q} alt={v}", evidence)[1]:
                    same = False
            if same:
                parent[find(q)] = find(p)
    roots = sorted({find(p) for p in pref}, key=lambda r: min(q for q in pref if find(q) == r))
    blocks = [tuple(q for q in pref if find(q) == r) for r in roots]
    if len(blocks) > 2:
        return blocks[0], tuple(sorted(set(pref) - set(blocks[0]))), False
    return blocks[0], blocks[1] if len(blocks) > 1 else (), True


def resolve_ncr(table: CcpTable, classification: PeerClassification,
                th: Thresholds | None = None) -> PeerClassification:
    """Decide which preference group also shifts consideration."""
    th = th or Thresholds()
    cells = _Cells(table, th)
    Y = cells.Y
    evidence = list(classification.evidence)
    out = {}
    for a, info in classification.agents.items():
        if info.status != "classified":
            out[a] = info
            continue
        pref = tuple(sorted(info.m1 + info.m2))
        co = info.consideration_only
        if co:
            anchor = co[0]
            ncr = []
            for q in pref:
                hit = False
                for v in range(1, Y + 1):
                    hit |= _double(cells, a, v, cells.zero, (anchor, v), (q, v),
                                   f"both-groups test peer={q} via consideration-only={anchor} alt={v}",
                                   evidence)
                if hit:
                    ncr.append(q)
            ncr = tuple(ncr)
            consistent = ncr in (info.m1, info.m2) or (not ncr and not info.m2)
            note = "" if consistent else "both-groups peers do not coincide with an effect-size group"
            out[a] = AgentPeers(a, info.peers, "resolved", co, info.m1, info.m2,
                                tuple(sorted(co + ncr)), pref, note)
            continue
        if not info.m2:
            # one effect size and no consideration-only peer: nobody can be in
            # both groups without breaking the exclusion restriction
            out[a] = AgentPeers(a, info.peers, "resolved", co, info.m1, info.m2, (), pref)
            continue
        if len(info.peers) < 3:
            out[a] = AgentPeers(a, info.peers, "unresolved", co, info.m1, info.m2,
                                note="two peers, no consideration-only peer, two effect sizes")
            continue
        p1, p2 = info.m1[0], info.m2[0]
        labels = set()
        for p3 in info.peers:
            if p3 in (p1, p2):
                continue
            hit = False
            for v in range(1, Y + 1):
                y1 = _sw(cells.zero, (p1, v))
                y2 = _sw(cells.zero, (p2, v))
                terms = [(1.0, _sw(y1, (p3, v))), (-1.0, y1), (-1.0, _sw(y2, (p3, v))), (1.0, y2)]
                hit |= cells.test(a, v, terms, f"synthetic switch peers={p1},{p2} third={p3} alt={v}",
                                  evidence)[1]
            group = info.m1 if p3 in info.m1 else info.m2
            labels.add(group if hit else (info.m2 if group is info.m1 else info.m1))
        if len(labels) != 1:
            out[a] = AgentPeers(a, info.peers, "unresolved", co, info.m1, info.m2,
                                note="synthetic-switch tests disagree")
            continue
        ncr = labels.pop()
        out[a] = AgentPeers(a, info.peers, "resolved", co, info.m1, info.m2, tuple(sorted(ncr)), pref)
    return PeerClassification(out, evidence)


# ---------------------------------------------------------------- binary menus

def identify_binary(table: CcpTable, known: dict[int, tuple[str, Iterable[int]]],
                    th: Thresholds | None = None, groups: ReferenceGroups | None = None) -> PeerClassification:
    """Network recovery with a single nondefault alternative.

    ``known[a]`` is ``("nr", peers)`` or ``("nc", peers)``.
    """
    th = th or Thresholds()
    if table.menu_size != 1:
        raise IdentificationError("the binary path needs exactly one nondefault alternative")
    cells = _Cells(table, th)
    groups = groups or recover_reference_groups(table, th)
    evidence = list(groups.evidence)
    out = {}
    for a in range(cells.A):
        N = tuple(sorted(groups.peers[a]))
        if a not in known:
            out[a] = AgentPeers(a, N, "unresolved", note="neither peer group supplied")
            continue
        side, given = known[a]
        given = tuple(sorted(set(given)))
        note = ""
        if not set(given) <= set(N):
            note = f"supplied peers {sorted(set(given) - set(N))} show no effect"
        if side == "nr":
            nr = given
            if not nr:
                nc = N
            elif set(N) <= set(nr):
                nc = ()
            else:
                co = [p for p in N if p not in nr]
                anchor = co[0]
                ncr = tuple(q for q in nr if q in N and _double(
                    cells, a, 1, cells.zero, (anchor, 1), (q, 1),
                    f"both-groups test peer={q} via consideration-only={anchor}", evidence))
                nc = tuple(sorted(co + list(ncr)))
            out[a] = AgentPeers(a, N, "resolved", tuple(p for p in nc if p not in nr), nc=nc, nr=nr, note=note)
        elif side == "nc":
            nc = given
            if not nc:
                nr = N
            elif set(N) <= set(nc):
                nr = ()
            else:
                nr = _binary_from_nc(cells, a, N, nc, evidence)
                if nr is None:
                    out[a] = AgentPeers(a, N, "unresolved", note="effect sizes inconsistent with the supplied group")
                    continue
            out[a] = AgentPeers(a, N, "resolved", tuple(p for p in nc if p not in nr), nc=nc, nr=nr, note=note)
        else:
            raise IdentificationError(f"unknown side {side!r}")
    return PeerClassification(out, evidence)


def _binary_from_nc(cells: _Cells, a: int, N, nc, evidence):
    zero = cells.zero
    pref_only = [p for p in N if p not in nc]
    effect = {p: cells.log(a, 1, _sw(zero, (p, 1))) - cells.log(a, 1, zero) for p in N}
    r = effect[pref_only[0]]
    members = [p for p in nc if p in N]
    vals = sorted({round(effect[p], 12) for p in members})
    # cluster the consideration peers by effect size
    blocks: list[list[int]] = []
    for p in members:
        for blk in blocks:
            terms = [(1.0, _sw(zero, (p, 1))), (-1.0, _sw(zero, (blk[0], 1)))]
            if not cells.test(a, 1, terms, f"effect size peer={p} vs peer={blk[0]}", evidence)[1]:
                blk.append(p)
                break
        else:
            blocks.append([p])
    del vals
    if len(blocks) == 1:
        return tuple(pref_only)
    if len(blocks) > 2:
        return None
    e0, e1 = effect[blocks[0][0]], effect[blocks[1][0]]
    # the group in both sets carries the preference effect on top of the consideration one
    both = blocks[1] if abs((e1 - e0) - r) <= abs((e0 - e1) - r) else blocks[0]
    return tuple(sorted(pref_only + both))


# ---------------------------------------------------------------- consideration ratios

def _resolved_sets(network) -> tuple[list, list]:
    if isinstance(network, Network):
        return list(network.nc), list(network.nr)
    if isinstance(network, PeerClassification):
        return ([network.agents[a].nc for a in sorted(network.agents)],
                [network.agents[a].nr for a in sorted(network.agents)])
    nc, nr = network
    return list(nc), list(nr)


def recover_q_ratios(table: CcpTable, network, agents: Iterable[int] | None = None) -> dict[int, np.ndarray]:
    """Ratios ``Q_a(v|n+1) / Q_a(v|n)`` with shape ``(Y, |NC_a|)`` per agent."""
    cells = _Cells(table, Thresholds())
    A, Y = cells.A, cells.Y
    nc_all, nr_all = _resolved_sets(network)
    out = {}
    for a in (range(A) if agents is None else agents):
        nc, nr = nc_all[a], nr_all[a]
        if nc is None or nr is None:
            continue
        nc, nr = tuple(sorted(nc)), tuple(sorted(nr))
        ratios = np.empty((Y, len(nc)))
        co = [p for p in nc if p not in nr]
        ncr = [p for p in nc if p in nr]
        po = [p for p in nr if p not in nc]
        if nc and not co and not po:
            raise IdentificationError(f"agent {a}: exclusion restriction fails, ratios not identified")
        for v in range(1, Y + 1):
            for n in range(len(nc)):
                if co:
                    mover = co[0]
                    others = [p for p in nc if p != mover][:n]
                    y = _sw(cells.zero, *[(p, v) for p in others])
                    hi, lo = _sw(y, (mover, v)), y
                else:
                    mover, partner = ncr[0], po[0]
                    others = [p for p in ncr if p != mover][:n]
                    y = _sw(cells.zero, *[(p, v) for p in others])
                    hi, lo = _sw(y, (mover, v)), _sw(y, (partner, v))
                ratios[v - 1, n] = np.exp(cells.log(a, v, hi) - cells.log(a, v, lo))
        out[a] = ratios
    return out


def counterfactual_ccp(table: CcpTable, network, ratios: dict[int, np.ndarray], Z: Iterable[int],
                       y: Sequence[int], a: int, v: int, *, order: Sequence[int] | None = None,
                       removers: Sequence[int] | None = None, tol: float = ZERO_TOL) -> float:
    """Choice probability of ``v`` when the alternatives in ``Z`` are removed.

    Each removed alternative consumes one consideration-only peer that chooses
    the default in ``y``; switching it to the removed alternative moves only
    that alternative's consideration probability, by the known ratio ``t``, and

        P*(v | y, menu minus z) = (P(v | y with peer on z) - t P(v | y)) / (1 - t).

    ``order`` fixes the removal sequence (default ascending) and ``removers``
    the peers consumed (default lowest index first).
    """
    cells = _Cells(table, Thresholds())
    Y = cells.Y
    Z = tuple(sorted(set(Z)))
    if v in Z:
        raise IdentificationError("alternative is not on the restricted menu")
    if any(not 1 <= z <= Y for z in Z):
        raise IdentificationError("only nondefault alternatives can be removed")
    nc_all, nr_all = _resolved_sets(network)
    nc, nr = tuple(sorted(nc_all[a])), tuple(sorted(nr_all[a]))
    y = tuple(int(x) for x in y)
    order = tuple(Z) if order is None else tuple(order)
    if sorted(order) != list(Z):
        raise IdentificationError("removal order must list the removed alternatives")
    if removers is None:
        removers = [p for p in nc if p not in nr and y[p] == 0][:len(Z)]
    removers = tuple(removers)
    if len(removers) < len(Z):
        raise IdentificationError(f"agent {a}: {len(Z)} removals need as many consideration-only "
                                  f"peers choosing the default, found {len(removers)}")
    if any(p not in nc or p in nr or y[p] != 0 for p in removers):
        raise IdentificationError("removers must be consideration-only peers choosing the default")
    rat = ratios[a]

    def value(cfg: tuple, k: int) -> float:
        if k == 0:
            return float(np.exp(cells.log(a, v, cfg)))
        z, peer = order[k - 1], removers[k - 1]
        n = sum(1 for p in nc if cfg[p] == z)
        t = rat[z - 1, n]
        if abs(t - 1.0) <= tol:
            raise IdentificationError(f"agent {a}: consideration ratio for alternative {z} equals one")
        return (value(_sw(cfg, (peer, z)), k - 1) - t * value(cfg, k - 1)) / (1.0 - t)

    return value(y, len(order))


# ---------------------------------------------------------------- levels

@dataclass(frozen=True)
class Anchor:
    """A known level: ``Q_a(v|count)`` (kind "q") or ``R_a(v|count, {0, v})`` (kind "r")."""

    kind: str
    count: int
    value: float

    def __post_init__(self):
        if self.kind not in ("q", "r"):
            raise ValueError(f"unknown anchor kind {self.kind!r}")
        if not 0 < self.value <= 1:
            raise ValueError("anchor values are probabilities in (0, 1]")


def load_anchors(path) -> dict[tuple[int, int], Anchor]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {(int(d["agent"]), int(d["alt"])): Anchor(d["kind"], int(d["count"]), float(d["value"]))
            for d in doc}


def recover_q_and_r(table: CcpTable, network, ratios: dict[int, np.ndarray],
                    anchors: dict[tuple[int, int], Anchor], agents: Iterable[int] | None = None):
    """Absolute consideration tables and choice rules from anchors and ratios.

    Returns ``(q, r, notes)`` dictionaries keyed by agent.  Agents whose anchors
    are missing or whose consideration-only peers are too few are skipped with
    a note.
    """
    cells = _Cells(table, Thresholds())
    A, Y = cells.A, cells.Y
    nc_all, nr_all = _resolved_sets(network)
    q_out, r_out, notes = {}, {}, {}
    for a in (range(A) if agents is None else agents):
        if nc_all[a] is None or nr_all[a] is None or a not in ratios:
            notes[a] = "network or ratios unresolved"
            continue
        nc, nr = tuple(sorted(nc_all[a])), tuple(sorted(nr_all[a]))
        co = [p for p in nc if p not in nr]
        missing = [v for v in range(1, Y + 1) if (a, v) not in anchors]
        if missing:
            notes[a] = f"missing anchors for alternatives {missing}"
            continue
        if len(co) < Y - 1:
            needs_r = any(anchors[(a, v)].kind == "r" for v in range(1, Y + 1))
            q = _levels_from_q_anchors(a, Y, nc, ratios[a], anchors) if not needs_r else None
            if q is not None:
                q_out[a] = q
            notes[a] = f"{len(co)} consideration-only peers, {Y - 1} needed for choice rules"
            continue
        rat = ratios[a]

        def restricted(v, keep, cfg):
            Z = [u for u in range(1, Y + 1) if u not in keep]
            return counterfactual_ccp(table, (nc_all, nr_all), ratios, Z, cfg, a, v)

        q = np.empty((Y, len(nc) + 1))
        for v in range(1, Y + 1):
            anc = anchors[(a, v)]
            if anc.kind == "q":
                if not 0 <= anc.count <= len(nc):
                    raise IdentificationError(f"anchor count {anc.count} outside 0..{len(nc)}")
                n0, level = anc.count, anc.value
            else:
                if not 0 <= anc.count <= len(nr):
                    raise IdentificationError(f"anchor count {anc.count} outside 0..{len(nr)}")
                cfg = _sw(cells.zero, *[(p, v) for p in nr[:anc.count]])
                n0 = sum(1 for p in nc if cfg[p] == v)
                level = restricted(v, (v,), cfg) / anc.value
            q[v - 1] = _ladder(rat[v - 1], n0, level)
        q_out[a] = q

        rules = {}
        for alts in sorted(subsets(Y), key=len):
            for counts in count_vectors(len(alts), len(nr)):
                dist = np.zeros(Y + 1)
                if not alts:
                    dist[0] = 1.0
                    rules[(alts, counts)] = dist
                    continue
                moves, it = [], iter(nr)
                for u, c in zip(alts, counts):
                    moves += [(next(it), u) for _ in range(c)]
                cfg = _sw(cells.zero, *moves)
                ncount = {u: sum(1 for p in nc if cfg[p] == u) for u in alts}
                qv = {u: q[u - 1, ncount[u]] for u in alts}
                for v in alts:
                    val = restricted(v, alts, cfg)
                    for sub in subsets(Y):
                        if v not in sub or set(sub) >= set(alts) or not set(sub) <= set(alts):
                            continue
                        w = 1.0
                        for u in alts:
                            w *= qv[u] if u in sub else 1.0 - qv[u]
                        sub_counts = tuple(c for u, c in zip(alts, counts) if u in sub)
                        val -= rules[(sub, sub_counts)][v] * w
                    dist[v] = val / np.prod([qv[u] for u in alts])
                dist[0] = 1.0 - dist[list(alts)].sum()
                rules[(alts, counts)] = dist
        r_out[a] = rules
    return q_out, r_out, notes


def _ladder(ratios_v: np.ndarray, n0: int, level: float) -> np.ndarray:
    out = np.empty(len(ratios_v) + 1)
    out[n0] = level
    for n in range(n0, len(ratios_v)):
        out[n + 1] = out[n] * ratios_v[n]
    for n in range(n0 - 1, -1, -1):
        out[n] = out[n + 1] / ratios_v[n]
    return out


def _levels_from_q_anchors(a, Y, nc, rat, anchors):
    q = np.empty((Y, len(nc) + 1))
    for v in range(1, Y + 1):
        anc = anchors[(a, v)]
        q[v - 1] = _ladder(rat[v - 1], anc.count, anc.value)
    return q


# ---------------------------------------------------------------- pipeline

@dataclass
class IdentifyOptions:
    thresholds: Thresholds = field(default_factory=Thresholds)
    exhaustive: bool | None = None
    anchors: dict = field(default_factory=dict)
    known: dict = field(default_factory=dict)


@dataclass
class IdentifiedModel:
    menu_size: int
    n_agents: int
    peers: dict[int, tuple[int, ...]]
    nc: dict[int, tuple[int, ...] | None]
    nr: dict[int, tuple[int, ...] | None]
    status: dict[int, str]
    notes: dict[int, str]
    q_ratios: dict[int, np.ndarray]
    q: dict[int, np.ndarray]
    r: dict[int, dict]
    anchors: dict
    evidence: list[Evidence]
    rates: np.ndarray | None = None

    @property
    def network_resolved(self) -> bool:
        return all(self.nc[a] is not None and self.nr[a] is not None for a in range(self.n_agents))

    def network(self) -> Network:
        if not self.network_resolved:
            raise IdentificationError("network is not fully resolved")
        return Network.from_sets(self.n_agents, [self.nc[a] for a in range(self.n_agents)],
                                 [self.nr[a] for a in range(self.n_agents)])

    def complete(self) -> bool:
        return all(self.status[a] == "complete" for a in range(self.n_agents))

    def to_model(self) -> ModelSpec:
        if not self.complete():
            raise IdentificationError("tables are not fully identified")
        rates = self.rates if self.rates is not None else np.ones(self.n_agents)
        return ModelSpec(self.menu_size, self.network(), tuple(self.q[a] for a in range(self.n_agents)),
                         tuple(self.r[a] for a in range(self.n_agents)), rates)

    def to_dict(self) -> dict:
        A = range(self.n_agents)
        rows = []
        for a in A:
            if a not in self.r:
                rows.append(None)
                continue
            recs = []
            for (alts, counts), dist in sorted(self.r[a].items()):
                support = (0,) + alts
                recs.append({"consideration_set": list(support), "nr_counts": list(counts),
                             "distribution": [float(dist[v]) for v in support]})
            rows.append(recs)
        return {
            "menu_size": self.menu_size,
            "agents": self.n_agents,
            "lambda": None if self.rates is None else [float(x) for x in self.rates],
            "nc": [None if self.nc[a] is None else list(self.nc[a]) for a in A],
            "nr": [None if self.nr[a] is None else list(self.nr[a]) for a in A],
            "q": [self.q[a].tolist() if a in self.q else None for a in A],
            "r": rows,
            "q_ratios": [self.q_ratios[a].tolist() if a in self.q_ratios else None for a in A],
            "peers": [list(self.peers[a]) for a in A],
            "status": [self.status[a] for a in A],
            "notes": [self.notes.get(a, "") for a in A],
            "anchors": [{"agent": a, "alt": v, "kind": x.kind, "count": x.count, "value": x.value}
                        for (a, v), x in sorted(self.anchors.items())],
        }


def identify_pipeline(table: CcpTable, options: IdentifyOptions | None = None) -> IdentifiedModel:
    """Reference groups, peer types, ratios and (with anchors) levels.

    Each agent ends with a status: ``complete`` (network, ratios, Q and R),
    ``ratios`` (no usable anchors or too few consideration-only peers),
    ``network`` or ``peers`` when an earlier hypothesis fails.
    """
    opts = options or IdentifyOptions()
    th = opts.thresholds
    A, Y = table.n_agents, table.menu_size
    groups = recover_reference_groups(table, th, exhaustive=opts.exhaustive)
    if Y == 1:
        cls = identify_binary(table, opts.known, th, groups)
    else:
        cls = resolve_ncr(table, classify_peers(table, groups, th, exhaustive=opts.exhaustive), th)
    evidence = cls.evidence
    nc = {a: cls.agents[a].nc for a in range(A)}
    nr = {a: cls.agents[a].nr for a in range(A)}
    status, notes = {}, {}
    for a in range(A):
        info = cls.agents[a]
        status[a] = "network" if info.resolved else "peers"
        notes[a] = info.note or (info.status if not info.resolved else "")
    resolved = [a for a in range(A) if status[a] == "network"]
    ratios = {}
    for a in resolved:
        try:
            ratios.update(recover_q_ratios(table, ([nc[b] for b in range(A)], [nr[b] for b in range(A)]), [a]))
            status[a] = "ratios"
        except IdentificationError as exc:
            notes[a] = str(exc)
    q, r, level_notes = recover_q_and_r(table, ([nc[b] for b in range(A)], [nr[b] for b in range(A)]),
                                        ratios, opts.anchors, [a for a in resolved if a in ratios])
    for a in r:
        status[a] = "complete"
    for a, msg in level_notes.items():
        if status[a] != "complete":
            notes[a] = msg
    return IdentifiedModel(Y, A, dict(groups.peers), nc, nr, status, notes, ratios, q, r,
                           dict(opts.anchors), evidence, table.rates)


def write_evidence(evidence: Sequence[Evidence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in evidence:
            fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")
