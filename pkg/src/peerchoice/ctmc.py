"""Continuous-time Markov chain over choice configurations.

States are indexed lexicographically: agent 0 is the most significant digit in
base ``Y + 1`` and the all-default configuration has index 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .model import STATE_CAP, ModelError, ModelSpec, choice_probs, model_hash


class StateCapError(ModelError):
    pass


def _strides(n_agents: int, menu_size: int) -> np.ndarray:
    return (menu_size + 1) ** np.arange(n_agents - 1, -1, -1)


def lex_index(y: Sequence[int], menu_size: int, n_agents: int | None = None) -> int:
    n_agents = len(y) if n_agents is None else n_agents
    if n_agents < 2:
        raise ModelError("at least two agents are required")
    if len(y) != n_agents or any(not 0 <= v <= menu_size for v in y):
        raise ModelError(f"invalid configuration {tuple(y)}")
    idx = 0
    for v in y:
        idx = idx * (menu_size + 1) + int(v)
    return idx


def lex_unindex(idx: int, menu_size: int, n_agents: int) -> tuple[int, ...]:
    S = (menu_size + 1) ** n_agents
    if not 0 <= idx < S:
        raise ModelError(f"state index {idx} out of range")
    out = []
    for _ in range(n_agents):
        idx, v = divmod(idx, menu_size + 1)
        out.append(v)
    return tuple(reversed(out))


def all_configs(menu_size: int, n_agents: int) -> np.ndarray:
    """Array of shape ``(S, A)`` listing configurations in lexicographic order."""
    S = (menu_size + 1) ** n_agents
    idx = np.arange(S)
    return (idx[:, None] // _strides(n_agents, menu_size)[None, :]) % (menu_size + 1)


def _check_cap(model: ModelSpec, state_cap: int) -> None:
    if model.n_states > state_cap:
        raise StateCapError(f"{model.n_states} states exceed the cap of {state_cap}")


def ccp_array(model: ModelSpec, state_cap: int = STATE_CAP) -> np.ndarray:
    """Exact choice probabilities with shape ``(A, S, Y + 1)``."""
    _check_cap(model, state_cap)
    Y, A, net = model.menu_size, model.n_agents, model.network
    configs = all_configs(Y, A)
    out = np.empty((A, len(configs), Y + 1))
    for a in range(A):
        nc = np.stack([(configs[:, list(net.nc[a])] == v).sum(1) for v in range(Y + 1)], axis=1)
        nr = np.stack([(configs[:, list(net.nr[a])] == v).sum(1) for v in range(Y + 1)], axis=1)
        keys = np.concatenate([nc, nr], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        rows = np.array([model.ccp_from_counts(a, k[:Y + 1], k[Y + 1:]) for k in uniq])
        out[a] = rows[inverse.ravel()]
    return out


@dataclass(frozen=True, eq=False)
class RateMatrix:
    menu_size: int
    n_agents: int
    m: np.ndarray

    @property
    def n_states(self) -> int:
        return self.m.shape[0]


def build_rate_matrix(model: ModelSpec, state_cap: int = STATE_CAP) -> RateMatrix:
    Y, A = model.menu_size, model.n_agents
    P = ccp_array(model, state_cap)
    configs = all_configs(Y, A)
    strides = _strides(A, Y)
    S = len(configs)
    M = np.zeros((S, S))
    rows = np.arange(S)
    for a in range(A):
        for v in range(Y + 1):
            move = configs[:, a] != v
            target = rows[move] + (v - configs[move, a]) * strides[a]
            M[rows[move], target] = model.rates[a] * P[a, move, v]
    M[rows, rows] = -M.sum(axis=1)
    return RateMatrix(Y, A, M)


def stationary_distribution(rates: RateMatrix, rank_tol: float = 1e-12) -> np.ndarray:
    """Normalized null vector of the transposed generator.

    The null space is located with an SVD.  If the smallest singular value is
    not clearly separated, power iteration on the uniformized chain is used.
    """
    M = rates.m
    S = M.shape[0]
    if S > 4096:
        return _power_stationary(M, np.full(S, 1.0 / S))
    scale = max(np.abs(np.diag(M)).max(), 1e-300)
    _, sv, vt = np.linalg.svd(M.T / scale)
    if sv[-2] <= rank_tol * max(sv[0], 1.0):
        raise ModelError("generator has a null space of dimension above one")
    mu = vt[-1]
    mu = mu / mu.sum()
    if np.abs(mu @ M).max() > 1e-10 or mu.min() < 0:
        mu = _power_stationary(M, mu if mu.min() >= 0 else np.full(S, 1.0 / S))
    return mu


def _power_stationary(M: np.ndarray, mu: np.ndarray, max_iter: int = 1_000_000) -> np.ndarray:
    U = np.eye(M.shape[0]) + M / (2 * np.abs(np.diag(M)).max())
    for _ in range(max_iter):
        nxt = mu @ U
        nxt /= nxt.sum()
        if np.abs(nxt - mu).max() < 1e-15:
            return nxt
        mu = nxt
    return mu


def transition_matrix(rates: RateMatrix, delta: float) -> np.ndarray:
    if delta <= 0:
        raise ValueError("interval must be positive")
    return scipy.linalg.expm(delta * rates.m)


# ---------------------------------------------------------------- simulation

@dataclass(eq=False)
class EventLog:
    """Every clock ring, including re-selections of the current alternative."""

    menu_size: int
    initial: tuple[int, ...]
    horizon: float
    times: np.ndarray
    agents: np.ndarray
    choices: np.ndarray
    seed: int | None = None
    model_hash: str = ""

    @property
    def n_agents(self) -> int:
        return len(self.initial)

    def __len__(self) -> int:
        return len(self.times)

    def prior_states(self) -> np.ndarray:
        """Lexicographic state index just before each event."""
        strides = _strides(self.n_agents, self.menu_size)
        state = int(np.dot(self.initial, strides))
        cur = list(self.initial)
        out = np.empty(len(self.times), dtype=np.int64)
        for k, (a, v) in enumerate(zip(self.agents.tolist(), self.choices.tolist())):
            out[k] = state
            state += (v - cur[a]) * int(strides[a])
            cur[a] = v
        return out

    def changes_only(self) -> "EventLog":
        """The lossy view that keeps only epochs where the configuration moved."""
        cur = list(self.initial)
        keep = []
        for k, (a, v) in enumerate(zip(self.agents.tolist(), self.choices.tolist())):
            keep.append(cur[a] != v)
            cur[a] = v
        keep = np.array(keep, dtype=bool)
        return EventLog(self.menu_size, self.initial, self.horizon, self.times[keep],
                        self.agents[keep], self.choices[keep], self.seed, self.model_hash)


def _cumulative_ccps(model: ModelSpec, state_cap: int):
    if model.n_states <= state_cap:
        return np.cumsum(ccp_array(model, state_cap), axis=2)
    return None


def simulate_trajectory(model: ModelSpec, initial: Sequence[int], horizon: float, seed: int, *,
                        state_cap: int = STATE_CAP, block: int = 65536) -> EventLog:
    """Simulate clock rings by superposition.

    Each event consumes three uniforms from one PCG64 stream, in order: the
    waiting time (inverse CDF of the exponential with rate ``sum(lambda)``),
    the ringing agent (inverse CDF over ``lambda / sum(lambda)``), and the
    chosen alternative (inverse CDF over ascending alternatives).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    Y, A = model.menu_size, model.n_agents
    y = [int(v) for v in initial]
    lex_index(y, Y, A)
    rng = np.random.Generator(np.random.PCG64(seed))
    total = float(model.rates.sum())
    agent_cdf = np.cumsum(model.rates) / total
    agent_cdf[-1] = 1.0
    cum = _cumulative_ccps(model, state_cap)
    strides = [int(s) for s in _strides(A, Y)]
    state = sum(v * s for v, s in zip(y, strides))

    times, agents, choices = [], [], []
    t = 0.0
    while True:
        u = rng.random((block, 3))
        gaps = -np.log1p(-u[:, 0]) / total
        who = np.searchsorted(agent_cdf, u[:, 1], side="right")
        stop = False
        for gap, a, uc in zip(gaps.tolist(), who.tolist(), u[:, 2].tolist()):
            t += gap
            if t > horizon:
                stop = True
                break
            if cum is not None:
                row = cum[a, state]
            else:
                row = np.cumsum(choice_probs(model, a, y))
            v = int(np.searchsorted(row, uc, side="right"))
            v = min(v, Y)
            times.append(t)
            agents.append(a)
            choices.append(v)
            state += (v - y[a]) * strides[a]
            y[a] = v
        if stop:
            break
    return EventLog(Y, tuple(int(v) for v in initial), float(horizon), np.array(times),
                    np.array(agents, dtype=np.int64), np.array(choices, dtype=np.int64),
                    seed, model_hash(model))


@dataclass(eq=False)
class Panel:
    menu_size: int
    delta: float
    states: np.ndarray  # (K, A) configurations at 0, delta, 2 delta, ...

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("interval must be positive")
        if len(self.states) < 2:
            raise ValueError("a panel needs at least two snapshots")

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    def indices(self) -> np.ndarray:
        return self.states @ _strides(self.n_agents, self.menu_size)


def sample_at_intervals(log: EventLog, delta: float) -> Panel:
    """Configuration at times ``k * delta``; an event at exactly ``k * delta`` is included."""
    if delta <= 0:
        raise ValueError("interval must be positive")
    if delta >= log.horizon:
        raise ValueError("interval must be shorter than the horizon")
    n_snap = int(np.floor(log.horizon / delta)) + 1
    grid = delta * np.arange(n_snap)
    # number of events with time <= grid point
    upto = np.searchsorted(log.times, grid, side="right")
    states = np.empty((n_snap, log.n_agents), dtype=np.int64)
    cur = np.array(log.initial, dtype=np.int64)
    done = 0
    for k, stop in enumerate(upto):
        for j in range(done, stop):
            cur[log.agents[j]] = log.choices[j]
        done = stop
        states[k] = cur
    return Panel(log.menu_size, float(delta), states)


# ---------------------------------------------------------------- file formats

def _fmt(x: float) -> str:
    return repr(float(x))


def write_event_log(log: EventLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "agent", "choice"])
        for t, a, v in zip(log.times.tolist(), log.agents.tolist(), log.choices.tolist()):
            w.writerow([_fmt(t), a, v])
    side = {"initial_config": list(log.initial), "horizon": log.horizon, "seed": log.seed,
            "model_hash": log.model_hash, "menu_size": log.menu_size}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_event_log(path) -> EventLog:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    times, agents, choices = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["time", "agent", "choice"]:
            raise ValueError(f"{path}:1: unexpected header {header}")
        for line, row in enumerate(rd, start=2):
            try:
                times.append(float(row[0]))
                agents.append(int(row[1]))
                choices.append(int(row[2]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    return EventLog(int(side["menu_size"]), tuple(side["initial_config"]), float(side["horizon"]),
                    np.array(times), np.array(agents, dtype=np.int64), np.array(choices, dtype=np.int64),
                    side.get("seed"), side.get("model_hash", ""))


def write_panel(panel: Panel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"y_{a}" for a in range(panel.n_agents)])
        for k, row in enumerate(panel.states.tolist()):
            w.writerow([_fmt(k * panel.delta)] + row)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"menu_size": panel.menu_size, "delta": panel.delta}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_panel(path, menu_size: int | None = None) -> Panel:
    rows, times = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if not header or header[0] != "t":
            raise ValueError(f"{path}:1: unexpected header {header}")
        for line, row in enumerate(rd, start=2):
            try:
                times.append(float(row[0]))
                rows.append([int(x) for x in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    meta = {}
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    Y = menu_size if menu_size is not None else meta.get("menu_size", int(np.max(rows)))
    delta = meta.get("delta", times[1] - times[0] if len(times) > 1 else 0.0)
    return Panel(int(Y), float(delta), np.array(rows, dtype=np.int64))
