"""Recover clock rates and conditional choice probabilities from data.

Two observation schemes are supported: a log of every decision epoch, and
snapshots of the configuration at a fixed interval.  The second goes through
the principal matrix logarithm of the estimated transition matrix.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .ctmc import EventLog, Panel, RateMatrix, _strides, all_configs, ccp_array, lex_index
from .model import STATE_CAP, ModelSpec


class RecoveryError(ValueError):
    pass


class RepeatedEigenvalueError(RecoveryError):
    pass


class AliasingError(RecoveryError):
    pass


class ComplexLogError(RecoveryError):
    pass


@dataclass(eq=False)
class CcpTable:
    """Choice probabilities ``probs[a, s, v]`` with NaN marking unobserved cells.

    ``counts[a, s]`` holds the number of decision epochs behind each row when
    the table was estimated; it is ``None`` for exact tables.
    """

    menu_size: int
    n_agents: int
    probs: np.ndarray
    counts: np.ndarray | None = None
    rates: np.ndarray | None = None

    @property
    def exact(self) -> bool:
        return self.counts is None

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    def index(self, y) -> int:
        return lex_index(y, self.menu_size, self.n_agents)

    def prob(self, a: int, v: int, y) -> float:
        return float(self.probs[a, self.index(y), v])

    def observed(self, a: int, y) -> bool:
        return not np.isnan(self.probs[a, self.index(y)]).any()


def exact_ccp_table(model: ModelSpec, state_cap: int = STATE_CAP) -> CcpTable:
    return CcpTable(model.menu_size, model.n_agents, ccp_array(model, state_cap), None,
                    np.array(model.rates, dtype=float))


def ccp_from_events(log: EventLog, n_agents: int | None = None, menu_size: int | None = None):
    """Frequency estimates of clock rates and choice probabilities.

    Returns ``(rates, table, diagnostics)``.  Rows of configurations where an
    agent never rang are NaN.
    """
    if len(log) == 0:
        raise RecoveryError("event log is empty")
    A = log.n_agents if n_agents is None else n_agents
    Y = log.menu_size if menu_size is None else menu_size
    S = (Y + 1) ** A
    states = log.prior_states()
    tally = np.zeros((A, S, Y + 1))
    np.add.at(tally, (log.agents, states, log.choices), 1.0)
    visits = tally.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = tally / visits[:, :, None]
    rates = np.bincount(log.agents, minlength=A) / log.horizon
    diag = {
        "events": int(len(log)),
        "horizon": float(log.horizon),
        "visited_cells": int((visits > 0).sum()),
        "missing_cells": int((visits == 0).sum()),
        "min_visits_observed": int(visits[visits > 0].min()),
    }
    return rates, CcpTable(Y, A, probs, visits, rates), diag


def decompose_rate_matrix(rates: RateMatrix, tol: float = 1e-9):
    """Split a generator into clock rates and choice probabilities.

    An agent's choice probabilities do not depend on its own current choice, so
    the rows of configurations that differ only in that agent's entry expose
    ``lambda_a P_a(v|y)`` for every ``v``, including the current value.  Summing
    over ``v`` gives ``lambda_a`` once per configuration of the other agents;
    the estimates must agree.
    """
    M = np.asarray(rates.m, dtype=float)
    Y, A = rates.menu_size, rates.n_agents
    S = (Y + 1) ** A
    if M.shape != (S, S):
        raise RecoveryError(f"generator has shape {M.shape}, expected {(S, S)}")
    configs = all_configs(Y, A)
    strides = _strides(A, Y)
    scale = max(np.abs(M).max(), 1.0)
    neighbour = np.zeros((S, S), dtype=bool)
    rows = np.arange(S)
    for a in range(A):
        for v in range(Y + 1):
            move = configs[:, a] != v
            neighbour[rows[move], rows[move] + (v - configs[move, a]) * strides[a]] = True
    off = M.copy()
    np.fill_diagonal(off, 0.0)
    if np.abs(off[~neighbour & ~np.eye(S, dtype=bool)]).max(initial=0.0) > tol * scale:
        raise RecoveryError("generator violates the single-switch pattern")
    if off.min() < -tol * scale:
        raise RecoveryError("generator has a negative off-diagonal rate")
    if np.abs(M.sum(axis=1)).max() > tol * scale:
        raise RecoveryError("generator rows do not sum to zero")

    lam = np.empty(A)
    probs = np.empty((A, S, Y + 1))
    grid = (Y + 1,) * A
    for a in range(A):
        flows = np.full((S, Y + 1), np.nan)
        for v in range(Y + 1):
            move = configs[:, a] != v
            flows[move, v] = M[rows[move], rows[move] + (v - configs[move, a]) * strides[a]]
        # axis 0: own entry, middle: other agents, last: alternative
        cube = np.moveaxis(flows.reshape(grid + (Y + 1,)), a, 0).reshape(Y + 1, -1, Y + 1)
        spread = np.nanmax(cube, axis=0) - np.nanmin(cube, axis=0)
        if spread.max() > tol * scale:
            raise RecoveryError(f"agent {a}: rates depend on its own current choice "
                                f"(residual {spread.max():.3g})")
        flow = np.nanmean(cube, axis=0)
        lam_rest = flow.sum(axis=1)
        resid = np.abs(lam_rest - lam_rest.mean()).max()
        if resid > tol * scale:
            raise RecoveryError(f"agent {a}: inconsistent clock rate across configurations "
                                f"(residual {resid:.3g})")
        lam[a] = lam_rest.mean()
        p = flow / lam[a]
        full = np.broadcast_to(p[None], (Y + 1,) + p.shape).reshape(grid + (Y + 1,))
        probs[a] = np.moveaxis(full, 0, a).reshape(S, Y + 1)
    return lam, CcpTable(Y, A, probs, None, lam)


def estimate_transition_matrix(panel: Panel):
    """Row-normalized transition counts between consecutive snapshots.

    Returns ``(P_hat, counts)``; rows of unvisited states are NaN.
    """
    S = (panel.menu_size + 1) ** panel.n_agents
    idx = panel.indices()
    counts = np.zeros((S, S))
    np.add.at(counts, (idx[:-1], idx[1:]), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = counts / tot
    return P, counts


@dataclass
class RecoveryDiagnostics:
    eigenvalues: np.ndarray
    transition_eigenvalues: np.ndarray
    distinctness_margin: float
    imaginary_residual: float
    aliasing: bool
    repeated: bool
    projection_norm: float = 0.0
    min_offdiagonal: float = 0.0
    valid: bool = True
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def cplx(z):
            return [[float(x.real), float(x.imag)] for x in z]
        return {"eigenvalues": cplx(self.eigenvalues),
                "transition_eigenvalues": cplx(self.transition_eigenvalues),
                "distinctness_margin": self.distinctness_margin,
                "imaginary_residual": self.imaginary_residual,
                "aliasing": self.aliasing, "repeated": self.repeated,
                "projection_norm": self.projection_norm, "min_offdiagonal": self.min_offdiagonal,
                "valid": self.valid, "notes": self.notes}


def generator_from_panel(P: np.ndarray, delta: float, menu_size: int | None = None,
                         n_agents: int | None = None, *, strict: bool = False,
                         distinct_tol: float = 1e-8, imag_tol: float = 1e-8,
                         neg_tol: float = 1e-8, max_cond: float = 1e8):
    """Principal logarithm of a transition matrix, divided by the interval.

    A repeated eigenvalue of ``P`` away from the positive real axis is reported
    as aliasing: two generator eigenvalues that differ by a multiple of
    ``2 pi i / delta`` map to the same point.  Repeated eigenvalues on the
    positive real axis are tolerated when ``P`` is safely diagonalizable,
    because the principal logarithm is then still unique and real; generators
    built from the choice model always have one, at minus the total clock rate
    (flagged in the diagnostics).  ``strict=True`` refuses any repetition.
    When the dimensions are given, the result is projected onto the
    single-switch pattern.
    """
    if delta <= 0:
        raise ValueError("interval must be positive")
    P = np.asarray(P, dtype=float)
    if np.isnan(P).any():
        raise RecoveryError("transition matrix has unobserved rows")
    w, V = np.linalg.eig(P)
    scale = max(np.abs(w).max(), 1.0)
    gaps = np.abs(w[:, None] - w[None, :]) + np.diag(np.full(len(w), np.inf))
    margin = float(gaps.min() / scale)
    clash = np.argwhere(gaps <= distinct_tol * scale)
    repeated = len(clash) > 0
    aliasing = bool(any(abs(np.angle(w[i])) > distinct_tol for i, _ in clash))
    logs = np.log(w.astype(complex))
    diag = RecoveryDiagnostics(logs / delta, w, margin, float("nan"), aliasing, repeated)
    if aliasing:
        raise AliasingError("transition matrix has a repeated eigenvalue off the positive real "
                            "axis: generator eigenvalues differ by a multiple of 2*pi*i/delta")
    if repeated:
        cond = float(np.linalg.cond(V))
        if strict or cond > max_cond:
            raise RepeatedEigenvalueError(f"eigenvalues of the transition matrix are not distinct "
                                          f"(margin {margin:.3g}, eigenvector condition {cond:.3g})")
        diag.notes.append(f"repeated positive eigenvalues; eigenvector condition {cond:.3g}")
    L = (V * logs) @ np.linalg.inv(V) / delta
    resid = float(np.abs(L.imag).max() / max(np.abs(L.real).max(), 1.0))
    diag.imaginary_residual = resid
    if resid > imag_tol:
        raise ComplexLogError(f"matrix logarithm is not real (residual {resid:.3g})")
    M = L.real.copy()
    if menu_size is not None and n_agents is not None:
        S = M.shape[0]
        configs = all_configs(menu_size, n_agents)
        diff = (configs[:, None, :] != configs[None, :, :]).sum(axis=2)
        structural = diff >= 2
        removed = np.abs(M[structural]).max(initial=0.0)
        M[structural] = 0.0
        np.fill_diagonal(M, 0.0)
        M[np.arange(S), np.arange(S)] = -M.sum(axis=1)
        diag.projection_norm = float(removed)
        offd = M[diff == 1]
        diag.min_offdiagonal = float(offd.min(initial=0.0))
        if diag.min_offdiagonal < -neg_tol:
            diag.valid = False
            diag.notes.append("negative off-diagonal rate after projection")
    return RateMatrix(menu_size or 0, n_agents or 0, M), diag


# ---------------------------------------------------------------- file formats

def write_ccp_table(table: CcpTable, path) -> None:
    """CSV with one row per observed cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "config_index", "alt", "prob"])
        for a in range(table.n_agents):
            for s in range(table.n_states):
                row = table.probs[a, s]
                if np.isnan(row).any():
                    continue
                for v, p in enumerate(row.tolist()):
                    w.writerow([a, s, v, repr(float(p))])
    meta = {"menu_size": table.menu_size, "agents": table.n_agents, "exact": table.exact,
            "lambda": None if table.rates is None else [float(x) for x in table.rates]}
    if table.counts is not None:
        meta["counts"] = [[int(c) for c in row] for row in table.counts]
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_ccp_table(path) -> CcpTable:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    Y, A = int(meta["menu_size"]), int(meta["agents"])
    S = (Y + 1) ** A
    probs = np.full((A, S, Y + 1), np.nan)
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["agent", "config_index", "alt", "prob"]:
            raise ValueError(f"{path}:1: unexpected header {header}")
        for line, row in enumerate(rd, start=2):
            try:
                probs[int(row[0]), int(row[1]), int(row[2])] = float(row[3])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    counts = np.array(meta["counts"], dtype=float) if "counts" in meta else None
    rates = None if meta.get("lambda") is None else np.array(meta["lambda"], dtype=float)
    return CcpTable(Y, A, probs, counts, rates)
