"""Entry model for chains choosing markets: logistic attention and profit
indices, the event-time likelihood, profiled maximum likelihood, numeric-Hessian
standard errors and a greedy search over consideration links.

Agents are (firm, market) pairs indexed ``a = f * M + m``.  Preference peers
are the other firms in the same market.  Consideration links run from an agent
to (firm, market) pairs in neighbouring markets and are stored as a boolean
array ``W`` of shape ``(A, F, M)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date
from itertools import product
from pathlib import Path

import numpy as np
from scipy.optimize import minimize


class EstimationError(ValueError):
    pass


# ---------------------------------------------------------------- parameters

@dataclass
class Theta:
    """Coefficient vector with a fixed layout.

    Attention, per firm ``f``: covariates (``n_cov``), own-market log and log^2
    store counts of every firm, neighbourhood log and log^2 counts of every firm.
    Profit, per firm: covariates, own log and log^2 count, competitor log and
    log^2 count.  ``mask`` marks free entries; fixed entries keep their value.
    """

    n_firms: int
    n_cov: int
    values: np.ndarray
    mask: np.ndarray | None = None
    full_consideration: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.values.shape != (self.size(self.n_firms, self.n_cov),):
            raise EstimationError(f"theta has {self.values.size} entries, layout needs "
                                  f"{self.size(self.n_firms, self.n_cov)}")
        if not np.all(np.isfinite(self.values)):
            raise EstimationError("theta must be finite")
        self.mask = (np.ones(self.values.size, dtype=bool) if self.mask is None
                     else np.asarray(self.mask, dtype=bool).copy())

    @staticmethod
    def att_width(n_firms: int, n_cov: int) -> int:
        return n_cov + 4 * n_firms

    @staticmethod
    def pro_width(n_cov: int) -> int:
        return n_cov + 4

    @classmethod
    def size(cls, n_firms: int, n_cov: int) -> int:
        return n_firms * (cls.att_width(n_firms, n_cov) + cls.pro_width(n_cov))

    @classmethod
    def zeros(cls, n_firms: int, n_cov: int, **kw) -> "Theta":
        return cls(n_firms, n_cov, np.zeros(cls.size(n_firms, n_cov)), **kw)

    @property
    def _split(self) -> int:
        return self.n_firms * self.att_width(self.n_firms, self.n_cov)

    @property
    def attention(self) -> np.ndarray:
        return self.values[:self._split].reshape(self.n_firms, -1)

    @property
    def profit(self) -> np.ndarray:
        return self.values[self._split:].reshape(self.n_firms, -1)

    def names(self, firms=None, covariates=None) -> list[str]:
        F, K = self.n_firms, self.n_cov
        firms = list(firms) if firms is not None else [str(f) for f in range(F)]
        covs = list(covariates) if covariates is not None else [f"s{k}" for k in range(K)]
        out = []
        for f in firms:
            out += [f"att_beta[{f},{c}]" for c in covs]
            for tag in ("att_alpha", "att_gamma", "att_delta", "att_eta"):
                out += [f"{tag}[{f},{g}]" for g in firms]
        for f in firms:
            out += [f"pro_beta[{f},{c}]" for c in covs]
            out += [f"pro_alpha[{f}]", f"pro_gamma[{f}]", f"pro_alpha_comp[{f}]", f"pro_gamma_comp[{f}]"]
        return out

    def index(self, block: str, f: int, j: int = 0) -> int:
        """Position of a named coefficient; ``j`` is a covariate or firm index."""
        F, K = self.n_firms, self.n_cov
        aw, pw = self.att_width(F, K), self.pro_width(K)
        att = {"att_beta": 0, "att_alpha": K, "att_gamma": K + F, "att_delta": K + 2 * F, "att_eta": K + 3 * F}
        pro = {"pro_beta": 0, "pro_alpha": K, "pro_gamma": K + 1, "pro_alpha_comp": K + 2, "pro_gamma_comp": K + 3}
        if block in att:
            return f * aw + att[block] + j
        if block in pro:
            return self._split + f * pw + pro[block] + j
        raise KeyError(block)

    def spillover_indices(self) -> np.ndarray:
        F = self.n_firms
        return np.array([self.index(b, f, g) for b in ("att_delta", "att_eta")
                         for f in range(F) for g in range(F)])

    def attention_indices(self) -> np.ndarray:
        return np.arange(self._split)

    def with_values(self, values) -> "Theta":
        return replace(self, values=np.asarray(values, dtype=float))

    def free(self) -> np.ndarray:
        return self.values[self.mask]

    def with_free(self, x) -> "Theta":
        v = self.values.copy()
        v[self.mask] = x
        return self.with_values(v)

    def to_dict(self, firms=None, covariates=None, se=None) -> dict:
        names = self.names(firms, covariates)
        doc = {"n_firms": self.n_firms, "n_cov": self.n_cov, "full_consideration": self.full_consideration,
               "coefficients": {n: float(v) for n, v in zip(names, self.values)},
               "free": {n: bool(m) for n, m in zip(names, self.mask)}}
        if se is not None:
            doc["se"] = {n: (None if not np.isfinite(s) else float(s)) for n, s in zip(names, se)}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Theta":
        vals = np.array(list(doc["coefficients"].values()), dtype=float)
        mask = np.array(list(doc.get("free", {k: True for k in doc["coefficients"]}).values()), dtype=bool)
        return cls(int(doc["n_firms"]), int(doc["n_cov"]), vals, mask, bool(doc.get("full_consideration", False)))


# ---------------------------------------------------------------- geography and links

@dataclass
class Geography:
    markets: list[str]
    province: list[str]
    lat: np.ndarray
    lon: np.ndarray
    borders: set = field(default_factory=set)

    def __post_init__(self):
        self.lat = np.asarray(self.lat, dtype=float)
        self.lon = np.asarray(self.lon, dtype=float)
        if not (len(self.markets) == len(self.province) == len(self.lat) == len(self.lon)):
            raise EstimationError("geography columns differ in length")
        if not (np.all(np.isfinite(self.lat)) and np.all(np.isfinite(self.lon))):
            raise EstimationError("missing coordinates")
        self.borders = {tuple(sorted(p)) for p in self.borders}


def haversine(lat1, lon1, lat2, lon2, radius: float = 6371.0):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi, dlmb = p2 - p1, np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def build_neighborhood_network(geo: Geography, k_nearest: int = 5) -> np.ndarray:
    """``nbr[m, m2]`` is true when ``m2`` is in the neighbourhood of ``m``:
    same province, a shared border, or among the ``k_nearest`` closest markets
    to ``m`` (ties broken by market index)."""
    M = len(geo.markets)
    prov = np.asarray(geo.province, dtype=object)
    nbr = prov[:, None] == prov[None, :]
    for i, j in geo.borders:
        nbr[i, j] = nbr[j, i] = True
    d = haversine(geo.lat[:, None], geo.lon[:, None], geo.lat[None, :], geo.lon[None, :])
    np.fill_diagonal(d, np.inf)
    for m in range(M):
        order = np.argsort(d[m], kind="stable")[:min(k_nearest, M - 1)]
        nbr[m, order] = True
    np.fill_diagonal(nbr, False)
    return nbr


def candidate_links(nbr: np.ndarray, n_firms: int) -> np.ndarray:
    """Every agent may link to every firm's position in each neighbouring market."""
    M = nbr.shape[0]
    W = np.zeros((n_firms * M, n_firms, M), dtype=bool)
    for f in range(n_firms):
        W[f * M:(f + 1) * M] = nbr[:, None, :]
    return W


def link_units(W: np.ndarray, n_firms: int, tie: bool = False) -> list[tuple[int, ...]]:
    """Deletable links in lexicographic (firm, market, firm', market') order.

    With ``tie`` a unit is ``(market, firm', market')`` and applies to every focal firm.
    """
    A = W.shape[0]
    M = A // n_firms
    if tie:
        return [tuple(int(x) for x in u) for u in np.argwhere(W[:M])]
    return [(int(a) // M, int(a) % M, int(g), int(m2)) for a, g, m2 in np.argwhere(W)]


def drop_link(W: np.ndarray, unit: tuple[int, ...], n_firms: int) -> np.ndarray:
    W = W.copy()
    M = W.shape[0] // n_firms
    if len(unit) == 3:
        m, g, m2 = unit
        W[np.arange(n_firms) * M + m, g, m2] = False
    else:
        f, m, g, m2 = unit
        W[f * M + m, g, m2] = False
    return W


# ---------------------------------------------------------------- panel

@dataclass
class FirmPanel:
    """Opening events of ``F`` firms in ``M`` markets.

    ``increments[k]`` is the vector of store-count increments at event ``k``;
    file data carry one agent per event, the simulator may record several
    agents opening at one decision time.  ``horizon`` at or after the last
    event closes the observation window.
    """

    firms: list[str]
    markets: list[str]
    n0: np.ndarray
    times: np.ndarray
    increments: np.ndarray
    horizon: float
    cov_times: np.ndarray
    cov_values: np.ndarray
    cov_names: list[str]
    start: float = 0.0

    def __post_init__(self):
        F, M = len(self.firms), len(self.markets)
        self.n0 = np.asarray(self.n0, dtype=np.int64).reshape(F, M)
        self.times = np.asarray(self.times, dtype=float)
        self.increments = np.asarray(self.increments, dtype=np.int64).reshape(len(self.times), F * M)
        self.cov_times = np.asarray(self.cov_times, dtype=float)
        self.cov_values = np.asarray(self.cov_values, dtype=float)
        if self.cov_values.shape != (len(self.cov_times), M, len(self.cov_names)):
            raise EstimationError("covariate path has the wrong shape")
        if np.any(self.n0 < 0) or np.any(self.increments < 0):
            raise EstimationError("store counts must be nonnegative")
        if len(self.times):
            if np.any(np.diff(self.times) <= 0) or self.times[0] < self.start:
                raise EstimationError("event times must be strictly increasing after the start")
            if np.any(self.increments.sum(axis=1) == 0):
                raise EstimationError("every event must open at least one store")
            if self.horizon < self.times[-1]:
                raise EstimationError("horizon precedes the last event")
        if self.horizon < self.start:
            raise EstimationError("horizon precedes the start")

    @property
    def n_firms(self) -> int:
        return len(self.firms)

    @property
    def n_markets(self) -> int:
        return len(self.markets)

    @property
    def n_agents(self) -> int:
        return self.n_firms * self.n_markets

    @property
    def n_cov(self) -> int:
        return len(self.cov_names)

    def __len__(self) -> int:
        return len(self.times)

    def states(self) -> np.ndarray:
        """Store counts just before each event, shape ``(K, A)``."""
        base = self.n0.reshape(-1)
        if not len(self.times):
            return np.zeros((0, base.size), dtype=np.int64)
        before = np.cumsum(self.increments, axis=0) - self.increments
        return base[None, :] + before

    def final_state(self) -> np.ndarray:
        return self.n0.reshape(-1) + self.increments.sum(axis=0)

    def covariates_at(self, t) -> np.ndarray:
        """Last observation carried forward; times before the first
        measurement use the first one."""
        idx = np.searchsorted(self.cov_times, np.asarray(t, dtype=float), side="right") - 1
        return self.cov_values[np.clip(idx, 0, len(self.cov_times) - 1)]

    def relabel_markets(self, perm) -> "FirmPanel":
        """Panel with market ``m`` renamed ``perm[m]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        F, M = self.n_firms, self.n_markets
        inc = self.increments.reshape(-1, F, M)[:, :, inv].reshape(-1, F * M)
        return replace(self, markets=[self.markets[i] for i in inv], n0=self.n0[:, inv],
                       increments=inc, cov_values=self.cov_values[:, inv, :])


# ---------------------------------------------------------------- indices

def _features(N: np.ndarray, S: np.ndarray, W: np.ndarray | None, n_firms: int):
    """Attention and profit design arrays for states ``N`` (J, A) and covariates ``S`` (J, M, K)."""
    J, A = N.shape
    F = n_firms
    M = A // F
    Nfm = N.reshape(J, F, M).astype(float)
    Smk = np.repeat(S[:, None, :, :], F, axis=1).reshape(J, A, -1)
    own_mkt = np.log1p(np.transpose(Nfm, (0, 2, 1)))            # (J, M, F)
    own_mkt = np.repeat(own_mkt[:, None, :, :], F, axis=1).reshape(J, A, F)
    if W is None:
        nb = np.zeros((J, A, F))
    else:
        nb = np.log1p(np.einsum("agm,jgm->jag", W.astype(float), Nfm, optimize=True))
    att = np.concatenate([Smk, own_mkt, own_mkt ** 2, nb, nb ** 2], axis=2)
    own = np.log1p(N.astype(float))
    total = Nfm.sum(axis=1)                                      # (J, M)
    comp = np.log1p(np.repeat(total[:, None, :], F, axis=1).reshape(J, A) - N)
    pro = np.concatenate([Smk, own[..., None], own[..., None] ** 2, comp[..., None], comp[..., None] ** 2], axis=2)
    return att, pro


def _indices(theta: Theta, att: np.ndarray, pro: np.ndarray):
    F = theta.n_firms
    A = att.shape[1]
    firm = np.repeat(np.arange(F), A // F)
    xt = np.einsum("jak,ak->ja", att, theta.attention[firm])
    x = np.einsum("jak,ak->ja", pro, theta.profit[firm])
    return xt, x


def attention_index(theta: Theta, W, S, N, agent: int) -> float:
    """Mean attention index of one agent; ``S`` is (M, K), ``N`` is (F, M) or (A,)."""
    att, pro = _features(np.asarray(N).reshape(1, -1), np.asarray(S, float)[None], W, theta.n_firms)
    return float(_indices(theta, att, pro)[0][0, agent])


def profit_index(theta: Theta, S, N, agent: int) -> float:
    att, pro = _features(np.asarray(N).reshape(1, -1), np.asarray(S, float)[None], None, theta.n_firms)
    return float(_indices(theta, att, pro)[1][0, agent])


def _log_sigmoid(x: np.ndarray):
    """``ln F(x)`` and ``ln F(-x)`` for the logistic ``F``."""
    lx = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return lx, lx - x


def _log_probs(theta: Theta, xt: np.ndarray, x: np.ndarray, with_tails: bool = False):
    """``ln p`` and ``ln(1 - p)`` for ``p = F(xt) F(x)``, using
    ``1 - F(a) F(b) = F(-a) + F(a) F(-b)`` to avoid cancellation."""
    lr, lr_c = _log_sigmoid(x)
    if theta.full_consideration:
        lq, lq_c = np.zeros_like(xt), np.full_like(xt, -np.inf)
        out = (lr, lr_c)
    else:
        lq, lq_c = _log_sigmoid(xt)
        u, v = lq_c, lq + lr_c
        hi = np.maximum(u, v)
        out = (lq + lr, hi + np.log1p(np.exp(-np.abs(u - v))))
    return out + (lq_c, lr_c) if with_tails else out


def opening_probs(theta: Theta, W, S, N) -> np.ndarray:
    """Opening probabilities of all agents at one state, shape ``(A,)``."""
    att, pro = _features(np.asarray(N).reshape(1, -1), np.asarray(S, float)[None], W, theta.n_firms)
    xt, x = _indices(theta, att, pro)
    return np.exp(_log_probs(theta, xt, x)[0][0])


def opening_prob(theta: Theta, W, S, N, agent: int) -> float:
    return float(opening_probs(theta, W, S, N)[agent])


# ---------------------------------------------------------------- likelihood

class _Problem:
    """Design arrays of one panel under one network."""

    def __init__(self, panel: FirmPanel, W: np.ndarray | None):
        if W is not None and W.shape != (panel.n_agents, panel.n_firms, panel.n_markets):
            raise EstimationError("link array does not match the panel")
        N = panel.states()
        K = len(panel)
        t_prev = np.concatenate([[panel.start], panel.times[:-1]]) if K else np.zeros(0)
        gaps = panel.times - t_prev
        r = (panel.increments > 0).astype(float)
        # the gap before event k is charged at the state just before it;
        # covariates are read at the event time
        S = panel.covariates_at(panel.times) if K else np.zeros((0, panel.n_markets, panel.n_cov))
        last = panel.times[-1] if K else panel.start
        if panel.horizon > last:
            N = np.vstack([N, panel.final_state()[None, :]])
            gaps = np.append(gaps, panel.horizon - last)
            r = np.vstack([r, np.zeros((1, panel.n_agents))])
            S = np.concatenate([S, panel.covariates_at([panel.horizon])], axis=0)
            ev = np.append(np.ones(K), 0.0)
        else:
            ev = np.ones(K)
        self.gaps, self.r, self.ev = gaps, r, ev
        att, pro = _features(N, S, W, panel.n_firms)
        F, M = panel.n_firms, panel.n_markets
        J = att.shape[0]
        # per-firm design blocks, rows ordered (row, market)
        self.att = np.ascontiguousarray(att.reshape(J, F, M, -1).transpose(1, 0, 2, 3)).reshape(F, J * M, -1)
        self.pro = np.ascontiguousarray(pro.reshape(J, F, M, -1).transpose(1, 0, 2, 3)).reshape(F, J * M, -1)
        self.F, self.M, self.J = F, M, J
        self.n_events = K

    def _idx(self, theta: Theta):
        F, M, J = self.F, self.M, self.J
        xt = np.empty((J, F * M))
        x = np.empty((J, F * M))
        for f in range(F):
            xt[:, f * M:(f + 1) * M] = (self.att[f] @ theta.attention[f]).reshape(J, M)
            x[:, f * M:(f + 1) * M] = (self.pro[f] @ theta.profit[f]).reshape(J, M)
        return xt, x

    def _collect(self, g: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        F, M = self.F, self.M
        return np.stack([np.ascontiguousarray(g[:, f * M:(f + 1) * M]).reshape(-1) @ blocks[f]
                         for f in range(F)])

    def value(self, theta: Theta) -> float:
        xt, x = self._idx(theta)
        lp, l1p = _log_probs(theta, xt, x)
        ll_event = (self.r * lp + (1 - self.r) * l1p).sum(axis=1)
        p0 = np.exp(l1p.sum(axis=1))
        terms = self.ev * ll_event - self.gaps * (1.0 - p0)
        return float(np.sum(terms))

    def value_and_grad(self, theta: Theta):
        xt, x = self._idx(theta)
        lp, l1p, lq_c, lr_c = _log_probs(theta, xt, x, with_tails=True)
        r = self.r
        ll_event = (r * lp + (1 - r) * l1p).sum(axis=1)
        p0 = np.exp(l1p.sum(axis=1))
        value = float(np.sum(self.ev * ll_event - self.gaps * (1.0 - p0)))
        odds = np.exp(np.minimum(lp - l1p, 700.0))
        core = self.ev[:, None] * (r - (1 - r) * odds) - (self.gaps * p0)[:, None] * odds
        ga = self._collect(core * np.exp(lr_c), self.pro)
        if theta.full_consideration:
            gt = np.zeros_like(theta.attention)
        else:
            gt = self._collect(core * np.exp(lq_c), self.att)
        grad = np.concatenate([gt.ravel(), ga.ravel()])
        return value, grad


def log_likelihood(theta: Theta, W, panel: FirmPanel) -> float:
    return _Problem(panel, W).value(theta)


def log_likelihood_grad(theta: Theta, W, panel: FirmPanel):
    """Log-likelihood and its gradient with respect to every entry of theta."""
    return _Problem(panel, W).value_and_grad(theta)


# ---------------------------------------------------------------- maximization

@dataclass
class FitResult:
    theta: Theta
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    degenerate: bool
    message: str
    start_logliks: list = field(default_factory=list)

    def report(self) -> dict:
        return {"loglik": self.loglik, "grad_norm": self.grad_norm, "iterations": self.iterations,
                "converged": self.converged, "degenerate": self.degenerate, "message": self.message,
                "start_logliks": self.start_logliks}


def _hessian_free(prob: _Problem, theta: Theta, rel_step: float = 1e-4):
    """Central differences of the analytic gradient over the free entries."""
    idx = np.flatnonzero(theta.mask)
    x0 = theta.values
    H = np.empty((idx.size, idx.size))
    for col, i in enumerate(idx):
        h = rel_step * max(abs(x0[i]), 1.0)
        up, dn = x0.copy(), x0.copy()
        up[i] += h
        dn[i] -= h
        gu = prob.value_and_grad(theta.with_values(up))[1][idx]
        gd = prob.value_and_grad(theta.with_values(dn))[1][idx]
        H[:, col] = (gu - gd) / (2 * h)
    raw_asym = float(np.max(np.abs(H - H.T))) if H.size else 0.0
    return 0.5 * (H + H.T), raw_asym


def _fit_once(prob: _Problem, theta0: Theta, gtol: float, max_iter: int, polish: int):
    scale = max(1.0, float(prob.n_events))

    def f(x):
        v, g = prob.value_and_grad(theta0.with_free(x))
        return -v / scale, -g[theta0.mask] / scale

    res = minimize(f, theta0.free(), jac=True, method="BFGS",
                   options={"gtol": gtol / scale, "maxiter": max_iter})
    theta = theta0.with_free(res.x)
    value, grad = prob.value_and_grad(theta)
    gnorm = float(np.max(np.abs(grad[theta.mask]))) if theta.mask.any() else 0.0
    iters = int(res.nit)
    step = np.inf
    for _ in range(polish):
        if gnorm < gtol or step < 1e-10:
            break
        H, _ = _hessian_free(prob, theta)
        try:
            d = -np.linalg.solve(H, grad[theta.mask])
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(d)) or d @ grad[theta.mask] <= 0:
            break
        t = 1.0
        while t > 1e-6:
            cand = theta.with_free(theta.free() + t * d)
            v2, g2 = prob.value_and_grad(cand)
            if np.isfinite(v2) and v2 >= value - 1e-12 * abs(value):
                break
            t *= 0.5
        else:
            break
        step = float(np.max(np.abs(t * d)))
        theta, value, grad = cand, v2, g2
        gnorm = float(np.max(np.abs(grad[theta.mask])))
        iters += 1
    converged = gnorm < gtol or step < 1e-10
    return theta, value, gnorm, iters, converged, str(res.message)


def maximize_likelihood(panel: FirmPanel, W, theta0: Theta, *, gtol: float = 1e-6,
                        max_iter: int = 2000, polish: int = 20, starts: int = 2,
                        problem: _Problem | None = None, extra=()) -> FitResult:
    """Profiled maximum likelihood for a fixed link array.

    Quasi-Newton ascent with the analytic gradient, followed by Newton steps on
    a finite-difference Hessian until the gradient sup-norm falls below
    ``gtol``.  The likelihood is not concave, so a second start at the origin
    (or a shrunken copy of ``theta0`` if that is the origin) is also tried and
    the better result kept.  ``extra`` adds further starting points.
    """
    prob = problem or _Problem(panel, W)
    inits = [theta0]
    if starts > 1:
        alt = theta0.free() * 0.0 if np.any(theta0.free() != 0) else theta0.free() - 0.5
        inits.append(theta0.with_free(alt))
    inits = inits[:max(starts, 1)] + list(extra)
    best = None
    logliks = []
    for init in inits:
        out = _fit_once(prob, init, gtol, max_iter, polish)
        logliks.append(out[1])
        if best is None or out[1] > best[1]:
            best = out
    theta, value, gnorm, iters, conv, msg = best
    degenerate = len(panel) == 0
    if degenerate:
        msg = "no events: the likelihood pushes every opening probability to zero"
    return FitResult(theta, value, gnorm, iters, conv and not degenerate, degenerate, msg, logliks)


@dataclass
class StandardErrors:
    se: np.ndarray
    hessian: np.ndarray
    asymmetry: float
    eigenvalues: np.ndarray
    negative_definite: bool

    def report(self) -> dict:
        return {"asymmetry_before_symmetrizing": self.asymmetry,
                "max_eigenvalue": float(self.eigenvalues.max()) if self.eigenvalues.size else None,
                "negative_definite": self.negative_definite,
                "offending_eigenvalues": [float(e) for e in self.eigenvalues if e >= 0]}


def standard_errors(theta: Theta, W, panel: FirmPanel, *, rel_step: float = 1e-4) -> StandardErrors:
    """Inverse of the negative Hessian of the log-likelihood over free entries.

    Fixed entries get NaN.  A Hessian that is not negative definite is
    reported with its offending eigenvalues; variances are still returned
    where the inverse has a positive diagonal.
    """
    prob = _Problem(panel, W)
    H, asym = _hessian_free(prob, theta, rel_step)
    eig = np.linalg.eigvalsh(H) if H.size else np.zeros(0)
    if H.size and np.min(np.abs(eig)) <= 1e-12 * max(np.max(np.abs(eig)), 1e-300):
        raise EstimationError("Hessian is singular")
    cov = np.linalg.inv(-H) if H.size else H
    se = np.full(theta.values.size, np.nan)
    diag = np.diag(cov)
    with np.errstate(invalid="ignore"):
        se[theta.mask] = np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan)
    return StandardErrors(se, H, asym, eig, bool(np.all(eig < 0)))


# ---------------------------------------------------------------- network search

@dataclass
class SearchResult:
    W: np.ndarray
    fit: FitResult
    trace: list

    def links(self, n_firms: int, tie: bool = False) -> list:
        return link_units(self.W, n_firms, tie)


def greedy_network_search(panel: FirmPanel, candidate: np.ndarray, theta0: Theta, *,
                          tie: bool = False, max_rounds: int | None = None, **fit_kw) -> SearchResult:
    """Backward elimination of consideration links.

    Each round refits theta for every single-link deletion (warm-started at
    the incumbent estimate) and applies the deletion with the largest
    likelihood gain.  Equal gains go to the lowest link in lexicographic
    order.  The search stops when no deletion raises the likelihood.
    """
    F = panel.n_firms
    W = candidate.copy()
    fit = maximize_likelihood(panel, W, theta0, **fit_kw)
    trace = [{"round": 0, "link": None, "loglik": fit.loglik, "delta": None, "links": int(W.sum())}]
    rounds = 0
    while max_rounds is None or rounds < max_rounds:
        units = link_units(W, F, tie)
        if not units:
            break
        best = None
        failures = []
        for unit in units:
            W2 = drop_link(W, unit, F)
            try:
                cand = maximize_likelihood(panel, W2, fit.theta, **fit_kw)
            except (EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
                failures.append({"link": list(unit), "error": str(exc)})
                continue
            if best is None or cand.loglik > best[1].loglik:
                best = (unit, cand, W2)
        rounds += 1
        if best is None or not best[1].loglik > fit.loglik:
            trace.append({"round": rounds, "link": None, "loglik": fit.loglik, "delta": 0.0,
                          "links": int(W.sum()), "stopped": True, "failures": failures})
            break
        unit, cand, W2 = best
        trace.append({"round": rounds, "link": list(unit), "loglik": cand.loglik,
                      "delta": cand.loglik - fit.loglik, "links": int(W2.sum()), "failures": failures})
        W, fit = W2, cand
    return SearchResult(W, fit, trace)


def exhaustive_network_search(panel: FirmPanel, candidate: np.ndarray, theta0: Theta, *,
                              tie: bool = False, **fit_kw) -> SearchResult:
    """Fit every subset of the candidate links; for small instances only.

    The likelihood has ridges along which it keeps rising, so a single start
    can stop short.  Subsets are visited from the full network down and each
    fit is also started from the best fit among the subsets with one more
    link, which covers every path a deletion search can take.
    """
    F = panel.n_firms
    units = link_units(candidate, F, tie)
    if len(units) > 16:
        raise EstimationError(f"{len(units)} links is too many for enumeration")
    best = None
    trace = []
    fits: dict[tuple, FitResult] = {}
    order = sorted(product((True, False), repeat=len(units)), key=lambda k: -sum(k))
    for keep in order:
        W = candidate.copy()
        for flag, unit in zip(keep, units):
            if not flag:
                W = drop_link(W, unit, F)
        parents = [fits[keep[:i] + (True,) + keep[i + 1:]] for i in range(len(keep)) if not keep[i]]
        extra = [max(parents, key=lambda f: f.loglik).theta] if parents else []
        fit = maximize_likelihood(panel, W, theta0, extra=extra, **fit_kw)
        fits[keep] = fit
        trace.append({"keep": [bool(k) for k in keep], "loglik": fit.loglik})
        if best is None or fit.loglik > best[1].loglik:
            best = (W, fit)
    return SearchResult(best[0], best[1], trace)


# ---------------------------------------------------------------- simulation

def simulate_firm_panel(theta: Theta, W, n0, covariates, horizon: float, seed: int, *,
                        cov_times=None, firms=None, markets=None, cov_names=None) -> FirmPanel:
    """Event data from the model with one unit-rate decision clock.

    At every ring each agent opens a store with its opening probability at the
    current state; rings with at least one opening are recorded.
    ``covariates`` has shape ``(M, K)`` (held fixed) or ``(T, M, K)`` with
    measurement times ``cov_times`` (carried forward).
    """
    rng = np.random.default_rng(seed)
    n0 = np.asarray(n0, dtype=np.int64)
    F, M = n0.shape
    path = np.asarray(covariates, dtype=float)
    if path.ndim == 2:
        path = path[None]
        cov_times = np.zeros(1)
    cov_times = np.asarray(cov_times, dtype=float)
    if len(cov_times) != path.shape[0]:
        raise EstimationError("covariate path and its times differ in length")
    N = n0.reshape(-1).copy()
    t = 0.0
    times, incs = [], []
    seg = max(int(np.searchsorted(cov_times, 0.0, side="right")) - 1, 0)
    next_change = cov_times[seg + 1] if seg + 1 < len(cov_times) else np.inf
    p = opening_probs(theta, W, path[seg], N)
    while True:
        t += rng.exponential(1.0)
        if t > horizon:
            break
        if t >= next_change:
            seg = int(np.searchsorted(cov_times, t, side="right")) - 1
            next_change = cov_times[seg + 1] if seg + 1 < len(cov_times) else np.inf
            p = opening_probs(theta, W, path[seg], N)
        opened = rng.random(N.size) < p
        if opened.any():
            times.append(t)
            incs.append(opened.astype(np.int64))
            N = N + opened
            p = opening_probs(theta, W, path[seg], N)
    firms = firms or [f"f{f}" for f in range(F)]
    markets = markets or [f"m{m}" for m in range(M)]
    cov_names = cov_names or [f"s{k}" for k in range(path.shape[2])]
    return FirmPanel(list(firms), list(markets), n0, np.array(times),
                     np.array(incs, dtype=np.int64).reshape(len(times), F * M), float(horizon),
                     cov_times, path, list(cov_names))


# ---------------------------------------------------------------- files

SAME_DAY_GAP = 1e-6


def _read_csv(path, required: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EstimationError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise EstimationError(f"{path}: missing columns {missing}")
        rows = []
        for line, row in enumerate(reader, start=2):
            row["_line"] = line
            rows.append(row)
        return rows


def _parse_date(text: str, path, line) -> float:
    try:
        return float(date.fromisoformat(text.strip()).toordinal())
    except ValueError as exc:
        raise EstimationError(f"{path}:{line}: bad date {text!r}") from exc


def read_geography(geo_path, borders_path=None) -> Geography:
    rows = _read_csv(geo_path, ["market", "province", "lat", "lon"])
    markets = [r["market"] for r in rows]
    index = {m: i for i, m in enumerate(markets)}
    try:
        lat = [float(r["lat"]) for r in rows]
        lon = [float(r["lon"]) for r in rows]
    except ValueError as exc:
        raise EstimationError(f"{geo_path}: missing coordinates ({exc})") from exc
    borders = set()
    if borders_path is not None:
        for r in _read_csv(borders_path, ["market_a", "market_b"]):
            try:
                borders.add((index[r["market_a"]], index[r["market_b"]]))
            except KeyError as exc:
                raise EstimationError(f"{borders_path}:{r['_line']}: unknown market {exc}") from exc
    return Geography(markets, [r["province"] for r in rows], lat, lon, borders)


def read_firm_panel(openings_path, markets_path, geo: Geography, *, start: str | None = None,
                    firms: list[str] | None = None) -> FirmPanel:
    """Events from dated openings.

    Rows sharing a date, firm and market form one event whose increment is the
    number of rows.  Distinct agents opening on the same date are ordered by
    first appearance in the file and spaced ``SAME_DAY_GAP`` days apart.
    Openings dated before ``start`` form the initial counts.  Times are days
    since ``start`` (default: the first opening date).  An intercept is
    prepended to the covariates, which are carried forward between dates.
    """
    rows = _read_csv(openings_path, ["date", "firm", "market"])
    index = {m: i for i, m in enumerate(geo.markets)}
    parsed = []
    for r in rows:
        if r["market"] not in index:
            raise EstimationError(f"{openings_path}:{r['_line']}: unknown market {r['market']!r}")
        parsed.append((_parse_date(r["date"], openings_path, r["_line"]), r["firm"], index[r["market"]]))
    firms = firms or sorted({p[1] for p in parsed})
    fidx = {f: i for i, f in enumerate(firms)}
    F, M = len(firms), len(geo.markets)
    t0 = (_parse_date(start, "start", 0) if start is not None
          else (min(p[0] for p in parsed) if parsed else 0.0))
    n0 = np.zeros((F, M), dtype=np.int64)
    groups: dict[tuple, int] = {}
    order: list[tuple] = []
    for day, firm, m in parsed:
        if firm not in fidx:
            raise EstimationError(f"unknown firm {firm!r}")
        if day < t0:
            n0[fidx[firm], m] += 1
            continue
        key = (day, fidx[firm], m)
        if key not in groups:
            groups[key] = 0
            order.append(key)
        groups[key] += 1
    order.sort(key=lambda k: k[0])          # stable: file order within a day
    times, incs = [], []
    seen_day, slot = None, 0
    for key in order:
        day, f, m = key
        slot = slot + 1 if day == seen_day else 0
        seen_day = day
        times.append(day - t0 + slot * SAME_DAY_GAP)
        inc = np.zeros(F * M, dtype=np.int64)
        inc[f * M + m] = groups[key]
        incs.append(inc)
    mrows = _read_csv(markets_path, ["market", "date"])
    cov_cols = [c for c in mrows[0] if c not in ("market", "date", "_line")] if mrows else []
    dates = sorted({_parse_date(r["date"], markets_path, r["_line"]) for r in mrows})
    if not dates:
        raise EstimationError(f"{markets_path}: no covariate rows")
    didx = {d: i for i, d in enumerate(dates)}
    vals = np.full((len(dates), M, len(cov_cols) + 1), np.nan)
    vals[:, :, 0] = 1.0
    for r in mrows:
        if r["market"] not in index:
            raise EstimationError(f"{markets_path}:{r['_line']}: unknown market {r['market']!r}")
        try:
            vals[didx[_parse_date(r["date"], markets_path, r["_line"])], index[r["market"]], 1:] = \
                [float(r[c]) for c in cov_cols]
        except ValueError as exc:
            raise EstimationError(f"{markets_path}:{r['_line']}: {exc}") from exc
    for i in range(1, len(dates)):
        gap = np.isnan(vals[i])
        vals[i][gap] = vals[i - 1][gap]
    if np.isnan(vals[0]).any():
        raise EstimationError(f"{markets_path}: some market lacks covariates at the first date")
    horizon = times[-1] if times else 0.0
    return FirmPanel(firms, list(geo.markets), n0, np.array(times),
                     np.array(incs, dtype=np.int64).reshape(len(times), F * M), horizon,
                     np.array(dates) - t0, vals, ["const"] + cov_cols)


def write_network(W: np.ndarray, panel: FirmPanel, path) -> None:
    F, M = panel.n_firms, panel.n_markets
    links = [{"firm": panel.firms[f], "market": panel.markets[m],
              "peer_firm": panel.firms[g], "peer_market": panel.markets[m2]}
             for f, m, g, m2 in link_units(W, F)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"n_links": len(links), "links": links}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_network(path, panel: FirmPanel) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    F, M = panel.n_firms, panel.n_markets
    fi = {f: i for i, f in enumerate(panel.firms)}
    mi = {m: i for i, m in enumerate(panel.markets)}
    W = np.zeros((F * M, F, M), dtype=bool)
    for link in doc["links"]:
        W[fi[link["firm"]] * M + mi[link["market"]], fi[link["peer_firm"]], mi[link["peer_market"]]] = True
    return W


def write_trace(trace: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_firm_data(panel: FirmPanel, geo: Geography, directory, start: str = "2020-01-01") -> None:
    """Write ``openings.csv``, ``markets.csv``, ``geo.csv`` and ``borders.csv``.

    Event times are floored to whole days; initial stores are dated the day
    before ``start``.  The intercept column of the covariates is dropped.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    t0 = date.fromisoformat(start).toordinal()
    F, M = panel.n_firms, panel.n_markets

    def day(t):
        return date.fromordinal(t0 + int(np.floor(t))).isoformat()

    with open(out / "openings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "firm", "market"])
        before = date.fromordinal(t0 - 1).isoformat()
        for f in range(F):
            for m in range(M):
                for _ in range(int(panel.n0[f, m])):
                    w.writerow([before, panel.firms[f], panel.markets[m]])
        for t, inc in zip(panel.times, panel.increments):
            for a in np.flatnonzero(inc):
                for _ in range(int(inc[a])):
                    w.writerow([day(t), panel.firms[a // M], panel.markets[a % M]])
    with open(out / "markets.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["market", "date"] + list(panel.cov_names[1:]))
        for k, t in enumerate(panel.cov_times):
            for m in range(M):
                w.writerow([panel.markets[m], day(t)] + [repr(float(x)) for x in panel.cov_values[k, m, 1:]])
    with open(out / "geo.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["market", "province", "lat", "lon"])
        for m in range(M):
            w.writerow([geo.markets[m], geo.province[m], repr(float(geo.lat[m])), repr(float(geo.lon[m]))])
    with open(out / "borders.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["market_a", "market_b"])
        for a, b in sorted(geo.borders):
            w.writerow([geo.markets[a], geo.markets[b]])
