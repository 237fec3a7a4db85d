"""Truncated stick-breaking Dirichlet-process Gaussian mixture.

Fitting uses coordinate-ascent variational inference with a diagonal
Normal-Gamma base measure. The variational family is

    q(v_t)        = Beta(gamma1_t, gamma2_t)          t < T  (v_T = 1)
    q(mu, lam)_td = NormalGamma(m_td, kappa_td, a_td, b_td)
    q(z_i)        = Categorical(r_i)

Point estimates (weights, means, variances) are extracted from the
variational posterior after convergence and drive :func:`responsibilities`.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

VARIANCE_FLOOR = 1e-8
STIRLING_MAX_N = 25
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DpGmmPrior:
    """DP concentration plus a per-dimension Normal-Gamma base measure."""
    alpha0: float
    m0: np.ndarray
    kappa0: float
    a0: float
    b0: np.ndarray

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not (self.kappa0 > 0 and self.a0 > 0):
            raise ValueError("kappa0 and a0 must be positive")
        if np.any(np.asarray(self.b0) <= 0):
            raise ValueError("b0 must be positive")

    @classmethod
    def empirical(cls, X: np.ndarray, alpha0: float = 1.0, kappa0: float = 1.0,
                  a0: float = 1.0) -> DpGmmPrior:
        """Prior centred on the data mean with rate equal to the data variance."""
        X = np.asarray(X, dtype=float)
        return cls(alpha0=float(alpha0), m0=X.mean(axis=0), kappa0=float(kappa0),
                   a0=float(a0), b0=np.maximum(X.var(axis=0), VARIANCE_FLOOR))


@dataclass
class StickState:
    """Beta posteriors over the first ``T - 1`` stick fractions."""
    gamma1: np.ndarray
    gamma2: np.ndarray


@dataclass
class DpGmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    prior: DpGmmPrior | None = None
    sticks: StickState | None = None
    elbo_trace: list = field(default_factory=list)
    active_mask: np.ndarray | None = None
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.maximum(
            np.atleast_2d(np.asarray(self.variances, dtype=float)), VARIANCE_FLOOR)
        if self.active_mask is None:
            self.active_mask = np.ones(len(self.weights), dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.means.shape != self.variances.shape or self.means.shape[0] != len(self.weights):
            raise ValueError("weights, means and variances disagree on component count")

    @property
    def truncation(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask)

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    def to_dict(self) -> dict:
        out = {
            "format_version": 1,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "active_mask": self.active_mask.tolist(),
            "elbo_trace": [float(e) for e in self.elbo_trace],
            "n_iter": self.n_iter,
            "converged": self.converged,
        }
        if self.prior is not None:
            out["prior"] = {"alpha0": self.prior.alpha0, "m0": self.prior.m0.tolist(),
                            "kappa0": self.prior.kappa0, "a0": self.prior.a0,
                            "b0": np.asarray(self.prior.b0).tolist()}
        if self.sticks is not None:
            out["gamma1"] = self.sticks.gamma1.tolist()
            out["gamma2"] = self.sticks.gamma2.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> DpGmmModel:
        prior = None
        if "prior" in d:
            p = d["prior"]
            prior = DpGmmPrior(alpha0=p["alpha0"], m0=np.array(p["m0"]), kappa0=p["kappa0"],
                               a0=p["a0"], b0=np.array(p["b0"]))
        sticks = None
        if "gamma1" in d:
            sticks = StickState(np.array(d["gamma1"]), np.array(d["gamma2"]))
        return cls(weights=np.array(d["weights"]), means=np.array(d["means"]),
                   variances=np.array(d["variances"]), prior=prior, sticks=sticks,
                   elbo_trace=list(d.get("elbo_trace", [])),
                   active_mask=np.array(d["active_mask"], dtype=bool),
                   n_iter=d.get("n_iter", 0), converged=d.get("converged", False))


def save_model(model: DpGmmModel, path: str | os.PathLike):
    # json writes floats with repr(), i.e. shortest round-trip (<= 17 digits)
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path: str | os.PathLike) -> DpGmmModel:
    with open(Path(path)) as fh:
        return DpGmmModel.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Stick breaking


def stick_weights(beta) -> tuple[np.ndarray, float]:
    """Weights ``pi_k = beta_k * prod_{i<k} (1 - beta_i)`` and leftover mass."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("stick fractions must lie in the open interval (0, 1)")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    pi = beta * remaining[:-1]
    return pi, float(remaining[-1])


def _expected_weights(sticks: StickState) -> np.ndarray:
    """Posterior-mean weights; the last component takes the leftover mass."""
    mean_v = sticks.gamma1 / (sticks.gamma1 + sticks.gamma2)
    mean_v = np.clip(mean_v, 1e-300, 1.0 - 1e-16)
    pi, residual = stick_weights(mean_v)
    w = np.append(pi, residual)
    return w / w.sum()


# --------------------------------------------------------------------------
# CAVI


@dataclass
class _VarState:
    gamma1: np.ndarray
    gamma2: np.ndarray
    m: np.ndarray
    kappa: np.ndarray
    a: np.ndarray
    b: np.ndarray


def _update_globals(X, resp, prior: DpGmmPrior) -> _VarState:
    Nk = resp.sum(axis=0)
    # suffix sums of Nk over components strictly after t
    tail = np.concatenate([np.cumsum(Nk[::-1])[::-1][1:], [0.0]])
    gamma1 = 1.0 + Nk[:-1]
    gamma2 = prior.alpha0 + tail[:-1]

    safe = np.maximum(Nk, 1e-300)[:, None]
    xbar = resp.T @ X / safe
    sq = resp.T @ (X * X) / safe - xbar ** 2
    Sk = np.maximum(sq, 0.0) * Nk[:, None]
    kappa = prior.kappa0 + Nk
    m = (prior.kappa0 * prior.m0[None, :] + Nk[:, None] * xbar) / kappa[:, None]
    a = prior.a0 + 0.5 * Nk
    b = (prior.b0[None, :] + 0.5 * Sk
         + 0.5 * (prior.kappa0 * Nk / kappa)[:, None] * (xbar - prior.m0[None, :]) ** 2)
    a = np.broadcast_to(a[:, None], m.shape).copy()
    return _VarState(gamma1, gamma2, m, np.broadcast_to(kappa[:, None], m.shape).copy(), a, b)


def _expected_log_pi(gamma1, gamma2) -> np.ndarray:
    dg = digamma(gamma1 + gamma2)
    e_log_v = digamma(gamma1) - dg
    e_log_1mv = digamma(gamma2) - dg
    return (np.append(e_log_v, 0.0)
            + np.concatenate([[0.0], np.cumsum(e_log_1mv)]))


def _expected_log_lik(X, st: _VarState) -> np.ndarray:
    """E_q[log N(x_i | mu_t, 1/lam_t)] summed over dimensions, shape (n, T)."""
    e_log_lam = digamma(st.a) - np.log(st.b)
    e_lam = st.a / st.b
    const = 0.5 * (e_log_lam - _LOG_2PI - 1.0 / st.kappa).sum(axis=1)
    quad = ((X * X) @ e_lam.T - 2.0 * X @ (e_lam * st.m).T
            + (e_lam * st.m ** 2).sum(axis=1)[None, :])
    return const[None, :] - 0.5 * quad


def _update_resp(X, st: _VarState):
    log_rho = _expected_log_lik(X, st) + _expected_log_pi(st.gamma1, st.gamma2)[None, :]
    log_norm = logsumexp(log_rho, axis=1, keepdims=True)
    log_resp = log_rho - log_norm
    return np.exp(log_resp), log_resp


def _elbo(X, resp, log_resp, st: _VarState, prior: DpGmmPrior) -> float:
    e_log_lam = digamma(st.a) - np.log(st.b)
    e_lam = st.a / st.b

    # E[log p(x | z, mu, lam)] + E[log p(z | v)]
    e_loglik = _expected_log_lik(X, st)
    e_log_pi = _expected_log_pi(st.gamma1, st.gamma2)
    term_x = np.sum(resp * e_loglik)
    term_z = np.sum(resp.sum(axis=0) * e_log_pi)
    ent_z = -np.sum(resp * log_resp)

    # sticks: prior Beta(1, alpha0), posterior Beta(gamma1, gamma2)
    dg = digamma(st.gamma1 + st.gamma2)
    e_log_v = digamma(st.gamma1) - dg
    e_log_1mv = digamma(st.gamma2) - dg
    log_p_v = np.sum(math.log(prior.alpha0) + (prior.alpha0 - 1.0) * e_log_1mv)
    log_q_v = np.sum(gammaln(st.gamma1 + st.gamma2) - gammaln(st.gamma1) - gammaln(st.gamma2)
                     + (st.gamma1 - 1.0) * e_log_v + (st.gamma2 - 1.0) * e_log_1mv)

    # Normal-Gamma prior and posterior
    m0, k0, a0, b0 = prior.m0[None, :], prior.kappa0, prior.a0, prior.b0[None, :]
    log_p_theta = np.sum(
        0.5 * math.log(k0) + 0.5 * e_log_lam - 0.5 * _LOG_2PI
        - 0.5 * k0 * (e_lam * (st.m - m0) ** 2 + 1.0 / st.kappa)
        + a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * e_log_lam - b0 * e_lam)
    log_q_theta = np.sum(
        0.5 * np.log(st.kappa) + 0.5 * e_log_lam - 0.5 * _LOG_2PI - 0.5
        + st.a * np.log(st.b) - gammaln(st.a) + (st.a - 1.0) * e_log_lam - st.a)

    return float(term_x + term_z + ent_z + log_p_v - log_q_v + log_p_theta - log_q_theta)


def fit_cavi(X, prior: DpGmmPrior | None = None, truncation: int = 10, seed: int = 0,
             tol: float = 1e-6, max_iter: int = 500, alpha0: float = 1.0,
             n_init: int = 10, split_moves: bool = True) -> DpGmmModel:
    """Fit a truncated DP Gaussian mixture by coordinate ascent.

    Parameters
    ----------
    X : array of shape (n, d)
    prior : DpGmmPrior, optional
        Defaults to :meth:`DpGmmPrior.empirical` with concentration ``alpha0``.
    truncation : int
        Number of sticks kept by the variational family.
    seed : int
        Seeds the symmetric Dirichlet(1) draws of the initial responsibilities.
    tol : float
        Stop once the relative ELBO change falls below this.
    n_init : int
        Independent restarts, each from a fresh Dirichlet(1) draw taken in
        sequence from the same generator. The run with the highest final
        ELBO is returned.
    split_moves : bool
        After the restarts, repeatedly try splitting an occupied component
        in two along its widest dimension, handing one half to an unused
        stick, and rerun coordinate ascent from there. A split is kept only
        if it raises the converged ELBO. Random soft initializations start
        every component near the data mean, which tends to merge
        well-separated clusters lying off the first split direction.

    Returns
    -------
    DpGmmModel
        Posterior-mean weights and means, variances ``b / a`` (inverse of the
        expected precision), plus the per-iteration ELBO trace of the
        selected run (after an accepted split, the run started from it).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 observations")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if prior is None:
        prior = DpGmmPrior.empirical(X, alpha0=alpha0)
    if prior.m0.shape != (d,):
        raise ValueError("prior dimension does not match data")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        resp = rng.dirichlet(np.ones(truncation), size=n)
        run = _cavi_run(X, resp, prior, tol, max_iter)
        if best is None or run[1][-1] > best[1][-1]:
            best = run
    if split_moves:
        best = _refine_by_splits(X, best, prior, tol, max_iter)
    st, trace, it, converged, _ = best

    sticks = StickState(st.gamma1, st.gamma2)
    weights = _expected_weights(sticks) if truncation > 1 else np.ones(1)
    return DpGmmModel(weights=weights, means=st.m, variances=st.b / st.a, prior=prior,
                      sticks=sticks, elbo_trace=trace, n_iter=it, converged=converged)


def _cavi_run(X, resp, prior, tol, max_iter):
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        st = _update_globals(X, resp, prior)
        resp, log_resp = _update_resp(X, st)
        trace.append(_elbo(X, resp, log_resp, st, prior))
        if it > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
    # final globals consistent with the last responsibilities
    return _update_globals(X, resp, prior), trace, it, converged, resp


def _refine_by_splits(X, best, prior, tol, max_iter, min_count=1.0):
    """Greedy ELBO-gated split moves; see ``fit_cavi``."""
    T = best[4].shape[1]
    for _ in range(T):
        resp = best[4]
        counts = resp.sum(axis=0)
        free = np.flatnonzero(counts < min_count)
        if free.size == 0:
            break
        occupied = np.flatnonzero(counts >= 2 * min_count)
        occupied = occupied[np.argsort(-counts[occupied], kind="stable")]
        accepted = False
        for c in occupied:
            w = resp[:, c] / counts[c]
            mean = w @ X
            var = w @ (X - mean) ** 2
            axis = int(np.argmax(var))
            upper = X[:, axis] > mean[axis]
            R = resp.copy()
            R[:, free[0]] += np.where(upper, R[:, c], 0.0)
            R[:, c] = np.where(upper, 0.0, R[:, c])
            cand = _cavi_run(X, R, prior, tol, max_iter)
            if cand[1][-1] > best[1][-1] + tol * abs(best[1][-1]):
                best = cand
                accepted = True
                break
        if not accepted:
            break
    return best


# --------------------------------------------------------------------------
# Responsibilities, assignment and pruning


def log_weighted_densities(model: DpGmmModel, X) -> np.ndarray:
    """``log(w_j) + log N(x_i | mu_j, diag(var_j))`` over active components."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    idx = model.active_indices
    mu, var = model.means[idx], model.variances[idx]
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights[idx])
    inv = 1.0 / var
    quad = (X * X) @ inv.T - 2.0 * X @ (mu * inv).T + (mu * mu * inv).sum(axis=1)[None, :]
    log_det = np.log(var).sum(axis=1)
    return log_w[None, :] - 0.5 * (X.shape[1] * _LOG_2PI + log_det[None, :] + quad)


def responsibilities(model: DpGmmModel, X) -> np.ndarray:
    """Posterior component probabilities, columns ordered as ``active_indices``."""
    lw = log_weighted_densities(model, X)
    return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))


def hard_assign(model: DpGmmModel, X) -> np.ndarray:
    """Argmax responsibility (position within ``active_indices``); ties go low."""
    return np.argmax(responsibilities(model, X), axis=1)


def prune_and_reassign(model: DpGmmModel, X, threshold: float = 0.10):
    """Drop components holding less than ``threshold`` of the hard-assigned data.

    The component with the largest share always survives. Returns the pruned
    model (weights renormalized over survivors) and the reassigned indices,
    expressed as positions within the new ``active_indices``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("X is empty")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    idx = model.active_indices
    counts = np.bincount(hard_assign(model, X), minlength=len(idx))
    shares = counts / counts.sum()
    keep = shares >= threshold
    if not keep.any():
        keep[np.argmax(shares)] = True

    mask = np.zeros_like(model.active_mask)
    mask[idx[keep]] = True
    weights = np.where(mask, model.weights, 0.0)
    weights = weights / weights.sum()
    pruned = replace(model, weights=weights, active_mask=mask,
                     means=model.means.copy(), variances=model.variances.copy())
    return pruned, hard_assign(pruned, X)


# --------------------------------------------------------------------------
# Number-of-components analytics


def stirling_unsigned(n: int, k: int) -> int:
    """Unsigned Stirling number of the first kind, exact for ``n <= 25``."""
    if not 0 <= n <= STIRLING_MAX_N:
        raise OverflowError(f"n={n} outside the supported range [0, {STIRLING_MAX_N}]")
    if not 0 <= k <= n:
        return 0
    return _stirling_row(n)[k]


def _stirling_row(n: int) -> list[int]:
    row = [1]
    for m in range(n):
        # z(m+1, k) = m z(m, k) + z(m, k-1)
        nxt = [0] * (m + 2)
        for k in range(m + 2):
            nxt[k] = (m * row[k] if k <= m else 0) + (row[k - 1] if k >= 1 else 0)
        row = nxt
    return row


def component_count_pmf(n: int, alpha0: float) -> np.ndarray:
    """``p(k | alpha0, n)`` for ``k = 1..n``, normalized explicitly.

    The returned vector has index ``k - 1`` holding ``p(k)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not alpha0 > 0:
        raise ValueError("alpha0 must be positive")
    row = _stirling_row(n) if n <= STIRLING_MAX_N else None
    if row is None:
        raise OverflowError(f"n={n} outside the supported range [1, {STIRLING_MAX_N}]")
    # work in log space so large alpha0 ** k does not overflow
    logw = np.array([math.log(row[k]) + k * math.log(alpha0) for k in range(1, n + 1)])
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def expected_components(n: int, alpha0: float) -> tuple[float, float]:
    """Exact expected number of occupied components and its log approximation."""
    if n < 1 or not alpha0 > 0:
        raise ValueError("need n >= 1 and alpha0 > 0")
    exact = alpha0 * math.fsum(1.0 / (alpha0 + i) for i in range(n))
    approx = alpha0 * math.log((n + alpha0) / alpha0)
    return exact, approx


def crp_simulate(n: int, alpha0: float, n_samples: int, seed: int = 0) -> np.ndarray:
    """Empirical distribution of the table count after seating ``n`` customers.

    Customer ``i`` (0-based) opens a new table with probability
    ``alpha0 / (alpha0 + i)``; otherwise they join the table of a uniformly
    chosen earlier customer, i.e. an existing table with probability
    proportional to its occupancy. All samples are seated in parallel.
    Returns frequencies for ``k = 1..n``.
    """
    if n < 1 or n_samples < 1:
        raise ValueError("need n >= 1 and n_samples >= 1")
    rng = np.random.default_rng(seed)
    seat = np.zeros((n_samples, n), dtype=np.int64)
    n_tables = np.ones(n_samples, dtype=np.int64)
    rows = np.arange(n_samples)
    for i in range(1, n):
        new = rng.random(n_samples) < alpha0 / (alpha0 + i)
        donor = rng.integers(0, i, size=n_samples)
        seat[:, i] = np.where(new, n_tables, seat[rows, donor])
        n_tables += new
    return np.bincount(n_tables, minlength=n + 1)[1:n + 1] / n_samples
