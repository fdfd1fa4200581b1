"""l1-penalized gaussian and logistic regression with weights and offsets.

Objective::

    (1/n) sum_i w_i * loss(y_i, offset_i + x_i' beta) + lam * sum_j pf_j |beta_j|

where ``loss`` is half the squared error (gaussian) or the Bernoulli negative
log-likelihood with mean ``expit(eta)`` (binomial), and ``pf_j`` is 0 for the
unpenalized column (by default the first, which is the constant dictionary
term) and 1 otherwise. ``n`` is the number of rows, so zero weights drop a row
from the fit without changing the normalization.

Gaussian problems are solved by cyclic coordinate descent on the weighted Gram
matrix; binomial problems by IRLS with a coordinate-descent inner solver and
step halving on the penalized objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import DomainError

Family = Literal["gaussian", "binomial"]

GAUSSIAN_TOL = 1e-8
BINOMIAL_TOL = 1e-7
MAX_OUTER = 10_000
_MAX_INNER = 100_000
_KKT_STALL = 1e-6


@dataclass
class GlmProblem:
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None
    offset: np.ndarray | None = None
    family: Family = "gaussian"
    lam: float = 0.0
    penalize_intercept_term: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DomainError("X must be a matrix")
        n = X.shape[0]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        o = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(-1)
        if y.shape[0] != n or w.shape[0] != n or o.shape[0] != n:
            raise DomainError("X, y, weights and offset have mismatched lengths")
        for name, arr in (("X", X), ("y", y), ("weights", w), ("offset", o)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} contains non-finite values")
        if np.any(w < 0) or not np.any(w > 0):
            raise DomainError("weights must be non-negative with at least one positive")
        if self.family not in ("gaussian", "binomial"):
            raise DomainError(f"unknown family {self.family!r}")
        if self.family == "binomial" and (np.any(y < 0) or np.any(y > 1)):
            raise DomainError("binomial responses must lie in [0, 1]")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise DomainError("lam must be a non-negative finite number")
        self.X, self.y, self.weights, self.offset = X, y, w, o
        self.lam = float(self.lam)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def penalty_factors(self) -> np.ndarray:
        pf = np.ones(self.p)
        if not self.penalize_intercept_term and self.p > 0:
            pf[0] = 0.0
        return pf

    def with_lam(self, lam: float) -> "GlmProblem":
        return GlmProblem(self.X, self.y, self.weights, self.offset, self.family, lam,
                          self.penalize_intercept_term)


@dataclass
class PenalizedFit:
    coefficients: np.ndarray
    family: Family
    lam: float
    converged: bool
    iterations: int
    final_objective: float
    kkt_max_violation: float
    objective_history: list = field(default_factory=list, repr=False)

    def predict(self, X, offset=None) -> np.ndarray:
        return predict_linear(self, X, offset)


def link_inverse(eta: np.ndarray, family: Family) -> np.ndarray:
    return expit(eta) if family == "binomial" else eta


def _loss(problem: GlmProblem, eta: np.ndarray) -> float:
    w, y = problem.weights, problem.y
    if problem.family == "gaussian":
        r = y - eta
        return float(np.dot(w, r * r)) / (2.0 * problem.n)
    # log(1 + e^eta) - y * eta, computed stably
    return float(np.dot(w, np.logaddexp(0.0, eta) - y * eta)) / problem.n


def objective(problem: GlmProblem, beta: np.ndarray) -> float:
    eta = problem.offset + problem.X @ beta
    return _loss(problem, eta) + problem.lam * float(np.dot(problem.penalty_factors(), np.abs(beta)))


def score(problem: GlmProblem, beta: np.ndarray) -> np.ndarray:
    """Gradient of the unpenalized loss, ``(1/n) sum_i w_i dloss/deta_i x_i``."""
    eta = problem.offset + problem.X @ beta
    mu = link_inverse(eta, problem.family)
    return problem.X.T @ (problem.weights * (mu - problem.y)) / problem.n


def kkt_violation(problem: GlmProblem, coefficients) -> float:
    beta = np.asarray(coefficients, dtype=float).reshape(-1)
    if beta.shape[0] != problem.p:
        raise DomainError("coefficient vector has the wrong length")
    g = score(problem, beta)
    lam_j = problem.lam * problem.penalty_factors()
    zero = beta == 0
    viol = np.where(zero,
                    np.maximum(0.0, np.abs(g) - lam_j),
                    np.abs(g + lam_j * np.sign(beta)))
    return float(viol.max()) if viol.size else 0.0


def lambda_max(problem: GlmProblem) -> float:
    """Smallest penalty at which all penalized coefficients are zero."""
    pf = problem.penalty_factors()
    free = pf == 0
    beta = np.zeros(problem.p)
    if np.any(free):
        sub = GlmProblem(problem.X[:, free], problem.y, problem.weights, problem.offset,
                         problem.family, 0.0, penalize_intercept_term=True)
        beta[free] = fit_lasso(sub).coefficients
    g = score(problem, beta)
    pen = ~free
    return float(np.abs(g[pen]).max()) if np.any(pen) else 0.0


@njit(cache=True)
def _cd_sweeps(G, c, lam_j, beta, grad, tol, max_sweeps):
    """Up to ``max_sweeps`` cyclic coordinate-descent sweeps on
    0.5 b'Gb - c'b + sum lam_j |b_j|. ``beta`` and ``grad`` (= Gb - c) are
    updated in place. Returns (sweeps, converged)."""
    p = G.shape[0]
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            djj = G[j, j]
            if djj <= 0.0:
                if beta[j] != 0.0:
                    for k in range(p):
                        grad[k] -= G[k, j] * beta[j]
                    beta[j] = 0.0
                continue
            old = beta[j]
            z = djj * old - grad[j]
            if z > lam_j[j]:
                new = (z - lam_j[j]) / djj
            elif z < -lam_j[j]:
                new = (z + lam_j[j]) / djj
            else:
                new = 0.0
            if new != old:
                d = new - old
                for k in range(p):
                    grad[k] += G[k, j] * d
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            return sweep, True
    return max_sweeps, False


def _quad_objective(G, c, lam_j, beta, const=0.0):
    return const + 0.5 * float(beta @ (G @ beta)) - float(c @ beta) + float(np.dot(lam_j, np.abs(beta)))


def _cd_quadratic(G, c, lam_j, beta, tol, max_sweeps, history=None, const=0.0, chunk=25):
    """Minimize 0.5 b'Gb - c'b + sum lam_j |b_j|; ``beta`` is updated in place.

    Coordinate descent runs in chunks of sweeps; after each chunk an exact
    solve on the current active set is tried and accepted if it satisfies the
    optimality conditions. Returns (sweeps, converged). If ``history`` is a
    list, the objective plus ``const`` is appended after every chunk.
    """
    G = np.ascontiguousarray(G)
    grad = G @ beta - c
    done = 0
    while done < max_sweeps:
        k, conv = _cd_sweeps(G, c, lam_j, beta, grad, tol, min(chunk, max_sweeps - done))
        done += k
        f_cur = _quad_objective(G, c, lam_j, beta, const)
        if history is not None:
            history.append(f_cur)
        if conv:
            return done, True
        cand = _polish_quadratic(G, c, lam_j, beta)
        if cand is not beta and _quad_objective(G, c, lam_j, cand, const) <= f_cur:
            beta[:] = cand
            grad = G @ beta - c
            k, conv = _cd_sweeps(G, c, lam_j, beta, grad, tol, 1)
            done += k
            if history is not None:
                history.append(_quad_objective(G, c, lam_j, beta, const))
            if conv:
                return done, True
    return done, False


def _polish_quadratic(G, c, lam_j, beta):
    """Exact solve on the current active set with fixed signs, if consistent."""
    active = beta != 0
    if not np.any(active):
        return beta
    s = np.sign(beta[active])
    Ga = G[np.ix_(active, active)]
    try:
        sol = np.linalg.solve(Ga, c[active] - lam_j[active] * s)
    except np.linalg.LinAlgError:
        return beta
    pen = lam_j[active] > 0
    if np.any(np.sign(sol[pen]) != s[pen]):
        return beta
    cand = np.zeros_like(beta)
    cand[active] = sol
    g = G @ cand - c
    inactive = ~active
    if np.any(np.abs(g[inactive]) > lam_j[inactive] + 1e-12):
        return beta
    return cand


def _fit_gaussian(problem: GlmProblem, beta0, tol, max_iter):
    n = problem.n
    X, w = problem.X, problem.weights
    Xw = X * w[:, None]
    G = X.T @ Xw / n
    c = Xw.T @ (problem.y - problem.offset) / n
    lam_j = problem.lam * problem.penalty_factors()
    beta = np.zeros(problem.p) if beta0 is None else np.array(beta0, dtype=float)
    r0 = problem.y - problem.offset
    const = float(np.dot(w, r0 * r0)) / (2.0 * n)
    history = [objective(problem, beta)]
    sweeps, converged = _cd_quadratic(G, c, lam_j, beta, tol, max_iter, history, const)
    if converged:
        polished = _polish_quadratic(G, c, lam_j, beta)
        f_pol = objective(problem, polished)
        if f_pol <= history[-1] + 1e-15:
            beta = polished
            history.append(f_pol)
    return beta, converged, sweeps, history


def _fit_binomial(problem: GlmProblem, beta0, tol, max_iter):
    n = problem.n
    X, w, y, o = problem.X, problem.weights, problem.y, problem.offset
    lam_j = problem.lam * problem.penalty_factors()
    beta = np.zeros(problem.p) if beta0 is None else np.array(beta0, dtype=float)
    f = objective(problem, beta)
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = o + X @ beta
        mu = expit(eta)
        v = np.maximum(mu * (1.0 - mu), 1e-10)
        z = eta - o + (y - mu) / v  # working response for X beta
        ww = w * v
        Xw = X * ww[:, None]
        G = Xw.T @ X / n
        c = Xw.T @ z / n
        cand = beta.copy()
        _cd_quadratic(G, c, lam_j, cand, tol * 0.1, _MAX_INNER)
        step = cand - beta
        t = 1.0
        f_new = objective(problem, beta + step)
        while f_new > f + 1e-13 and t > 1e-10:
            t *= 0.5
            f_new = objective(problem, beta + t * step)
        if f_new > f + 1e-13:
            converged = float(np.abs(step).max(initial=0.0)) < tol
            break
        delta = t * step
        beta = beta + delta
        f = f_new
        history.append(f)
        if float(np.abs(delta).max(initial=0.0)) < tol:
            converged = True
            break
        # Saturated data (e.g. all outcomes 1 along an unpenalized direction) has no
        # finite minimizer; stop once the objective stalls at a stationary point.
        if history[-2] - f <= 1e-12 * (1.0 + abs(f)) and kkt_violation(problem, beta) <= _KKT_STALL:
            converged = True
            break
    return beta, converged, it, history


def fit_lasso(problem: GlmProblem, *, beta0=None, tol: float | None = None,
              max_iter: int = MAX_OUTER) -> PenalizedFit:
    """Solve the penalized problem; ``converged`` is False if ``max_iter`` was hit."""
    if problem.family == "gaussian":
        tol = GAUSSIAN_TOL if tol is None else tol
        beta, conv, its, hist = _fit_gaussian(problem, beta0, tol, max_iter)
    else:
        tol = BINOMIAL_TOL if tol is None else tol
        beta, conv, its, hist = _fit_binomial(problem, beta0, tol, max_iter)
    return PenalizedFit(
        coefficients=beta,
        family=problem.family,
        lam=problem.lam,
        converged=conv,
        iterations=its,
        final_objective=hist[-1],
        kkt_max_violation=kkt_violation(problem, beta),
        objective_history=hist,
    )


def predict_linear(fit: PenalizedFit, X, offset=None) -> np.ndarray:
    """``offset + X beta`` for gaussian fits, ``expit`` of it for binomial fits."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if fit.coefficients.shape[0] == 1 else X[None, :]
    if X.shape[1] != fit.coefficients.shape[0]:
        raise DomainError(f"X has {X.shape[1]} columns, fit has {fit.coefficients.shape[0]}")
    eta = X @ fit.coefficients
    if offset is not None:
        offset = np.asarray(offset, dtype=float).reshape(-1)
        if offset.shape[0] != X.shape[0]:
            raise DomainError("offset length does not match X")
        eta = eta + offset
    return link_inverse(eta, fit.family)


def lambda_grid(problem: GlmProblem, n_lambda: int = 20, ratio: float = 1e-3) -> np.ndarray:
    """Decreasing log-spaced grid from ``lambda_max`` down to ``ratio * lambda_max``."""
    lmax = lambda_max(problem)
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, lmax * ratio, n_lambda)


def fit_path(problem: GlmProblem, lams) -> list[PenalizedFit]:
    """Warm-started fits along a decreasing sequence of penalties."""
    fits = []
    beta = None
    for lam in lams:
        fit = fit_lasso(problem.with_lam(lam), beta0=beta)
        fits.append(fit)
        beta = fit.coefficients
    return fits


def _deviance(family: Family, y, mu, w) -> float:
    if family == "gaussian":
        return float(np.dot(w, (y - mu) ** 2)) / max(float(w.sum()), 1e-300)
    mu = np.clip(mu, 1e-12, 1 - 1e-12)
    ll = y * np.log(mu) + (1 - y) * np.log1p(-mu)
    return float(-np.dot(w, ll)) / max(float(w.sum()), 1e-300)


def fit_lasso_cv(problem: GlmProblem, *, n_lambda: int = 20, n_folds: int = 5,
                 rng: np.random.Generator | int | None = 0) -> tuple[PenalizedFit, dict]:
    """Choose the penalty by K-fold cross-validated weighted deviance, then refit."""
    lams = lambda_grid(problem, n_lambda)
    rng = np.random.default_rng(rng)
    rows = np.flatnonzero(problem.weights > 0)
    n_folds = max(2, min(n_folds, rows.shape[0]))
    folds = np.empty(problem.n, dtype=int)
    folds[:] = -1
    perm = rng.permutation(rows)
    folds[perm] = np.arange(rows.shape[0]) % n_folds
    cv_loss = np.zeros((n_folds, lams.shape[0]))
    for k in range(n_folds):
        tr = folds != k
        te = folds == k
        if not np.any(problem.weights[tr] > 0):
            continue
        sub = GlmProblem(problem.X[tr], problem.y[tr], problem.weights[tr], problem.offset[tr],
                         problem.family, 0.0, problem.penalize_intercept_term)
        for i, fit in enumerate(fit_path(sub, lams)):
            mu = predict_linear(fit, problem.X[te], problem.offset[te])
            cv_loss[k, i] = _deviance(problem.family, problem.y[te], mu, problem.weights[te])
    mean_loss = cv_loss.mean(axis=0)
    best = int(np.argmin(mean_loss))
    path = fit_path(problem, lams[: best + 1])
    info = {"lambdas": lams, "cv_loss": mean_loss, "best_index": best, "lam": float(lams[best])}
    return path[-1], info
