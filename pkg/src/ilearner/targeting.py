"""Targeted update of the treated-arm outcome regression.

The initial predictions ``q0`` are moved along the submodel

    h(q) = h(q0) + eps' b(Z) (1 - g) / g

with ``h`` the identity or logit link. ``eps`` is an l1-penalized (quasi-)
likelihood fit on the treated rows, normalized by the full sample size. At the
solution the lasso stationarity conditions bound every coordinate of

    t_j = (1/n) sum_i A_i (1 - g_i) / g_i (Y_i - q_i) b_j(Z_i)

by the penalty, which is what makes the plain imputation loss behave like the
doubly robust one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, ConvergenceError, DomainError, InsufficientSupportError
from .glm import GlmProblem, fit_lasso, fit_lasso_cv

Q_CLAMP = 1e-6
JN_HARD_CAP = 5000


@dataclass(frozen=True)
class TargetingConfig:
    link: Literal["identity", "logit"] = "identity"
    lambda_constant: float = 1.0
    lambda_cv: bool = False
    max_terms_cap: int = JN_HARD_CAP

    def __post_init__(self):
        if self.link not in ("identity", "logit"):
            raise ConfigError(f"unknown targeting link {self.link!r}")
        if not self.lambda_constant > 0:
            raise ConfigError("lambda_constant must be positive")


@dataclass
class TargetingResult:
    epsilon: np.ndarray
    q_targeted: np.ndarray
    targeting_term_before: np.ndarray
    targeting_term_after: np.ndarray
    lambda_used: float
    link: str
    converged: bool = True

    def update(self, q0, g_hat, features) -> np.ndarray:
        """Apply the fitted submodel to new rows (e.g. a held-out fold)."""
        return apply_update(q0, g_hat, features, self.epsilon, self.link)


def default_Jn(n: int, d: int, D_prime: int, C_of_D: float = 0.5, hard_cap: int = JN_HARD_CAP) -> int:
    """``round(C d^D' n^(1/3) log(n)^(D'-1))`` clipped to ``[1, hard_cap]``."""
    if n < 2:
        raise DomainError("n must be at least 2")
    value = C_of_D * d ** D_prime * n ** (1.0 / 3.0) * math.log(n) ** (D_prime - 1)
    return int(max(1, min(hard_cap, round(value))))


def targeting_lambda(n: int, J_n: int, constant: float = 1.0) -> float:
    return constant * math.sqrt(math.log(J_n) / n)


def _check_g(g) -> np.ndarray:
    g = np.asarray(g, dtype=float).reshape(-1)
    if np.any(g <= 0) or np.any(g > 1):
        raise DomainError("propensity predictions must lie in (0, 1]")
    return g


def clever_covariate(g_hat, features) -> np.ndarray:
    """Submodel design ``b_j(Z_i) (1 - g_i) / g_i``."""
    g = _check_g(g_hat)
    B = np.asarray(features, dtype=float)
    if B.ndim != 2 or B.shape[0] != g.shape[0]:
        raise DomainError("features and propensities have mismatched shapes")
    return B * ((1.0 - g) / g)[:, None]


def compute_targeting_term(A, Y, g_hat, q, features) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(-1)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    X = clever_covariate(g_hat, features)
    if not A.shape[0] == Y.shape[0] == q.shape[0] == X.shape[0]:
        raise DomainError("A, Y, g, q and features have mismatched lengths")
    # untreated rows may carry NaN outcomes
    resid = np.where(A == 1, Y - q, 0.0)
    return X.T @ resid / A.shape[0]


def _clamp_q(q0) -> np.ndarray:
    return np.clip(np.asarray(q0, dtype=float), Q_CLAMP, 1.0 - Q_CLAMP)


def apply_update(q0, g_hat, features, epsilon, link: str) -> np.ndarray:
    shift = clever_covariate(g_hat, features) @ np.asarray(epsilon, dtype=float)
    if link == "identity":
        return np.asarray(q0, dtype=float) + shift
    return expit(logit(_clamp_q(q0)) + shift)


def target_q(A, Y, g_hat, q0, features, config: TargetingConfig = TargetingConfig(), *,
             seed: int = 0) -> TargetingResult:
    """Fit the penalized submodel on these rows and return the targeted predictions.

    ``features`` is the dictionary design ``b(Z)`` for the same rows (first column
    the constant term, which is left unpenalized).
    """
    A = np.asarray(A, dtype=float).reshape(-1)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    q0 = np.asarray(q0, dtype=float).reshape(-1)
    X = clever_covariate(g_hat, features)
    n, J = X.shape
    if J > config.max_terms_cap:
        raise ConfigError(f"J_n={J} exceeds the hard cap {config.max_terms_cap}")
    if not np.any(A == 1):
        raise InsufficientSupportError("targeting needs at least one treated row")
    y = np.where(A == 1, Y, 0.0)
    lam = targeting_lambda(n, J, config.lambda_constant)
    if config.link == "identity":
        family, offset = "gaussian", q0
        q_start = q0
    else:
        family, offset = "binomial", logit(_clamp_q(q0))
        q_start = _clamp_q(q0)
        if np.any((y[A == 1] < 0) | (y[A == 1] > 1)):
            raise DomainError("logit targeting needs outcomes in [0, 1]")
    problem = GlmProblem(X, y, weights=A, offset=offset, family=family, lam=lam)
    if config.lambda_cv:
        fit, info = fit_lasso_cv(problem, rng=seed)
        lam = info["lam"]
    else:
        fit = fit_lasso(problem)
    if not fit.converged:
        raise ConvergenceError("targeting lasso did not converge",
                               {"iterations": fit.iterations, "kkt": fit.kkt_max_violation})
    eps = fit.coefficients
    if config.link == "identity":
        q_star = q0 + X @ eps
    else:
        q_star = expit(offset + X @ eps)
    return TargetingResult(
        epsilon=eps,
        q_targeted=q_star,
        targeting_term_before=compute_targeting_term(A, Y, g_hat, q_start, features),
        targeting_term_after=compute_targeting_term(A, Y, g_hat, q_star, features),
        lambda_used=lam,
        link=config.link,
        converged=fit.converged,
    )
