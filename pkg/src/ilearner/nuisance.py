"""Propensity score and treated-arm outcome regression learners.

Two built-in learners are available through :class:`NuisanceLearnerSpec`:

* ``sieve_lasso``: l1-penalized GLM on a cosine dictionary over all covariates,
  with the penalty chosen by cross-validation;
* ``tree_ensemble``: gradient-boosted shallow trees (scikit-learn's histogram
  gradient boosting), squared-error or logistic loss.

Any object with a ``make(family, seed)`` method returning an estimator with
``fit(X, y)`` and ``predict(X)`` can be used in place of a spec. For the
binomial family ``predict`` must return probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Protocol

import numpy as np
from sklearn.ensemble import HistGradientBoostingClassifier, HistGradientBoostingRegressor

from .errors import ConfigError, DegenerateTreatmentError, DomainError, InsufficientSupportError
from .glm import GlmProblem, fit_lasso, fit_lasso_cv, predict_linear
from .sieve import build_dictionary

DEFAULT_CLIP = (0.01, 0.99)


class LearnerFactory(Protocol):
    def make(self, family: str, seed: int): ...


@dataclass(frozen=True)
class NuisanceLearnerSpec:
    kind: Literal["sieve_lasso", "tree_ensemble"] = "tree_ensemble"
    outcome_family: Literal["gaussian", "binomial"] = "gaussian"
    # sieve_lasso
    max_terms: int = 30
    interaction_cap: int = 2
    n_lambda: int = 20
    cv_folds: int = 5
    lam: float | None = None  # fixed penalty instead of cross-validation
    # tree_ensemble
    n_trees: int = 200
    max_depth: int = 1
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    # loss for binary outcome regressions; the propensity always uses logistic loss
    outcome_loss: Literal["squared", "logistic"] = "squared"

    def __post_init__(self):
        if self.kind not in ("sieve_lasso", "tree_ensemble"):
            raise ConfigError(f"unknown nuisance learner kind {self.kind!r}")
        if self.outcome_family not in ("gaussian", "binomial"):
            raise ConfigError(f"unknown outcome family {self.outcome_family!r}")
        for name in ("max_terms", "interaction_cap", "n_lambda", "cv_folds", "n_trees",
                     "max_depth", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_depth > 3:
            raise ConfigError("tree depth is limited to 3")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError("lam must be non-negative")
        if self.outcome_loss not in ("squared", "logistic"):
            raise ConfigError(f"unknown outcome loss {self.outcome_loss!r}")

    def make(self, family: str, seed: int):
        if self.kind == "sieve_lasso":
            return SieveLassoLearner(family, self.max_terms, self.interaction_cap,
                                     self.n_lambda, self.cv_folds, seed, self.lam)
        return TreeEnsembleLearner(family, self.n_trees, self.max_depth, self.learning_rate,
                                   self.min_samples_leaf, seed, self.outcome_loss)

    def make_propensity(self, seed: int):
        if self.kind == "tree_ensemble":
            return TreeEnsembleLearner("binomial", self.n_trees, self.max_depth,
                                       self.learning_rate, self.min_samples_leaf, seed, "logistic")
        return self.make("binomial", seed)

    def with_family(self, family: str) -> "NuisanceLearnerSpec":
        return replace(self, outcome_family=family)


class SieveLassoLearner:
    """Cross-validated lasso GLM on a cosine dictionary over the full covariate vector."""

    def __init__(self, family, max_terms=30, interaction_cap=2, n_lambda=20, cv_folds=5, seed=0,
                 lam=None):
        self.family = family
        self.lam = lam
        self.max_terms = max_terms
        self.interaction_cap = interaction_cap
        self.n_lambda = n_lambda
        self.cv_folds = cv_folds
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        d = X.shape[1]
        dictionary = build_dictionary(d, self.max_terms, min(self.interaction_cap, d))
        self.dictionary_ = dictionary.fit(X)
        problem = GlmProblem(self.dictionary_.featurize(X), y, family=self.family)
        if self.lam is not None:
            self.fit_ = fit_lasso(problem.with_lam(self.lam))
        else:
            self.fit_, _ = fit_lasso_cv(problem, n_lambda=self.n_lambda, n_folds=self.cv_folds,
                                        rng=self.seed)
        return self

    def predict(self, X):
        return predict_linear(self.fit_, self.dictionary_.featurize(X))


class TreeEnsembleLearner:
    """Gradient-boosted trees; probabilities for the binomial family.

    With ``loss="squared"`` a binary target is fitted by least-squares boosting and
    the predictions are clamped to [0, 1].
    """

    def __init__(self, family, n_trees=200, max_depth=1, learning_rate=0.1,
                 min_samples_leaf=20, seed=0, loss="logistic"):
        self.family = family
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.loss = loss

    def fit(self, X, y):
        y = np.asarray(y, dtype=float)
        self.constant_ = None
        if np.all(y == y[0]):
            self.constant_ = float(y[0])
            return self
        kw = dict(max_iter=self.n_trees, max_depth=self.max_depth,
                  learning_rate=self.learning_rate, min_samples_leaf=self.min_samples_leaf,
                  early_stopping=False, random_state=self.seed)
        if self.family == "binomial" and self.loss == "logistic":
            self.model_ = HistGradientBoostingClassifier(**kw).fit(X, y.astype(int))
        else:
            self.model_ = HistGradientBoostingRegressor(**kw).fit(X, y)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if self.constant_ is not None:
            return np.full(X.shape[0], self.constant_)
        if self.family != "binomial":
            return self.model_.predict(X)
        if self.loss == "logistic":
            return self.model_.predict_proba(X)[:, 1]
        return np.clip(self.model_.predict(X), 0.0, 1.0)


class KnownFunction:
    """Factory for an "estimator" that ignores its training data and returns ``fn(L)``.

    Used to inject true or deliberately wrong nuisance functions.
    """

    def __init__(self, fn):
        self.fn = fn

    def make(self, family, seed):
        return _FixedEstimator(self.fn)


class _FixedEstimator:
    def __init__(self, fn):
        self.fn = fn

    def fit(self, X, y):
        return self

    def predict(self, X):
        return np.asarray(self.fn(np.asarray(X, dtype=float)), dtype=float)


def clip_propensity(g, lo: float = DEFAULT_CLIP[0], hi: float = DEFAULT_CLIP[1]) -> np.ndarray:
    if not 0.0 < lo < hi < 1.0:
        raise DomainError(f"clip bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
    return np.clip(np.asarray(g, dtype=float), lo, hi)


def _check_binary(A) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(-1)
    if not np.all((A == 0) | (A == 1)):
        raise DomainError("treatment must be coded 0/1")
    return A


class PropensityModel:
    def __init__(self, estimator):
        self.estimator = estimator

    def predict(self, L) -> np.ndarray:
        g = np.asarray(self.estimator.predict(np.asarray(L, dtype=float)), dtype=float)
        # keep predictions strictly inside (0, 1) before any clipping
        return np.clip(g, 1e-12, 1.0 - 1e-12)


class OutcomeModel:
    def __init__(self, estimator, family):
        self.estimator = estimator
        self.family = family

    def predict(self, L) -> np.ndarray:
        q = np.asarray(self.estimator.predict(np.asarray(L, dtype=float)), dtype=float)
        if self.family == "binomial":
            q = np.clip(q, 0.0, 1.0)
        return q


def fit_propensity(spec, L, A, *, seed: int = 0, min_n: int = 50) -> PropensityModel:
    """Fit P(A = 1 | L)."""
    L = np.asarray(L, dtype=float)
    A = _check_binary(A)
    if L.shape[0] != A.shape[0]:
        raise DomainError("L and A have different numbers of rows")
    if A.shape[0] < min_n:
        raise InsufficientSupportError(f"need at least {min_n} rows to fit the propensity, got {A.shape[0]}")
    if np.all(A == A[0]):
        raise DegenerateTreatmentError("treatment has a single class; propensity is not estimable")
    make = getattr(spec, "make_propensity", None)
    est = make(seed) if make is not None else spec.make("binomial", seed)
    return PropensityModel(est.fit(L, A))


def fit_outcome_regression(spec, L, A, Y, *, seed: int = 0, min_treated: int = 25,
                           family: str | None = None) -> OutcomeModel:
    """Fit E(Y | A = 1, L) on the treated rows only."""
    L = np.asarray(L, dtype=float)
    A = _check_binary(A)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if not L.shape[0] == A.shape[0] == Y.shape[0]:
        raise DomainError("L, A and Y have different numbers of rows")
    treated = A == 1
    n_treated = int(treated.sum())
    if n_treated < min_treated:
        raise InsufficientSupportError(
            f"need at least {min_treated} treated rows for the outcome regression, got {n_treated}")
    if family is None:
        family = getattr(spec, "outcome_family", "gaussian")
    est = spec.make(family, seed).fit(L[treated], Y[treated])
    return OutcomeModel(est, family)
