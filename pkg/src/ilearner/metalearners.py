"""Meta-learners for E(Y^1 | Z) with cross-fitted nuisances.

Five learners share one final stage, a lasso on the cosine dictionary over
``Z``; they differ in the regression target and rows:

=============  ===========================================  ===========
kind           target                                       rows
=============  ===========================================  ===========
naive          Y                                            treated
ipw            Y, weights 1/g                               treated
imputation     A Y + (1 - A) Q                              all
dr             A/g (Y - Q) + Q                              all
i_learner      A Y + (1 - A) Q*  (Q* targeted)              all
=============  ===========================================  ===========
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ILearnerError, InsufficientSupportError
from .glm import GlmProblem, PenalizedFit, fit_lasso, fit_lasso_cv, predict_linear
from .nuisance import (DEFAULT_CLIP, NuisanceLearnerSpec, clip_propensity, fit_outcome_regression,
                       fit_propensity)
from .sieve import SieveDictionary, build_dictionary
from .targeting import TargetingConfig, TargetingResult, apply_update, target_q

log = logging.getLogger(__name__)

KINDS = ("naive", "ipw", "imputation", "dr", "i_learner")
MetaLearnerKind = Literal["naive", "ipw", "imputation", "dr", "i_learner"]
_NEEDS_NUISANCE = {"ipw": ("g",), "imputation": ("q",), "dr": ("g", "q"), "i_learner": ("g", "q")}


@dataclass
class Dataset:
    L: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    z_columns: tuple[int, ...]
    names: tuple[str, ...] | None = None
    outcome_family: Literal["gaussian", "binomial"] = "gaussian"

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        if self.L.ndim != 2:
            raise DomainError("L must be a matrix")
        self.A = np.asarray(self.A, dtype=float).reshape(-1)
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if not self.L.shape[0] == self.A.shape[0] == self.Y.shape[0]:
            raise DomainError("L, A and Y have different numbers of rows")
        if not np.all((self.A == 0) | (self.A == 1)):
            raise DomainError("treatment must be coded 0/1")
        self.z_columns = tuple(int(j) for j in self.z_columns)
        if not self.z_columns or any(j < 0 or j >= self.L.shape[1] for j in self.z_columns):
            raise DomainError("z_columns must index columns of L")
        if self.outcome_family == "binomial" and not np.all((self.Y == 0) | (self.Y == 1)):
            raise DomainError("binomial outcomes must be coded 0/1")

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def Z(self) -> np.ndarray:
        return self.L[:, list(self.z_columns)]

    @property
    def z_names(self):
        if self.names is None:
            return None
        return tuple(self.names[j] for j in self.z_columns)


def flip_treatment(dataset: Dataset) -> Dataset:
    """Swap the arms so every learner targets E(Y^0 | Z)."""
    return replace(dataset, A=1.0 - dataset.A)


@dataclass(frozen=True)
class CrossFitPlan:
    n: int
    K: int
    assignment: np.ndarray
    seed: int

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)


def make_crossfit_plan(n: int, K: int = 5, seed: int = 0) -> CrossFitPlan:
    if K < 2:
        raise DomainError("need at least two folds")
    if n < 2 * K:
        raise DomainError(f"n={n} is too small for {K} folds (need n >= 2K)")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    assignment[rng.permutation(n)] = np.arange(n) % K
    return CrossFitPlan(n, K, assignment, seed)


def impute_outcomes(A, Y, q) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    q = np.asarray(q, dtype=float)
    if not A.shape == Y.shape == q.shape:
        raise DomainError("A, Y and q have mismatched shapes")
    return np.where(A == 1, Y, q)


def dr_pseudo_outcome(A, Y, g_hat, q_hat) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    g = np.asarray(g_hat, dtype=float)
    q = np.asarray(q_hat, dtype=float)
    if not A.shape == Y.shape == g.shape == q.shape:
        raise DomainError("A, Y, g and q have mismatched shapes")
    if np.any(g <= 0) or np.any(g > 1):
        raise DomainError("propensity predictions must lie in (0, 1]")
    return np.where(A == 1, (Y - q) / g, 0.0) + q


@dataclass(frozen=True)
class FinalFitConfig:
    """Final-stage sieve: ``n_basis`` dictionary terms, penalty by CV unless ``lam`` is set.

    ``family="auto"`` fits a logistic final stage for the imputation-type
    learners on binary outcomes and a gaussian one everywhere else.
    """

    n_basis: int = 10
    interaction_cap: int = 2
    family: Literal["auto", "gaussian", "binomial"] = "auto"
    lam: float | None = None
    n_lambda: int = 20
    cv_folds: int = 5

    def __post_init__(self):
        if self.n_basis < 1 or self.interaction_cap < 1:
            raise ConfigError("n_basis and interaction_cap must be positive")
        if self.family not in ("auto", "gaussian", "binomial"):
            raise ConfigError(f"unknown final family {self.family!r}")

    def resolve_family(self, kind: str, outcome_family: str) -> str:
        if self.family != "auto":
            if self.family == "binomial" and kind not in ("imputation", "i_learner"):
                raise ConfigError(f"{kind} targets are not confined to [0, 1]; use a gaussian final stage")
            return self.family
        if outcome_family == "binomial" and kind in ("imputation", "i_learner"):
            return "binomial"
        return "gaussian"


@dataclass(frozen=True)
class NuisanceConfig:
    propensity: object = NuisanceLearnerSpec()
    outcome: object = NuisanceLearnerSpec()
    clip: tuple[float, float] = DEFAULT_CLIP
    min_n: int = 50
    min_treated: int = 25


def build_z_dictionary(dataset: Dataset, config: FinalFitConfig) -> SieveDictionary:
    dz = len(dataset.z_columns)
    return build_dictionary(dz, config.n_basis, min(config.interaction_cap, dz)).fit(
        dataset.Z, dataset.z_names)


@dataclass
class SieveModel:
    dictionary: SieveDictionary
    coefficients: np.ndarray
    family: str
    lam: float

    def predict(self, Z) -> np.ndarray:
        B = self.dictionary.featurize(Z)
        return predict_linear(
            PenalizedFit(self.coefficients, self.family, self.lam, True, 0, 0.0, 0.0), B)


@dataclass
class FoldNuisance:
    fold: int
    train_index: np.ndarray
    test_index: np.ndarray
    g_raw: np.ndarray
    g: np.ndarray
    q0: np.ndarray
    q_star: np.ndarray | None = None
    targeting: TargetingResult | None = None

    def summary(self) -> dict:
        out = {
            "fold": self.fold,
            "n_train": int(self.train_index.size),
            "n_test": int(self.test_index.size),
            "propensity_raw": _summ(self.g_raw),
            "propensity_clipped": _summ(self.g),
        }
        if self.targeting is not None:
            t = self.targeting
            out["targeting"] = {
                "lambda": t.lambda_used,
                "max_abs_term_before": float(np.abs(t.targeting_term_before).max()),
                "max_abs_term_after": float(np.abs(t.targeting_term_after).max()),
                "n_nonzero_epsilon": int(np.count_nonzero(t.epsilon)),
            }
        return out


def _summ(x) -> dict:
    x = np.asarray(x)
    if x.size == 0:
        return {"min": None, "mean": None, "max": None}
    return {"min": float(x.min()), "mean": float(x.mean()), "max": float(x.max())}


@dataclass
class CrossFitNuisances:
    """Out-of-fold nuisance predictions for every row, plus per-fold records."""

    g: np.ndarray
    g_raw: np.ndarray
    q0: np.ndarray
    q_star: np.ndarray | None
    folds: list[FoldNuisance]

    def provenance(self) -> np.ndarray:
        """Fold whose training complement produced each row's predictions."""
        out = np.empty(self.g.shape[0], dtype=int)
        for f in self.folds:
            out[f.test_index] = f.fold
        return out


def _fold_seed(seed: int, k: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, k, stream]).generate_state(1)[0])


def crossfit_nuisances(dataset: Dataset, plan: CrossFitPlan, nuisance: NuisanceConfig,
                       *, need_g: bool = True, need_q: bool = True,
                       targeting: TargetingConfig | None = None,
                       dictionary: SieveDictionary | None = None) -> CrossFitNuisances:
    """Fit nuisances on each training complement and predict on the held-out fold.

    When ``targeting`` is given, the outcome regression is also targeted on the
    training complement (using in-sample propensity and outcome predictions
    there) and the fitted update is applied to the held-out fold.
    """
    if plan.n != dataset.n:
        raise DomainError("cross-fit plan does not match the dataset size")
    n = dataset.n
    L, A, Y = dataset.L, dataset.A, dataset.Y
    g_raw = np.full(n, np.nan)
    g = np.full(n, np.nan)
    q0 = np.full(n, np.nan)
    q_star = np.full(n, np.nan) if targeting is not None else None
    if targeting is not None:
        need_g = need_q = True
        if dictionary is None:
            raise ConfigError("targeting needs the Z dictionary")
        B_all = dictionary.featurize(dataset.Z)
    folds = []
    lo, hi = nuisance.clip
    for k in range(plan.K):
        tr, te = plan.train_index(k), plan.test_index(k)
        rec = FoldNuisance(k, tr, te, np.full(te.size, np.nan), np.full(te.size, np.nan),
                           np.full(te.size, np.nan))
        try:
            if need_g:
                gm = fit_propensity(nuisance.propensity, L[tr], A[tr],
                                    seed=_fold_seed(plan.seed, k, 1), min_n=nuisance.min_n)
                rec.g_raw = gm.predict(L[te])
                rec.g = clip_propensity(rec.g_raw, lo, hi)
            if need_q:
                qm = fit_outcome_regression(nuisance.outcome, L[tr], A[tr], Y[tr],
                                            seed=_fold_seed(plan.seed, k, 2),
                                            min_treated=nuisance.min_treated,
                                            family=dataset.outcome_family)
                rec.q0 = qm.predict(L[te])
            if targeting is not None:
                g_tr = clip_propensity(gm.predict(L[tr]), lo, hi)
                q_tr = qm.predict(L[tr])
                res = target_q(A[tr], Y[tr], g_tr, q_tr, B_all[tr], targeting,
                               seed=_fold_seed(plan.seed, k, 3))
                rec.targeting = res
                rec.q_star = res.update(rec.q0, rec.g, B_all[te])
        except ILearnerError as exc:
            exc.fold = k
            exc.args = (f"fold {k}: {exc}",) + exc.args[1:]
            raise
        g_raw[te], g[te], q0[te] = rec.g_raw, rec.g, rec.q0
        if q_star is not None:
            q_star[te] = rec.q_star
        folds.append(rec)
    return CrossFitNuisances(g, g_raw, q0, q_star, folds)


def fit_sieve(dictionary: SieveDictionary, Z, y, *, weights=None, family="gaussian",
              config: FinalFitConfig = FinalFitConfig(), seed: int = 0) -> tuple[SieveModel, dict]:
    B = dictionary.featurize(Z)
    problem = GlmProblem(B, y, weights=weights, family=family)
    if config.lam is None:
        fit, info = fit_lasso_cv(problem, n_lambda=config.n_lambda, n_folds=config.cv_folds, rng=seed)
    else:
        fit = fit_lasso(problem.with_lam(config.lam))
        info = {"lam": config.lam}
    info = {"lam": float(info["lam"]), "converged": fit.converged,
            "kkt_max_violation": fit.kkt_max_violation}
    return SieveModel(dictionary, fit.coefficients, family, fit.lam), info


@dataclass
class LearnerResult:
    kind: str
    m_hat: SieveModel
    targets: np.ndarray
    rows: np.ndarray
    weights: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def imputed_outcomes(self) -> np.ndarray | None:
        return self.targets if self.kind in ("imputation", "i_learner") else None

    def predict(self, Z) -> np.ndarray:
        return predict(self, Z)


def predict(result: LearnerResult, Z_new) -> np.ndarray:
    return result.m_hat.predict(Z_new)


def fit_metalearner(kind: MetaLearnerKind, dataset: Dataset, *,
                    nuisance: NuisanceConfig = NuisanceConfig(),
                    targeting: TargetingConfig | None = None,
                    final: FinalFitConfig = FinalFitConfig(),
                    crossfit: CrossFitPlan | None = None,
                    nuisances: CrossFitNuisances | None = None,
                    dictionary: SieveDictionary | None = None,
                    seed: int = 0) -> LearnerResult:
    """Fit one meta-learner.

    Precomputed ``nuisances`` (from :func:`crossfit_nuisances` with targeting
    for the i-learner) may be passed to share them between learners.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown learner {kind!r}; choose from {KINDS}")
    A, Y = dataset.A, dataset.Y
    if dictionary is None:
        dictionary = build_z_dictionary(dataset, final)
    if targeting is None:
        targeting = TargetingConfig(link="logit" if dataset.outcome_family == "binomial" else "identity")
    if kind != "naive" and nuisances is None:
        if crossfit is None:
            crossfit = make_crossfit_plan(dataset.n, 5, seed)
        need = _NEEDS_NUISANCE[kind]
        nuisances = crossfit_nuisances(
            dataset, crossfit, nuisance, need_g="g" in need, need_q="q" in need,
            targeting=targeting if kind == "i_learner" else None, dictionary=dictionary)
    if kind == "i_learner" and (nuisances is None or nuisances.q_star is None):
        raise ConfigError("i_learner needs targeted nuisances")
    treated = A == 1
    if kind in ("naive", "ipw") and not np.any(treated):
        raise InsufficientSupportError("no treated observations")

    weights = None
    if kind == "naive":
        rows = np.flatnonzero(treated)
        targets = Y[rows]
    elif kind == "ipw":
        rows = np.flatnonzero(treated)
        targets = Y[rows]
        weights = 1.0 / nuisances.g[rows]
    elif kind == "imputation":
        rows = np.arange(dataset.n)
        targets = impute_outcomes(A, Y, nuisances.q0)
    elif kind == "dr":
        rows = np.arange(dataset.n)
        targets = dr_pseudo_outcome(A, Y, nuisances.g, nuisances.q0)
    else:
        rows = np.arange(dataset.n)
        targets = impute_outcomes(A, Y, nuisances.q_star)

    family = final.resolve_family(kind, dataset.outcome_family)
    if family == "binomial":
        targets = np.clip(targets, 0.0, 1.0)
    model, info = fit_sieve(dictionary, dataset.Z[rows], targets, weights=weights, family=family,
                            config=final, seed=_fold_seed(seed, 99, 0))
    fitted = model.predict(dataset.Z)
    diagnostics = {
        "kind": kind,
        "final": info,
        "final_family": family,
        "n_rows": int(rows.size),
    }
    if dataset.outcome_family == "binomial":
        diagnostics["fraction_targets_outside_unit"] = float(np.mean((targets < 0) | (targets > 1)))
        diagnostics["fraction_fitted_outside_unit"] = float(np.mean((fitted < 0) | (fitted > 1)))
    if nuisances is not None:
        diagnostics["folds"] = [f.summary() for f in nuisances.folds]
    return LearnerResult(kind, model, targets, rows, weights, diagnostics)


def fit_all(dataset: Dataset, kinds: Sequence[str] = KINDS, *,
            nuisance: NuisanceConfig = NuisanceConfig(),
            targeting: TargetingConfig | None = None,
            final: FinalFitConfig = FinalFitConfig(),
            crossfit: CrossFitPlan | None = None, seed: int = 0) -> dict[str, LearnerResult]:
    """Fit several learners sharing one set of cross-fitted nuisances."""
    kinds = list(kinds)
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown learner {k!r}; choose from {KINDS}")
    dictionary = build_z_dictionary(dataset, final)
    if targeting is None:
        targeting = TargetingConfig(link="logit" if dataset.outcome_family == "binomial" else "identity")
    if crossfit is None:
        crossfit = make_crossfit_plan(dataset.n, 5, seed)
    needs = set()
    for k in kinds:
        needs.update(_NEEDS_NUISANCE.get(k, ()))
    nuis = None
    if needs:
        nuis = crossfit_nuisances(dataset, crossfit, nuisance, need_g="g" in needs,
                                  need_q="q" in needs,
                                  targeting=targeting if "i_learner" in kinds else None,
                                  dictionary=dictionary)
    return {k: fit_metalearner(k, dataset, nuisance=nuisance, targeting=targeting, final=final,
                               crossfit=crossfit, nuisances=nuis, dictionary=dictionary, seed=seed)
            for k in kinds}


def evaluate_dr_loss(m_coeffs, dictionary: SieveDictionary, A, Y, g_hat, q_hat, Z) -> float:
    """Doubly robust empirical counterfactual squared error of a linear sieve fit."""
    m = dictionary.featurize(Z) @ np.asarray(m_coeffs, dtype=float)
    A = np.asarray(A, dtype=float)
    g = np.asarray(g_hat, dtype=float)
    q = np.asarray(q_hat, dtype=float)
    Y = np.where(A == 1, np.asarray(Y, dtype=float), 0.0)
    if np.any(g <= 0) or np.any(g > 1):
        raise DomainError("propensity predictions must lie in (0, 1]")
    w = A / g
    return float(np.mean(w * (Y - m) ** 2 + (1.0 - w) * (q - m) ** 2))


def evaluate_imputation_loss(m_coeffs, dictionary: SieveDictionary, A, Y, q_hat, Z) -> float:
    m = dictionary.featurize(Z) @ np.asarray(m_coeffs, dtype=float)
    return float(np.mean((impute_outcomes(A, np.where(np.asarray(A) == 1, Y, 0.0), q_hat) - m) ** 2))
