import math

import numpy as np
import pytest

from ilearner.errors import ConfigError, DomainError, InsufficientSupportError
from ilearner.metalearners import (Dataset, FinalFitConfig, NuisanceConfig, build_z_dictionary,
                                   crossfit_nuisances, dr_pseudo_outcome, evaluate_dr_loss,
                                   evaluate_imputation_loss, fit_all, fit_metalearner, fit_sieve,
                                   flip_treatment, impute_outcomes, make_crossfit_plan, predict)
from ilearner.nuisance import KnownFunction, NuisanceLearnerSpec
from ilearner.sieve import build_dictionary
from ilearner.simulation import Dgp, DgpSpec
from ilearner.targeting import TargetingConfig, target_q


def _toy(seed=0, n=400, binary=True):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, 3))
    g = 1 / (1 + np.exp(-(0.3 + L[:, 0])))
    A = (rng.random(n) < g).astype(float)
    p = 1 / (1 + np.exp(-(L[:, 1] + 0.5 * L[:, 2])))
    Y = (rng.random(n) < p).astype(float) if binary else L[:, 1] + rng.normal(size=n)
    return Dataset(L, A, Y, (0, 1), outcome_family="binomial" if binary else "gaussian")


FAST = NuisanceConfig(NuisanceLearnerSpec("sieve_lasso", max_terms=8),
                      NuisanceLearnerSpec("sieve_lasso", max_terms=8, outcome_family="binomial"))


# ---- cross-fit plans

def test_plan_equal_folds():
    plan = make_crossfit_plan(10, 5, seed=1)
    assert sorted(np.bincount(plan.assignment)) == [2] * 5


def test_plan_remainder_distribution():
    plan = make_crossfit_plan(11, 5, seed=1)
    assert sorted(np.bincount(plan.assignment).tolist()) == [2, 2, 2, 2, 3]


def test_plan_deterministic_and_partitioning():
    a = make_crossfit_plan(103, 5, seed=4)
    b = make_crossfit_plan(103, 5, seed=4)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    idx = np.concatenate([a.test_index(k) for k in range(5)])
    assert sorted(idx.tolist()) == list(range(103))
    for k in range(5):
        assert np.intersect1d(a.train_index(k), a.test_index(k)).size == 0


@pytest.mark.parametrize("n,K", [(9, 5), (10, 1)])
def test_plan_invalid(n, K):
    with pytest.raises(DomainError):
        make_crossfit_plan(n, K)


# ---- pseudo-outcomes and imputation

def test_pseudo_outcome_with_unit_propensity():
    A = np.array([1.0, 0.0])
    Y = np.array([0.3, 9.0])
    q = np.array([0.8, 0.6])
    np.testing.assert_allclose(dr_pseudo_outcome(A, Y, np.ones(2), q), [0.3, 0.6], rtol=0, atol=1e-15)


def test_pseudo_outcome_hand_case():
    out = dr_pseudo_outcome(np.array([1.0]), np.array([1.0]), np.array([0.1]), np.array([0.9]))
    assert out[0] == pytest.approx(1.9, abs=1e-12)


def test_pseudo_outcome_equals_q_when_residuals_vanish():
    rng = np.random.default_rng(0)
    q = rng.random(20)
    A = (rng.random(20) < 0.5).astype(float)
    np.testing.assert_allclose(dr_pseudo_outcome(A, q, rng.uniform(0.1, 1, 20), q), q, atol=1e-15)


def test_pseudo_outcome_dimension_mismatch():
    with pytest.raises(DomainError):
        dr_pseudo_outcome(np.ones(2), np.ones(2), np.ones(3), np.ones(2))


def test_imputation_cases_and_convexity():
    A = np.array([1.0, 0.0, 1.0, 0.0])
    Y = np.array([1.0, 0.0, 0.0, 1.0])
    q = np.array([0.2, 0.7, 0.4, 0.1])
    np.testing.assert_array_equal(impute_outcomes(A, Y, q), [1.0, 0.7, 0.0, 0.1])
    rng = np.random.default_rng(1)
    A = (rng.random(500) < 0.5).astype(float)
    out = impute_outcomes(A, (rng.random(500) < 0.5).astype(float), rng.random(500))
    assert out.min() >= 0 and out.max() <= 1


# ---- learners

def test_imputation_with_all_treated_equals_naive():
    d = _toy(2)
    d = Dataset(d.L, np.ones(d.n), d.Y, d.z_columns, outcome_family="gaussian")
    nc = NuisanceConfig(outcome=KnownFunction(lambda L: 1 / (1 + np.exp(-L[:, 1]))))
    a = fit_metalearner("imputation", d, nuisance=nc, seed=3)
    b = fit_metalearner("naive", d, seed=3)
    np.testing.assert_array_equal(a.targets, b.targets)
    np.testing.assert_array_equal(a.m_hat.coefficients, b.m_hat.coefficients)


def test_dr_with_unit_propensity_matches_imputation_targets():
    d = _toy(3)
    nc = NuisanceConfig(KnownFunction(lambda L: np.ones(L.shape[0])), FAST.outcome,
                        clip=(0.01, 1 - 1e-12))
    res = fit_all(d, ["imputation", "dr"], nuisance=nc, final=FinalFitConfig(family="gaussian"), seed=1)
    np.testing.assert_allclose(res["dr"].targets, res["imputation"].targets, rtol=0, atol=1e-10)


def test_naive_and_ipw_use_treated_rows_only():
    d = _toy(4)
    res = fit_all(d, ["naive", "ipw"], nuisance=FAST, seed=0)
    treated = np.flatnonzero(d.A == 1)
    for r in res.values():
        np.testing.assert_array_equal(r.rows, treated)
    w = res["ipw"].weights
    assert w.min() >= 1 / 0.99 and w.max() <= 1 / 0.01


def test_i_learner_targets_are_in_unit_interval_and_predictions_too():
    d = _toy(5)
    res = fit_all(d, ["imputation", "i_learner"], nuisance=FAST, seed=2)
    far = np.random.default_rng(0).normal(size=(200, 2)) * 10
    for r in res.values():
        assert r.m_hat.family == "binomial"
        assert r.targets.min() >= 0 and r.targets.max() <= 1
        p = r.predict(far)
        assert p.min() >= 0 and p.max() <= 1
        assert r.diagnostics["fraction_fitted_outside_unit"] == 0.0


def test_dr_targets_leave_unit_interval_on_binary_data():
    res = fit_metalearner("dr", _toy(6), nuisance=FAST, seed=0)
    assert res.diagnostics["fraction_targets_outside_unit"] > 0


def test_i_learner_and_dr_agree_with_true_nuisances_small_n():
    dgp = Dgp(DgpSpec("dgp2"))
    d = dgp.draw(200, np.random.default_rng(0))
    data = Dataset(d.L, d.A, d.Y, (0, 1), outcome_family="binomial")
    nc = NuisanceConfig(KnownFunction(dgp.propensity), KnownFunction(dgp.outcome_mean), min_n=1,
                        min_treated=1)
    lam = math.sqrt(math.log(10) / 200)
    res = fit_all(data, ["dr", "i_learner"], nuisance=nc,
                  final=FinalFitConfig(family="gaussian", lam=lam), seed=0)
    diff = np.abs(res["dr"].m_hat.coefficients - res["i_learner"].m_hat.coefficients).max()
    assert diff <= 0.05


def test_flip_treatment():
    d = Dataset(np.arange(6.0).reshape(3, 2), np.array([1.0, 0.0, 1.0]), np.zeros(3), (0,))
    f = flip_treatment(d)
    np.testing.assert_array_equal(f.A, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(flip_treatment(f).A, d.A)


def test_naive_on_flipped_data_fits_untreated_rows():
    d = _toy(7, binary=False)
    res = fit_metalearner("naive", flip_treatment(d), seed=4)
    u = d.A == 0
    dictionary = build_z_dictionary(d, FinalFitConfig())
    from ilearner.metalearners import _fold_seed
    direct, _ = fit_sieve(dictionary, d.Z[u], d.Y[u], seed=_fold_seed(4, 99, 0))
    np.testing.assert_array_equal(res.m_hat.coefficients, direct.coefficients)


def test_learners_are_deterministic():
    d = _toy(8)
    a = fit_all(d, seed=5, nuisance=FAST)
    b = fit_all(d, seed=5, nuisance=FAST)
    for k in a:
        np.testing.assert_array_equal(a[k].m_hat.coefficients, b[k].m_hat.coefficients)
        np.testing.assert_array_equal(a[k].targets, b[k].targets)


def test_tree_nuisance_learners_are_deterministic():
    d = _toy(9)
    a = fit_metalearner("i_learner", d, seed=1)
    b = fit_metalearner("i_learner", d, seed=1)
    np.testing.assert_array_equal(a.m_hat.coefficients, b.m_hat.coefficients)


class _Recorder:
    """Estimator factory that remembers which row ids it trained on and predicted."""

    def __init__(self, family):
        self.family = family
        self.log = []

    def make(self, family, seed):
        rec = self

        class Est:
            def fit(self, X, y):
                self.train = set(X[:, 0].astype(int).tolist())
                self.mean = float(np.mean(y))
                return self

            def predict(self, X):
                rec.log.append((self.train, X[:, 0].astype(int).tolist()))
                return np.full(X.shape[0], min(max(self.mean, 0.05), 0.95))
        return Est()


def test_crossfit_hygiene_with_recording_learners():
    d = _toy(10)
    L = np.column_stack([np.arange(d.n), d.L])
    data = Dataset(L, d.A, d.Y, (1, 2), outcome_family="binomial")
    gp, qp = _Recorder("binomial"), _Recorder("binomial")
    plan = make_crossfit_plan(d.n, 5, seed=0)
    nuis = crossfit_nuisances(data, plan, NuisanceConfig(gp, qp), targeting=TargetingConfig(link="logit"),
                              dictionary=build_z_dictionary(data, FinalFitConfig()))
    fold = plan.assignment
    for log in (gp.log, qp.log):
        held_out = []
        for train, predicted in log:
            train_folds = {int(fold[i]) for i in train}
            pred_folds = {int(fold[i]) for i in predicted}
            # either an in-sample pass over the training folds (for targeting) or a
            # held-out fold that contributed nothing to the model
            assert pred_folds <= train_folds or not pred_folds & train_folds
            if not pred_folds & train_folds:
                held_out.extend(predicted)
        assert sorted(held_out) == list(range(d.n))
    np.testing.assert_array_equal(nuis.provenance(), fold)


def test_fold_failure_is_tagged():
    d = _toy(11, n=120)
    nc = NuisanceConfig(FAST.propensity, FAST.outcome, min_treated=60)
    with pytest.raises(InsufficientSupportError) as info:
        fit_metalearner("imputation", d, nuisance=nc)
    assert info.value.fold == 0
    assert str(info.value).startswith("fold 0:")


def test_naive_requires_treated_rows():
    d = _toy(12)
    with pytest.raises(InsufficientSupportError):
        fit_metalearner("naive", Dataset(d.L, np.zeros(d.n), d.Y, d.z_columns))


def test_configuration_errors():
    d = _toy(13)
    with pytest.raises(ConfigError):
        fit_metalearner("s_learner", d)
    with pytest.raises(ConfigError):
        fit_metalearner("dr", d, nuisance=FAST, final=FinalFitConfig(family="binomial"))


# ---- losses

def test_dr_loss_hand_case():
    d = build_dictionary(1, 1, 1).fit(np.array([[0.0], [1.0]]))
    loss = evaluate_dr_loss([0.5], d, np.array([1.0, 0.0]), np.array([1.0, np.nan]),
                            np.array([0.5, 0.5]), np.array([0.8, 0.3]), np.array([[0.0], [1.0]]))
    assert loss == pytest.approx(0.225, abs=1e-12)


def test_dr_loss_with_unit_propensity_is_imputation_loss():
    rng = np.random.default_rng(14)
    Z = rng.normal(size=(50, 2))
    d = build_dictionary(2, 5, 2).fit(Z)
    A = (rng.random(50) < 0.5).astype(float)
    Y, q, gamma = rng.random(50), rng.random(50), rng.normal(size=5)
    assert evaluate_dr_loss(gamma, d, A, Y, np.ones(50), q, Z) == pytest.approx(
        evaluate_imputation_loss(gamma, d, A, Y, q, Z), abs=1e-12)


def test_dr_loss_zero_at_perfect_fit():
    Z = np.linspace(0, 1, 20)[:, None]
    d = build_dictionary(1, 2, 1).fit(Z)
    m = d.featurize(Z) @ np.array([0.4, 0.1])
    A = np.tile([1.0, 0.0], 10)
    assert evaluate_dr_loss([0.4, 0.1], d, A, m, np.full(20, 0.3), m, Z) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gap_equals_shrunken_targeting_term(seed):
    dgp = Dgp(DgpSpec("dgp2"))
    s = dgp.draw(1500, np.random.default_rng(seed))
    Z = s.L[:, :2]
    dictionary = build_dictionary(2, 10, 2).fit(Z)
    B = dictionary.featurize(Z)
    g = np.clip(s.true_pi, 0.01, 0.99)
    q0 = np.full(s.A.shape, s.Y[s.A == 1].mean())
    res = target_q(s.A, s.Y, g, q0, B)
    q = res.q_targeted
    gamma, _ = fit_sieve(dictionary, Z, impute_outcomes(s.A, s.Y, q), seed=seed)
    gamma = gamma.coefficients

    def gap(c):
        return (evaluate_dr_loss(c, dictionary, s.A, s.Y, g, q, Z)
                - evaluate_imputation_loss(c, dictionary, s.A, s.Y, q, Z))

    varying = gap(gamma) - gap(np.zeros_like(gamma))
    t = res.targeting_term_after
    assert varying == pytest.approx(-2 * gamma @ t, abs=1e-10)
    assert abs(varying) <= 2 * res.lambda_used * np.abs(gamma).sum() + 1e-8


# ---- prediction

def test_intercept_only_model_predicts_constant():
    Z = np.random.default_rng(15).normal(size=(30, 2))
    d = build_dictionary(2, 4, 2).fit(Z)
    from ilearner.metalearners import LearnerResult, SieveModel
    r = LearnerResult("naive", SieveModel(d, np.array([0.37, 0, 0, 0]), "gaussian", 0.0),
                      np.zeros(1), np.zeros(1, int), None)
    np.testing.assert_array_equal(predict(r, Z), 0.37)


def test_prediction_on_training_rows_and_clamping():
    d = _toy(16, binary=False)
    r = fit_metalearner("naive", d, seed=0)
    Z = d.Z
    np.testing.assert_array_equal(r.predict(Z), r.m_hat.predict(Z))
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    beyond = np.array([[hi[0] + 5, lo[1] - 5]])
    edge = np.array([[hi[0], lo[1]]])
    np.testing.assert_array_equal(r.predict(beyond), r.predict(edge))
    with pytest.raises(DomainError):
        r.predict(np.zeros((2, 3)))


def test_orthogonality_with_full_covariates():
    # Z = L and the true outcome mean lies in the dictionary span: IPW and DR
    # should be statistically indistinguishable.
    rng = np.random.default_rng(17)
    dictionary = build_dictionary(2, 6, 2)
    mse = {"ipw": [], "dr": []}

    def q_true(L):
        U = np.clip((L + 3) / 6, 0, 1)
        return 0.5 + 0.2 * np.sqrt(2) * np.cos(np.pi * U[:, 0])

    def g_true(L):
        return 1 / (1 + np.exp(-(0.2 + 0.8 * L[:, 0] - 0.5 * L[:, 1])))

    grid = np.column_stack([np.linspace(-2, 2, 200), np.linspace(2, -2, 200)])
    for rep in range(50):
        L = np.clip(rng.normal(size=(600, 2)), -3, 3)
        L[0], L[1] = [-3, -3], [3, 3]  # pins the scaler to the truth's [-3, 3] scaling
        A = (rng.random(600) < g_true(L)).astype(float)
        Y = (rng.random(600) < q_true(L)).astype(float)
        data = Dataset(L, A, Y, (0, 1), outcome_family="binomial")
        nc = NuisanceConfig(KnownFunction(g_true), KnownFunction(q_true))
        res = fit_all(data, ["ipw", "dr"], nuisance=nc, final=FinalFitConfig(n_basis=6), seed=rep)
        for k in mse:
            mse[k].append(np.mean((res[k].predict(grid) - q_true(grid)) ** 2))
    m = {k: np.mean(v) for k, v in mse.items()}
    se = {k: np.std(v, ddof=1) / np.sqrt(len(v)) for k, v in mse.items()}
    assert abs(m["ipw"] - m["dr"]) <= 2 * (se["ipw"] + se["dr"])
    del dictionary
