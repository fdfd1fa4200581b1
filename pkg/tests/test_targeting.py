import math

import numpy as np
import pytest

import ilearner.targeting as targeting
from ilearner.errors import ConfigError, ConvergenceError, DomainError, InsufficientSupportError
from ilearner.glm import PenalizedFit
from ilearner.sieve import build_dictionary
from ilearner.simulation import Dgp, DgpSpec
from ilearner.targeting import (TargetingConfig, compute_targeting_term, default_Jn, target_q,
                                targeting_lambda)


def _problem(seed, n=400, J=6, link="identity"):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, 2))
    g = np.clip(1 / (1 + np.exp(-Z[:, 0])), 0.05, 0.95)
    A = (rng.random(n) < g).astype(float)
    if link == "identity":
        Y = Z[:, 0] + Z[:, 1] ** 2 + rng.normal(size=n)
        q0 = Z[:, 0] + 0.5 * rng.normal(size=n)
    else:
        Y = (rng.random(n) < 1 / (1 + np.exp(-Z[:, 1]))).astype(float)
        q0 = np.full(n, 0.5)
    B = build_dictionary(2, J, 2).fit(Z).featurize(Z)
    return A, Y, g, q0, B


def test_term_zero_when_treated_residuals_vanish():
    A, Y, g, q0, B = _problem(0)
    q = np.where(A == 1, Y, q0)
    np.testing.assert_array_equal(compute_targeting_term(A, Y, g, q, B), 0.0)


def test_term_zero_when_propensity_is_one():
    A, Y, _, q0, B = _problem(1)
    np.testing.assert_array_equal(compute_targeting_term(A, Y, np.ones_like(Y), q0, B), 0.0)


def test_term_hand_case():
    A = np.array([1.0, 1.0, 0.0])
    g = np.array([0.5, 0.25, 0.5])
    Y = np.array([1.0, 0.0, np.nan])
    q = np.array([0.5, 0.5, 0.7])
    t = compute_targeting_term(A, Y, g, q, np.ones((3, 1)))
    direct = sum(A[i] * (1 - g[i]) / g[i] * (Y[i] - q[i]) for i in range(2)) / 3
    assert t[0] == pytest.approx(-1 / 3, abs=1e-15)
    assert t[0] == pytest.approx(direct, abs=1e-15)


def test_term_rejects_invalid_propensity():
    A, Y, g, q0, B = _problem(2)
    g = g.copy()
    g[0] = 0.0
    with pytest.raises(DomainError):
        compute_targeting_term(A, Y, g, q0, B)


def test_null_residuals_give_zero_update():
    A, Y, g, q0, B = _problem(3)
    q0 = np.where(A == 1, Y, q0)
    res = target_q(A, Y, g, q0, B)
    assert np.all(res.epsilon == 0)
    np.testing.assert_array_equal(res.q_targeted, q0)


@pytest.mark.parametrize("seed", range(5))
def test_identity_link_kkt_bound(seed):
    A, Y, g, q0, B = _problem(seed, J=10)
    res = target_q(A, Y, g, q0, B)
    after = res.targeting_term_after
    assert np.abs(after[1:]).max() <= res.lambda_used + 1e-6
    assert abs(after[0]) <= 1e-8
    # the term recomputed from the returned predictions agrees with the record
    np.testing.assert_allclose(compute_targeting_term(A, Y, g, res.q_targeted, B), after, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_logit_link_kkt_bound_and_range(seed):
    A, Y, g, q0, B = _problem(seed, J=10, link="logit")
    res = target_q(A, Y, g, q0, B, TargetingConfig(link="logit"))
    assert np.abs(res.targeting_term_after[1:]).max() <= res.lambda_used + 1e-4
    assert abs(res.targeting_term_after[0]) <= 1e-4
    assert np.all((res.q_targeted >= 0) & (res.q_targeted <= 1))


def test_logit_link_tolerates_saturated_initial_predictions():
    A, Y, g, _, B = _problem(4, link="logit")
    q0 = Y.copy()  # exactly 0 or 1 everywhere
    res = target_q(A, Y, g, q0, B, TargetingConfig(link="logit"))
    assert res.converged
    assert np.all(np.isfinite(res.q_targeted))


def test_no_update_when_term_already_small():
    A, Y, g, q0, B = _problem(5, J=10)
    big = TargetingConfig(lambda_constant=1e3)
    q0 = q0 + np.sum(np.where(A == 1, (Y - q0) * (1 - g) / g, 0.0)) / np.sum(np.where(A == 1, (1 - g) / g, 0.0))
    res = target_q(A, Y, g, q0, B, big)
    assert np.abs(res.targeting_term_before[1:]).max() <= res.lambda_used
    assert np.all(res.epsilon[1:] == 0)


def test_parametric_case_drives_term_to_zero():
    A, Y, g, q0, B = _problem(6, J=6)
    res = target_q(A, Y, g, q0, B, TargetingConfig(lambda_constant=1e-12))
    assert np.abs(res.targeting_term_after).max() <= 1e-8


def test_update_reproduces_in_sample_predictions():
    for link in ("identity", "logit"):
        A, Y, g, q0, B = _problem(7, link=link)
        res = target_q(A, Y, g, q0, B, TargetingConfig(link=link))
        np.testing.assert_allclose(res.update(q0, g, B), res.q_targeted, rtol=0, atol=1e-12)


def test_lambda_rule():
    A, Y, g, q0, B = _problem(8, n=500, J=10)
    res = target_q(A, Y, g, q0, B, TargetingConfig(lambda_constant=2.0))
    assert res.lambda_used == pytest.approx(2.0 * math.sqrt(math.log(10) / 500))
    assert targeting_lambda(100, 1) == 0.0


def test_dgp2_shrinkage_in_most_replications():
    dgp = Dgp(DgpSpec("dgp2"))
    shrunk = 0
    reps = 10
    for rep in range(reps):
        d = dgp.draw(2000, np.random.default_rng(rep))
        Z = d.L[:, :2]
        B = build_dictionary(2, 10, 2).fit(Z).featurize(Z)
        g = np.clip(d.true_pi, 0.01, 0.99)
        q0 = np.full(2000, d.Y[d.A == 1].mean())
        res = target_q(d.A, d.Y, g, q0, B)
        assert np.abs(res.targeting_term_after[1:]).max() <= res.lambda_used + 1e-6
        before = np.abs(res.targeting_term_before).max()
        shrunk += before > res.lambda_used
    assert shrunk > reps / 2


@pytest.mark.parametrize("args,expected", [
    ((1000, 2, 2, 0.1), 28),
    ((2, 1, 1, 1e-6), 1),
    ((10**6, 20, 3, 1.0), 5000),
])
def test_default_Jn(args, expected):
    assert default_Jn(*args) == expected


def test_default_Jn_rejects_tiny_n():
    with pytest.raises(DomainError):
        default_Jn(1, 2, 2)


def test_dictionary_above_cap_is_a_config_error():
    A, Y, g, q0, B = _problem(9, J=10)
    with pytest.raises(ConfigError):
        target_q(A, Y, g, q0, B, TargetingConfig(max_terms_cap=5))


def test_empty_treated_subsample():
    A, Y, g, q0, B = _problem(10)
    with pytest.raises(InsufficientSupportError):
        target_q(np.zeros_like(A), Y, g, q0, B)


def test_logit_link_requires_unit_interval_outcomes():
    A, Y, g, q0, B = _problem(11)
    with pytest.raises(DomainError):
        target_q(A, Y * 10, g, np.full_like(Y, 0.5), B, TargetingConfig(link="logit"))


def test_nonconvergence_is_propagated(monkeypatch):
    A, Y, g, q0, B = _problem(12)

    def stuck(problem, **kw):
        return PenalizedFit(np.zeros(problem.p), problem.family, problem.lam, False, 7, 0.0, 1.0)

    monkeypatch.setattr(targeting, "fit_lasso", stuck)
    with pytest.raises(ConvergenceError) as info:
        target_q(A, Y, g, q0, B)
    assert info.value.diagnostics["iterations"] == 7


@pytest.mark.parametrize("kw", [dict(link="probit"), dict(lambda_constant=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TargetingConfig(**kw)
