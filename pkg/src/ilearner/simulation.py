"""Simulation designs and the replication harness.

Covariates are ``L ~ N(0, Sigma)`` with a random correlation matrix. Three
designs are provided:

``dgp1_literal``
    Kang-Schafer-type continuous outcome; the propensity exponent uses the
    transformed covariates ``V1..V4``. At typical covariate values this puts the
    propensity near ``exp(-36)``, so there is practically no treated sample.
``dgp1_raw``
    Same outcome model, propensity exponent on the raw ``L1..L4``.
``dgp2``
    Dichotomous outcome driven by the scalar index ``K = sum_j L_j / j``.

The true target ``m(z) = E{b(L) | Z = z}`` has no closed form. It is computed by
Monte Carlo from the exact Gaussian conditional of the low-dimensional linear
projection of ``L`` that the outcome mean depends on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DomainError, ILearnerError

log = logging.getLogger(__name__)

DgpKind = Literal["dgp1_literal", "dgp1_raw", "dgp2"]
DGP_KINDS = ("dgp1_literal", "dgp1_raw", "dgp2")


class GenerationError(ILearnerError, RuntimeError):
    pass


class BenchmarkError(ILearnerError, RuntimeError):
    pass


def make_correlation_matrix(d: int, seed: int, *, scale: float = 0.25, bound: float = 0.5,
                            min_eig: float = 1e-6, max_repairs: int = 100) -> np.ndarray:
    """Random correlation matrix with off-diagonals in ``[-bound, bound]``.

    Off-diagonals are truncated normals ``N(0, scale^2)``. If the matrix is not
    positive definite, eigenvalues are clipped at ``min_eig`` and the diagonal
    renormalized to one, repeatedly; off-diagonals are re-clipped once at the end.
    """
    if d < 2:
        raise DomainError("correlation matrix needs d >= 2")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(d, 1)
    vals = rng.normal(0.0, scale, size=iu[0].size)
    bad = np.abs(vals) > bound
    while np.any(bad):
        vals[bad] = rng.normal(0.0, scale, size=int(bad.sum()))
        bad = np.abs(vals) > bound
    S = np.eye(d)
    S[iu] = vals
    S = S + np.triu(S, 1).T
    # clipping slightly above min_eig absorbs the shrinkage from renormalizing
    floor = min_eig * 1.01
    for _ in range(max_repairs + 1):
        if np.linalg.eigvalsh(S).min() >= min_eig:
            break
        w, V = np.linalg.eigh(S)
        S = (V * np.maximum(w, floor)) @ V.T
        s = np.sqrt(np.diag(S))
        S = S / np.outer(s, s)
        S = (S + S.T) / 2.0
        np.fill_diagonal(S, 1.0)
    else:
        raise GenerationError(f"could not repair correlation matrix after {max_repairs} attempts")
    S = np.clip(S, -bound, bound)
    np.fill_diagonal(S, 1.0)
    if np.linalg.eigvalsh(S).min() < min_eig:
        raise GenerationError("correlation matrix lost positive definiteness when re-clipped")
    return S


@dataclass(frozen=True)
class DgpSpec:
    kind: DgpKind = "dgp2"
    d: int = 20
    n: int = 1000
    seed: int = 0
    correlation_seed: int = 0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ConfigError(f"unknown dgp {self.kind!r}; choose from {DGP_KINDS}")
        if self.kind.startswith("dgp1") and self.d < 4:
            raise ConfigError("dgp1 designs need d >= 4")
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.n < 1:
            raise ConfigError("n must be positive")


@dataclass
class SimDraw:
    L: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    true_pi: np.ndarray
    true_b: np.ndarray
    dgp: "Dgp" = field(repr=False)

    def true_m(self, z_columns, Z_points, n_mc: int = 100_000, seed: int = 0):
        return true_conditional_mean(self.dgp, z_columns, Z_points, n_mc, seed)


def _kang_schafer_v(L1, L2, L3, L4):
    v1 = np.exp(L1 / 2.0)
    v2 = L2 / (1.0 + np.exp(L1)) + 10.0
    v3 = (L1 * L3 / 25.0 + 0.6) ** 3
    v4 = (L2 + L4 + 20.0) ** 2
    return v1, v2, v3, v4


class Dgp:
    """A fixed design: correlation matrix plus propensity and outcome-mean maps.

    ``projection`` is an ``r x d`` matrix ``P`` such that the outcome mean is a
    function of ``P L`` alone; ``mean_from_projection`` evaluates it there.
    ``sigma`` overrides the random correlation matrix.
    """

    def __init__(self, spec: DgpSpec, sigma: np.ndarray | None = None):
        self.spec = spec
        if sigma is None:
            sigma = make_correlation_matrix(spec.d, spec.correlation_seed)
        self.sigma = np.asarray(sigma, dtype=float)
        if self.sigma.shape != (spec.d, spec.d):
            raise DomainError("sigma must be d x d")
        self._chol = np.linalg.cholesky(self.sigma)
        d = spec.d
        if spec.kind == "dgp2":
            self.projection = (1.0 / np.arange(1, d + 1))[None, :]
        else:
            self.projection = np.eye(d)[:4]

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def binary_outcome(self) -> bool:
        return self.kind == "dgp2"

    def draw_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.spec.d)) @ self._chol.T

    def mean_from_projection(self, V: np.ndarray) -> np.ndarray:
        if self.kind == "dgp2":
            K = V[..., 0]
            return expit(2.5 - 2.0 * np.cos(K) ** 2)
        v1, v2, v3, v4 = _kang_schafer_v(V[..., 0], V[..., 1], V[..., 2], V[..., 3])
        return 210.0 + 27.4 * v1 + 13.7 * v2 + 13.7 * v3 + 13.7 * v4

    def outcome_mean(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        return self.mean_from_projection(L @ self.projection.T)

    def propensity(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        if self.kind == "dgp2":
            K = L @ self.projection[0]
            return 1.0 / (1.0 + np.exp(2.0 + np.sin(K) + np.cos(K)))
        L1, L2, L3, L4 = L[:, 0], L[:, 1], L[:, 2], L[:, 3]
        if self.kind == "dgp1_literal":
            v1, v2, v3, v4 = _kang_schafer_v(L1, L2, L3, L4)
            eta = v1 - 0.5 * v2 + 0.25 * v3 + 0.1 * v4
        else:
            eta = L1 - 0.5 * L2 + 0.25 * L3 + 0.1 * L4
        return expit(-eta)

    def draw(self, n: int, rng: np.random.Generator) -> SimDraw:
        L = self.draw_covariates(n, rng)
        pi = self.propensity(L)
        b = self.outcome_mean(L)
        A = (rng.random(n) < pi).astype(float)
        if self.binary_outcome:
            Y = (rng.random(n) < b).astype(float)
        else:
            Y = b + rng.standard_normal(n)
        return SimDraw(L, A, Y, pi, b, self)


def draw_dgp1(spec: DgpSpec, rng=None) -> SimDraw:
    if spec.kind not in ("dgp1_literal", "dgp1_raw"):
        raise ConfigError("draw_dgp1 needs a dgp1 spec")
    return Dgp(spec).draw(spec.n, np.random.default_rng(spec.seed if rng is None else rng))


def draw_dgp2(spec: DgpSpec, rng=None) -> SimDraw:
    if spec.kind != "dgp2":
        raise ConfigError("draw_dgp2 needs a dgp2 spec")
    return Dgp(spec).draw(spec.n, np.random.default_rng(spec.seed if rng is None else rng))


def _psd_root(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((C + C.T) / 2.0)
    if w.min(initial=0.0) < -1e-9 * max(1.0, abs(w).max(initial=0.0)):
        raise GenerationError("conditional covariance is not positive semi-definite")
    return V * np.sqrt(np.maximum(w, 0.0))


def true_conditional_mean(dgp: Dgp, z_columns: Sequence[int], Z_points, n_mc: int = 100_000,
                          seed: int = 0, *, chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo ``E{b(L) | L_Z = z}`` at each row of ``Z_points``.

    Returns ``(estimates, standard_errors)``. Every point gets its own draws, so
    the errors are independent across points.
    """
    if n_mc < 10_000:
        raise DomainError("n_mc must be at least 1e4")
    z_columns = list(z_columns)
    d = dgp.spec.d
    Zp = np.asarray(Z_points, dtype=float)
    if Zp.ndim == 1:
        Zp = Zp[:, None] if len(z_columns) == 1 else Zp[None, :]
    if Zp.shape[1] != len(z_columns):
        raise DomainError("Z_points does not match z_columns")
    rest = [j for j in range(d) if j not in set(z_columns)]
    S = dgp.sigma
    P = dgp.projection
    P_s, P_r = P[:, z_columns], P[:, rest]
    if rest:
        S_ss = S[np.ix_(z_columns, z_columns)]
        S_rs = S[np.ix_(rest, z_columns)]
        S_rr = S[np.ix_(rest, rest)]
        coef = np.linalg.solve(S_ss, S_rs.T).T  # E[L_r | L_s = z] = coef @ z
        cond_cov = S_rr - coef @ S_rs.T
        mean_proj = Zp @ (P_s + P_r @ coef).T  # (m, r)
        root = _psd_root(P_r @ cond_cov @ P_r.T)  # (r, r)
    else:
        mean_proj = Zp @ P_s.T
        root = np.zeros((P.shape[0], P.shape[0]))
    rng = np.random.default_rng(seed)
    r = P.shape[0]
    est = np.empty(Zp.shape[0])
    se = np.empty(Zp.shape[0])
    for start in range(0, Zp.shape[0], chunk):
        mp = mean_proj[start:start + chunk]
        E = rng.standard_normal((mp.shape[0], n_mc, r)) @ root.T
        vals = dgp.mean_from_projection(mp[:, None, :] + E)  # (c, n_mc)
        est[start:start + chunk] = vals.mean(axis=1)
        se[start:start + chunk] = vals.std(axis=1, ddof=1) / math.sqrt(n_mc)
    return est, se


@dataclass(frozen=True)
class BenchmarkConfig:
    """Everything a replication needs besides the design and the seed.

    ``nuisance`` is a :class:`~ilearner.metalearners.NuisanceConfig`, or the
    string ``"oracle"`` (true propensity and outcome mean) or
    ``"oracle_g_const_q"`` (true propensity, outcome regression fixed at
    ``const_q``).
    """

    learners: tuple[str, ...] = ("naive", "ipw", "imputation", "dr", "i_learner")
    dim_z: int = 2
    n_basis: int = 10
    interaction_cap: int = 2
    k_folds: int = 5
    nuisance: object = None
    targeting: object = None
    final: object = None
    const_q: float = 0.5
    n_mc: int = 100_000
    max_failure_fraction: float = 0.10


@dataclass
class BenchmarkResult:
    rows: list[dict]
    mse: dict[str, np.ndarray]
    pct_outside: dict[str, np.ndarray]
    coefficients: dict[str, list]
    failures: dict[str, int]
    m_se: np.ndarray

    def row(self, learner: str) -> dict:
        for r in self.rows:
            if r["learner"] == learner:
                return r
        raise KeyError(learner)


CSV_COLUMNS = ("dgp", "learner", "dim_z", "n_basis", "n_train", "reps", "mean_mse", "se_mse",
               "pct_outside_range")


def _rep_seeds(seed: int, rep: int) -> dict[str, int]:
    names = ("train", "valid", "mc", "plan", "fit")
    states = np.random.SeedSequence([seed, rep]).generate_state(len(names))
    return {k: int(v) for k, v in zip(names, states)}


def _resolve_nuisance(config: BenchmarkConfig, dgp: Dgp):
    from .metalearners import NuisanceConfig
    from .nuisance import KnownFunction, NuisanceLearnerSpec

    family = "binomial" if dgp.binary_outcome else "gaussian"
    nz = config.nuisance
    if nz is None:
        return NuisanceConfig(NuisanceLearnerSpec(), NuisanceLearnerSpec(outcome_family=family))
    if nz == "oracle":
        return NuisanceConfig(KnownFunction(dgp.propensity), KnownFunction(dgp.outcome_mean))
    if nz == "oracle_g_const_q":
        c = config.const_q
        return NuisanceConfig(KnownFunction(dgp.propensity),
                              KnownFunction(lambda L: np.full(L.shape[0], c)))
    if isinstance(nz, str):
        raise ConfigError(f"unknown nuisance option {nz!r}")
    return nz


def run_replication(dgp: Dgp, config: BenchmarkConfig, n_train: int, n_valid: int, seed: int,
                    rep: int):
    """One replication: returns per-learner (mse, pct_outside, coefficients) and the m SEs."""
    from .metalearners import (Dataset, FinalFitConfig, fit_metalearner, build_z_dictionary,
                               crossfit_nuisances, make_crossfit_plan, _NEEDS_NUISANCE)
    from .targeting import TargetingConfig

    seeds = _rep_seeds(seed, rep)
    z_cols = tuple(range(config.dim_z))
    train = dgp.draw(n_train, np.random.default_rng(seeds["train"]))
    L_valid = dgp.draw_covariates(n_valid, np.random.default_rng(seeds["valid"]))
    Z_valid = L_valid[:, list(z_cols)]
    m_true, m_se = true_conditional_mean(dgp, z_cols, Z_valid, config.n_mc, seeds["mc"])

    family = "binomial" if dgp.binary_outcome else "gaussian"
    data = Dataset(train.L, train.A, train.Y, z_cols, outcome_family=family)
    final = config.final or FinalFitConfig(n_basis=config.n_basis, interaction_cap=config.interaction_cap)
    targeting = config.targeting or TargetingConfig(link="logit" if dgp.binary_outcome else "identity")
    nuisance = _resolve_nuisance(config, dgp)
    plan = make_crossfit_plan(n_train, config.k_folds, seeds["plan"])
    dictionary = build_z_dictionary(data, final)

    needs = set()
    for k in config.learners:
        needs.update(_NEEDS_NUISANCE.get(k, ()))
    nuis, nuis_error = None, None
    if needs:
        try:
            nuis = crossfit_nuisances(data, plan, nuisance, need_g="g" in needs, need_q="q" in needs,
                                      targeting=targeting if "i_learner" in config.learners else None,
                                      dictionary=dictionary)
        except (ILearnerError, FloatingPointError, np.linalg.LinAlgError) as exc:
            nuis_error = exc

    out = {}
    for kind in config.learners:
        if kind != "naive" and nuis_error is not None:
            out[kind] = nuis_error
            continue
        try:
            res = fit_metalearner(kind, data, nuisance=nuisance, targeting=targeting, final=final,
                                  crossfit=plan, nuisances=nuis, dictionary=dictionary,
                                  seed=seeds["fit"])
        except (ILearnerError, FloatingPointError, np.linalg.LinAlgError) as exc:
            out[kind] = exc
            continue
        pred = res.predict(Z_valid)
        mse = float(np.mean((pred - m_true) ** 2))
        outside = float(100.0 * np.mean((pred < 0) | (pred > 1))) if dgp.binary_outcome else float("nan")
        out[kind] = (mse, outside, res.m_hat.coefficients.copy())
    return out, m_se


def run_benchmark(dgp_spec: DgpSpec, config: BenchmarkConfig = BenchmarkConfig(), n_train: int = 1000,
                  n_valid: int = 500, n_reps: int = 50, seed: int = 0,
                  progress: Callable[[int], None] | None = None) -> BenchmarkResult:
    """Replicated validation-sample MSE of each learner against the true ``m``.

    Each replication derives its own random streams from ``(seed, rep)``, so the
    result does not depend on execution order.
    """
    dgp = Dgp(dgp_spec)
    if not 1 <= config.dim_z <= dgp_spec.d:
        raise ConfigError(f"dim_z must lie in [1, {dgp_spec.d}]")
    if n_reps < 1:
        raise ConfigError("n_reps must be positive")
    mse = {k: [] for k in config.learners}
    outside = {k: [] for k in config.learners}
    coefs = {k: [] for k in config.learners}
    failures = {k: 0 for k in config.learners}
    m_ses = []
    for rep in range(n_reps):
        res, m_se = run_replication(dgp, config, n_train, n_valid, seed, rep)
        m_ses.append(m_se)
        for k, v in res.items():
            if isinstance(v, Exception):
                failures[k] += 1
                log.warning("replication %d, learner %s failed: %s", rep, k, v)
                mse[k].append(np.nan)
                outside[k].append(np.nan)
                coefs[k].append(None)
            else:
                mse[k].append(v[0])
                outside[k].append(v[1])
                coefs[k].append(v[2])
        if progress is not None:
            progress(rep)
    total_fail = sum(failures.values())
    if total_fail > config.max_failure_fraction * n_reps * len(config.learners):
        raise BenchmarkError(f"{total_fail} of {n_reps * len(config.learners)} learner fits failed")
    rows = []
    for k in config.learners:
        v = np.asarray(mse[k])
        ok = v[np.isfinite(v)]
        o = np.asarray(outside[k])
        rows.append({
            "dgp": dgp_spec.kind,
            "learner": k,
            "dim_z": config.dim_z,
            "n_basis": config.n_basis,
            "n_train": n_train,
            "reps": int(ok.size),
            "mean_mse": float(ok.mean()) if ok.size else float("nan"),
            "se_mse": float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else float("nan"),
            "pct_outside_range": float(np.nanmean(o)) if dgp.binary_outcome and ok.size else float("nan"),
            "failures": failures[k],
        })
    return BenchmarkResult(rows, {k: np.asarray(v) for k, v in mse.items()},
                           {k: np.asarray(v) for k, v in outside.items()}, coefs, failures,
                           np.concatenate(m_ses))


def format_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_results_csv(result: BenchmarkResult, path) -> None:
    import csv
    import io

    from .io import atomic_write_text

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in result.rows:
        w.writerow([format_value(r[c]) for c in CSV_COLUMNS])
    atomic_write_text(path, buf.getvalue())


def format_table(result: BenchmarkResult) -> str:
    cols = ("learner", "reps", "mean_mse", "se_mse", "pct_outside_range", "failures")
    cells = [[format_value(r[c]) for c in cols] for r in result.rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
