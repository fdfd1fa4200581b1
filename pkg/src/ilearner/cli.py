"""Command-line front end.

Subcommands: ``simulate`` (replicated benchmark), ``fit`` (learners on a CSV
file, one JSON artifact per learner and arm), ``predict`` (apply an artifact)
and ``diagnose`` (cross-fitted nuisance and targeting report without saving
models).

Settings come from built-in defaults, then an optional JSON ``--config`` file,
then explicit flags. Exit codes: 0 success, 1 runtime or numerical failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateCovariateError, DomainError, ILearnerError
from .io import DataFormatError, ModelArtifact, read_csv, write_json, write_predictions
from .metalearners import (KINDS, Dataset, FinalFitConfig, NuisanceConfig, fit_all, flip_treatment,
                           make_crossfit_plan)
from .nuisance import NuisanceLearnerSpec
from .simulation import (DGP_KINDS, BenchmarkConfig, Dgp, DgpSpec, format_table, run_benchmark,
                         write_results_csv)
from .targeting import TargetingConfig

log = logging.getLogger("ilearner")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
POSITIVITY_WARNING_LEVEL = 0.01

COMMON_DEFAULTS = {
    "seed": 0,
    "k_folds": 5,
    "n_basis": 10,
    "interaction_cap": 2,
    "learners": "all",
    "nuisance": "tree_ensemble",
    "lambda_const": 1.0,
    "lambda_cv": False,
    "link": "auto",
    "clip_lo": 0.01,
    "clip_hi": 0.99,
    "out_dir": ".",
    "verbose": False,
}

DEFAULTS = {
    "simulate": {**COMMON_DEFAULTS, "dgp": "dgp2", "dim_z": 2, "reps": 50, "n_train": 1000,
                 "n_valid": 500, "n_mc": 100_000, "d": 20, "correlation_seed": 0},
    "fit": {**COMMON_DEFAULTS, "data": None, "outcome": None, "treatment": None, "covariates": None,
            "z": None, "family": "auto", "both_arms": False},
    "predict": {"artifact": None, "data": None, "out": None, "out_dir": ".", "verbose": False},
}
DEFAULTS["diagnose"] = {k: v for k, v in DEFAULTS["fit"].items() if k != "both_arms"}


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--k-folds", dest="k_folds", type=int, default=S)
    p.add_argument("--n-basis", dest="n_basis", type=int, default=S)
    p.add_argument("--interaction-cap", dest="interaction_cap", type=int, default=S)
    p.add_argument("--learners", default=S, help="comma-separated learner names or 'all'")
    p.add_argument("--nuisance", default=S, help="tree_ensemble or sieve_lasso (simulate also: oracle)")
    p.add_argument("--lambda-const", dest="lambda_const", type=float, default=S)
    p.add_argument("--lambda-cv", dest="lambda_cv", action="store_true", default=S)
    p.add_argument("--link", default=S, choices=("auto", "identity", "logit"))
    p.add_argument("--clip-lo", dest="clip_lo", type=float, default=S)
    p.add_argument("--clip-hi", dest="clip_hi", type=float, default=S)
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def _add_data(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="CSV file with a header row")
    p.add_argument("--outcome", default=S)
    p.add_argument("--treatment", default=S)
    p.add_argument("--covariates", default=S, help="comma-separated; default all other columns")
    p.add_argument("--z", default=S, help="comma-separated covariates the model conditions on")
    p.add_argument("--family", default=S, choices=("auto", "gaussian", "binomial"))


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="ilearner", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="replicated benchmark on a simulated design")
    _add_common(p)
    p.add_argument("--dgp", default=S, choices=DGP_KINDS)
    p.add_argument("--dim-z", dest="dim_z", type=int, default=S)
    p.add_argument("--reps", type=int, default=S)
    p.add_argument("--n-train", dest="n_train", type=int, default=S)
    p.add_argument("--n-valid", dest="n_valid", type=int, default=S)
    p.add_argument("--n-mc", dest="n_mc", type=int, default=S)
    p.add_argument("--d", type=int, default=S, help="number of covariates")
    p.add_argument("--correlation-seed", dest="correlation_seed", type=int, default=S)

    p = sub.add_parser("fit", help="fit learners on a CSV file and save artifacts")
    _add_common(p)
    _add_data(p)
    p.add_argument("--both-arms", dest="both_arms", action="store_true", default=S,
                   help="also fit E(Y^0 | Z) on the flipped treatment")

    p = sub.add_parser("predict", help="apply a saved artifact to a CSV file")
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--artifact", default=S)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S, help="predictions CSV (default OUT_DIR/predictions.csv)")
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)

    p = sub.add_parser("diagnose", help="report cross-fitted nuisance and targeting diagnostics")
    _add_common(p)
    _add_data(p)
    return parser


def resolve_settings(command: str, flags: dict) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    settings = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(from_file, dict):
            raise ConfigError("config file must contain a JSON object")
        for key, value in from_file.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            settings[key] = value
    settings.update(flags)
    return settings


def _names(value) -> list[str] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _learners(value) -> list[str]:
    names = _names(value) or []
    if names == ["all"]:
        return list(KINDS)
    unknown = [k for k in names if k not in KINDS]
    if unknown or not names:
        raise ConfigError(f"unknown learner(s) {unknown or value!r}; choose from {', '.join(KINDS)} or 'all'")
    return names


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _nuisance_config(settings: dict, outcome_family: str) -> NuisanceConfig:
    kind = settings["nuisance"]
    if kind not in ("tree_ensemble", "sieve_lasso"):
        raise ConfigError(f"unknown nuisance learner {kind!r}")
    lo, hi = float(settings["clip_lo"]), float(settings["clip_hi"])
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError(f"clip bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
    return NuisanceConfig(NuisanceLearnerSpec(kind), NuisanceLearnerSpec(kind, outcome_family=outcome_family),
                          clip=(lo, hi))


def _targeting_config(settings: dict, binary: bool) -> TargetingConfig:
    link = settings["link"]
    if link == "auto":
        link = "logit" if binary else "identity"
    if link == "logit" and not binary:
        raise ConfigError("the logit targeting link needs a binary outcome")
    return TargetingConfig(link=link, lambda_constant=float(settings["lambda_const"]),
                           lambda_cv=bool(settings["lambda_cv"]))


def _final_config(settings: dict) -> FinalFitConfig:
    return FinalFitConfig(n_basis=int(settings["n_basis"]), interaction_cap=int(settings["interaction_cap"]))


def _out_dir(settings: dict) -> str:
    path = settings["out_dir"]
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


# ---------------------------------------------------------------- simulate

def cmd_simulate(settings: dict) -> int:
    learners = _learners(settings["learners"])
    kind = settings["dgp"]
    if kind not in DGP_KINDS:
        raise ConfigError(f"unknown dgp {kind!r}")
    spec = DgpSpec(kind, d=int(settings["d"]), n=int(settings["n_train"]), seed=int(settings["seed"]),
                   correlation_seed=int(settings["correlation_seed"]))
    dgp = Dgp(spec)
    mean_pi = float(np.mean(dgp.propensity(dgp.draw_covariates(10_000, np.random.default_rng(settings["seed"])))))
    if mean_pi < POSITIVITY_WARNING_LEVEL:
        bar = "!" * 72
        print(f"{bar}\nWARNING: positivity violation in {kind}: mean propensity is {mean_pi:.3g}.\n"
              f"Almost no unit is treated; learner fits are expected to fail.\n{bar}", file=sys.stderr)
    binary = dgp.binary_outcome
    if settings["nuisance"] == "oracle":
        nuisance = "oracle"
    else:
        nuisance = _nuisance_config(settings, "binomial" if binary else "gaussian")
    config = BenchmarkConfig(
        learners=tuple(learners), dim_z=int(settings["dim_z"]), n_basis=int(settings["n_basis"]),
        interaction_cap=int(settings["interaction_cap"]), k_folds=int(settings["k_folds"]),
        nuisance=nuisance, targeting=_targeting_config(settings, binary), final=_final_config(settings),
        n_mc=int(settings["n_mc"]))
    if config.k_folds < 2:
        raise ConfigError("--k-folds must be at least 2")
    out_dir = _out_dir(settings)
    progress = (lambda rep: log.info("replication %d done", rep + 1)) if settings["verbose"] else None
    result = run_benchmark(spec, config, n_train=int(settings["n_train"]), n_valid=int(settings["n_valid"]),
                           n_reps=int(settings["reps"]), seed=int(settings["seed"]), progress=progress)
    path = os.path.join(out_dir, f"benchmark_{kind}.csv")
    write_results_csv(result, path)
    print(format_table(result))
    print(f"results written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- fit / diagnose

def _binary_check(values: np.ndarray, column: str) -> None:
    bad = np.flatnonzero((values != 0) & (values != 1))
    if bad.size:
        raise DataFormatError(f"row {bad[0] + 1}, column {column!r}: value {values[bad[0]]:g} is not 0 or 1")


def load_dataset(settings: dict) -> tuple[Dataset, Table]:
    _require(settings, "data", "outcome", "treatment", "z")
    table = read_csv(settings["data"])
    outcome, treatment = settings["outcome"], settings["treatment"]
    for col in (outcome, treatment):
        if col not in table.columns:
            raise DataFormatError(f"column {col!r} not found in {settings['data']}")
    covariates = _names(settings["covariates"])
    if covariates is None:
        covariates = [c for c in table.columns if c not in (outcome, treatment)]
    z = _names(settings["z"])
    for c in covariates:
        if c not in table.columns:
            raise DataFormatError(f"covariate column {c!r} not found in {settings['data']}")
        if c in (outcome, treatment):
            raise ConfigError(f"column {c!r} cannot be both a covariate and the outcome or treatment")
    if not covariates:
        raise ConfigError("no covariate columns")
    not_cov = [c for c in z if c not in covariates]
    if not z or not_cov:
        raise ConfigError(f"--z must name a non-empty subset of the covariates; not covariates: {not_cov}")
    A = table.column(treatment)
    Y = table.column(outcome)
    _binary_check(A, treatment)
    family = settings["family"]
    if family == "auto":
        family = "binomial" if np.all((Y == 0) | (Y == 1)) else "gaussian"
    elif family == "binomial":
        _binary_check(Y, outcome)
    L = table.select(covariates)
    for j, c in enumerate(covariates):
        if np.all(L[:, j] == L[0, j]):
            raise DegenerateCovariateError(c, f"covariate {c!r} is constant")
    if np.all(A == A[0]):
        raise DataFormatError(f"treatment column {treatment!r} has a single value")
    z_idx = tuple(covariates.index(c) for c in z)
    return Dataset(L, A, Y, z_idx, names=tuple(covariates), outcome_family=family), table


def _fit_arm(dataset: Dataset, settings: dict, learners: list[str]):
    k = int(settings["k_folds"])
    if k < 2:
        raise ConfigError("--k-folds must be at least 2")
    plan = make_crossfit_plan(dataset.n, k, int(settings["seed"]))
    binary = dataset.outcome_family == "binomial"
    return fit_all(dataset, learners, nuisance=_nuisance_config(settings, dataset.outcome_family),
                   targeting=_targeting_config(settings, binary), final=_final_config(settings),
                   crossfit=plan, seed=int(settings["seed"]))


def _arm_diagnostics(results: dict) -> dict:
    folds = None
    learners = {}
    for kind, res in results.items():
        diag = dict(res.diagnostics)
        f = diag.pop("folds", None)
        if f is not None and (folds is None or any("targeting" in x for x in f)):
            folds = f
        learners[kind] = diag
    return {"folds": folds or [], "learners": learners}


def _settings_record(settings: dict) -> dict:
    return {k: v for k, v in sorted(settings.items()) if k not in ("verbose", "out_dir")}


def _run_fit(settings: dict, save: bool) -> dict:
    learners = _learners(settings["learners"])
    dataset, _ = load_dataset(settings)
    arms = [("y1", dataset)]
    if settings.get("both_arms"):
        arms.append(("y0", flip_treatment(dataset)))
    out_dir = _out_dir(settings)
    record = _settings_record(settings)
    report = {"n": dataset.n, "outcome_family": dataset.outcome_family,
              "z": list(dataset.z_names), "settings": record, "arms": {}}
    written = []
    for arm, data in arms:
        results = _fit_arm(data, settings, learners)
        report["arms"][arm] = {"n_treated": int(data.A.sum()), **_arm_diagnostics(results)}
        if not save:
            continue
        for kind, res in results.items():
            art = ModelArtifact(kind, arm, res.m_hat.family, res.m_hat.lam, data.z_names,
                                res.m_hat.dictionary, res.m_hat.coefficients, record)
            path = os.path.join(out_dir, f"model_{kind}_{arm}.json")
            art.save(path)
            written.append(path)
    diag_path = os.path.join(out_dir, "diagnostics.json")
    write_json(diag_path, report)
    for path in written:
        print(f"wrote {path}")
    print(f"wrote {diag_path}")
    return report


def cmd_fit(settings: dict) -> int:
    _run_fit(settings, save=True)
    return EXIT_OK


def cmd_diagnose(settings: dict) -> int:
    report = _run_fit(settings, save=False)
    for arm, info in report["arms"].items():
        print(f"[{arm}] n={report['n']} treated={info['n_treated']}")
        for f in info["folds"]:
            raw, clipped = f["propensity_raw"], f["propensity_clipped"]
            line = (f"  fold {f['fold']}: g raw [{raw['min']:.4g}, {raw['max']:.4g}] "
                    f"clipped mean {clipped['mean']:.4g}")
            if "targeting" in f:
                t = f["targeting"]
                line += (f"; targeting max|t| {t['max_abs_term_before']:.3g} -> "
                         f"{t['max_abs_term_after']:.3g} (lambda {t['lambda']:.3g})")
            print(line)
        for kind, d in info["learners"].items():
            frac = d.get("fraction_fitted_outside_unit")
            extra = "" if frac is None else f", fitted outside [0,1]: {100 * frac:.2f}%"
            print(f"  {kind}: final lambda {d['final']['lam']:.4g}{extra}")
    return EXIT_OK


# ---------------------------------------------------------------- predict

def cmd_predict(settings: dict) -> int:
    _require(settings, "artifact", "data")
    art = ModelArtifact.load(settings["artifact"])
    table = read_csv(settings["data"])
    missing = [c for c in art.z_names if c not in table.columns]
    if missing:
        raise DataFormatError(f"columns required by the model are missing: {', '.join(missing)}")
    pred = art.predict(table.select(list(art.z_names)))
    out = settings["out"] or os.path.join(_out_dir(settings), "predictions.csv")
    write_predictions(out, pred)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "diagnose": cmd_diagnose}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(ns)
    command = flags.pop("command")
    try:
        settings = resolve_settings(command, flags)
        logging.basicConfig(level=logging.INFO if settings.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[command](settings)
    except (ConfigError, DomainError) as exc:
        print(f"ilearner {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ILearnerError, FloatingPointError, np.linalg.LinAlgError, OSError) as exc:
        print(f"ilearner {command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
