"""CSV input, atomic output and the JSON model artifact.

Artifact layout (``format_version`` 1), one JSON object:

``format``
    always ``"ilearner-model"``
``format_version``
    integer, currently 1
``kind``
    learner name (``naive``, ``ipw``, ``imputation``, ``dr`` or ``i_learner``)
``arm``
    ``"y1"`` or ``"y0"``; the latter was fitted on the flipped treatment
``family``
    final-stage family; ``binomial`` artifacts predict on the probability scale
``lam``
    final-stage penalty
``z_names``
    covariate names the model is evaluated on, in order
``dictionary``
    ``dim``, ``max_terms``, ``interaction_cap``, ``indices`` (list of
    multi-indices) and ``scaler`` with per-column ``lo``/``hi``
``coefficients``
    one per dictionary term
``config``, ``config_fingerprint``
    run configuration and the SHA-256 of its canonical JSON encoding

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .sieve import MinMaxScaler, SieveDictionary, featurize
from .glm import link_inverse

ARTIFACT_FORMAT = "ilearner-model"
ARTIFACT_VERSION = 1
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


class DataFormatError(DomainError):
    """Malformed input file; the message carries the row and column."""


class ArtifactVersionError(ConfigError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Table:
    columns: tuple[str, ...]
    values: np.ndarray  # float matrix, one column per header entry

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise DataFormatError(f"column {name!r} not found; available: {', '.join(self.columns)}") from None

    def select(self, names) -> np.ndarray:
        return np.column_stack([self.column(c) for c in names]) if names else np.empty((self.values.shape[0], 0))


def read_csv(path) -> Table:
    """Numeric CSV with a header row. Rows are counted from 1 after the header."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataFormatError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, a header row is required") from None
        header = [h.strip() for h in header]
        if any(not h for h in header):
            raise DataFormatError(f"{path}: header has an empty column name")
        if len(set(header)) != len(header):
            raise DataFormatError(f"{path}: duplicate column names in header")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
            parsed = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell.lower() in MISSING_TOKENS:
                    raise DataFormatError(f"{path}: row {r}, column {name!r}: missing value")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {r}, column {name!r}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(v):
                    raise DataFormatError(f"{path}: row {r}, column {name!r}: non-finite value")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Table(tuple(header), np.asarray(rows, dtype=float))


def write_predictions(path, predictions) -> None:
    lines = ["row_id,prediction"]
    lines += [f"{i},{float(p)!r}" for i, p in enumerate(np.asarray(predictions, dtype=float), start=1)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def fingerprint(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class ModelArtifact:
    kind: str
    arm: str
    family: str
    lam: float
    z_names: tuple[str, ...]
    dictionary: SieveDictionary
    coefficients: np.ndarray
    config: dict = field(default_factory=dict)

    def predict(self, Z) -> np.ndarray:
        return link_inverse(featurize(self.dictionary, Z) @ self.coefficients, self.family)

    def to_dict(self) -> dict:
        d = self.dictionary
        return {
            "format": ARTIFACT_FORMAT,
            "format_version": ARTIFACT_VERSION,
            "kind": self.kind,
            "arm": self.arm,
            "family": self.family,
            "lam": float(self.lam),
            "z_names": list(self.z_names),
            "dictionary": {
                "dim": d.dim,
                "max_terms": d.max_terms,
                "interaction_cap": d.interaction_cap,
                "indices": [list(ix) for ix in d.indices],
                "scaler": {"lo": list(d.scaler.lo), "hi": list(d.scaler.hi)},
            },
            "coefficients": [float(c) for c in self.coefficients],
            "config": self.config,
            "config_fingerprint": fingerprint(self.config),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelArtifact":
        if obj.get("format") != ARTIFACT_FORMAT:
            raise ArtifactVersionError("not an ilearner model artifact")
        version = obj.get("format_version")
        if version != ARTIFACT_VERSION:
            raise ArtifactVersionError(
                f"artifact format version {version} is not supported (expected {ARTIFACT_VERSION})")
        try:
            dd = obj["dictionary"]
            scaler = MinMaxScaler(tuple(dd["scaler"]["lo"]), tuple(dd["scaler"]["hi"]))
            dictionary = SieveDictionary(int(dd["dim"]), int(dd["max_terms"]), int(dd["interaction_cap"]),
                                         tuple(tuple(int(i) for i in ix) for ix in dd["indices"]), scaler)
            coefs = np.asarray(obj["coefficients"], dtype=float)
            art = cls(obj["kind"], obj["arm"], obj["family"], float(obj["lam"]),
                      tuple(obj["z_names"]), dictionary, coefs, obj.get("config", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed artifact: {exc}") from None
        if coefs.shape[0] != len(dictionary.indices):
            raise ConfigError("malformed artifact: coefficient count does not match the dictionary")
        if len(art.z_names) != dictionary.dim:
            raise ConfigError("malformed artifact: z_names do not match the dictionary dimension")
        return art

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot open artifact {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"artifact {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj)
