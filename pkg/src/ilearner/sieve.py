"""Tensor-product cosine sieve.

Univariate basis: ``b_1(x) = 1`` and ``b_j(x) = sqrt(2) cos((j - 1) pi x)`` for
``j >= 2`` on ``[0, 1]``. A multi-index ``(j_1, ..., j_d)`` denotes the product
``prod_k b_{j_k}(x_k)``. Dictionaries are ordered by the product of the indices,
then by their sum, then lexicographically, and exclude terms that involve more
than ``interaction_cap`` non-constant factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateCovariateError, DomainError

SQRT2 = math.sqrt(2.0)

MultiIndex = tuple[int, ...]


def cosine_eval(j: int, x: float) -> float:
    """Value of the ``j``-th orthonormal cosine function at ``x`` in [0, 1]."""
    if int(j) != j or j < 1:
        raise DomainError(f"basis index must be a positive integer, got {j!r}")
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"cosine basis argument must lie in [0, 1], got {x!r}")
    if j == 1:
        return 1.0
    return SQRT2 * math.cos((j - 1) * math.pi * x)


def cosine_matrix(j_max: int, x: np.ndarray) -> np.ndarray:
    """Evaluate ``b_1..b_{j_max}`` at every entry of ``x``; shape ``x.shape + (j_max,)``."""
    x = np.asarray(x, dtype=float)
    freqs = np.arange(j_max, dtype=float) * math.pi
    out = SQRT2 * np.cos(x[..., None] * freqs)
    out[..., 0] = 1.0
    return out


def _sort_key(index: MultiIndex) -> tuple:
    return (math.prod(index), sum(index), index)


def _enumerate(dim: int, bound: int, cap: int) -> list[MultiIndex]:
    """All multi-indices with product <= bound and at most ``cap`` entries > 1."""
    out: list[MultiIndex] = []

    def rec(prefix: list[int], budget: int, active: int) -> None:
        if len(prefix) == dim:
            out.append(tuple(prefix))
            return
        prefix.append(1)
        rec(prefix, budget, active)
        prefix.pop()
        if active == cap:
            return
        for j in range(2, budget + 1):
            prefix.append(j)
            rec(prefix, budget // j, active + 1)
            prefix.pop()

    rec([], bound, 0)
    return out


def ordered_indices(dim: int, max_terms: int, interaction_cap: int) -> list[MultiIndex]:
    """First ``max_terms`` admissible multi-indices under the dictionary ordering."""
    if dim < 1 or max_terms < 1:
        raise DomainError("dim and max_terms must be >= 1")
    if not 1 <= interaction_cap <= dim:
        raise DomainError(f"interaction_cap must lie in [1, {dim}], got {interaction_cap}")
    # Every candidate with product <= bound is enumerated, so once the count
    # reaches max_terms the sorted prefix is exact.
    bound = 1
    while True:
        cands = _enumerate(dim, bound, interaction_cap)
        if len(cands) >= max_terms:
            break
        bound *= 2
    cands.sort(key=_sort_key)
    return cands[:max_terms]


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-column affine map onto [0, 1] with clamping outside the fitted range."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise DomainError("scaler bounds have mismatched lengths")
        for k, (a, b) in enumerate(zip(self.lo, self.hi)):
            if not a < b:
                raise DegenerateCovariateError(k)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def transform(self, Z: np.ndarray) -> np.ndarray:
        Z = _as_matrix(Z, self.dim)
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.clip((Z - lo) / (hi - lo), 0.0, 1.0)


def fit_scaler(Z: np.ndarray, names: Sequence[str] | None = None) -> MinMaxScaler:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DomainError("need a matrix with at least two rows to fit a scaler")
    if not np.all(np.isfinite(Z)):
        raise DomainError("covariates contain non-finite values")
    lo = Z.min(axis=0)
    hi = Z.max(axis=0)
    for k in range(Z.shape[1]):
        if not lo[k] < hi[k]:
            raise DegenerateCovariateError(names[k] if names is not None else k)
    return MinMaxScaler(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def _as_matrix(Z, dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1 and dim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[1] != dim:
        raise DomainError(f"expected a matrix with {dim} columns, got shape {Z.shape}")
    return Z


@dataclass(frozen=True)
class SieveDictionary:
    """Ordered tensor-product cosine dictionary together with its covariate scaler."""

    dim: int
    max_terms: int
    interaction_cap: int
    indices: tuple[MultiIndex, ...]
    scaler: MinMaxScaler | None = field(default=None, compare=False)

    def with_scaler(self, scaler: MinMaxScaler) -> "SieveDictionary":
        if scaler.dim != self.dim:
            raise DomainError("scaler dimension does not match dictionary")
        return SieveDictionary(self.dim, self.max_terms, self.interaction_cap, self.indices, scaler)

    def fit(self, Z, names=None) -> "SieveDictionary":
        return self.with_scaler(fit_scaler(_as_matrix(Z, self.dim), names))

    def featurize(self, Z) -> np.ndarray:
        return featurize(self, Z)


def build_dictionary(dim: int, max_terms: int, interaction_cap: int) -> SieveDictionary:
    idx = ordered_indices(dim, max_terms, interaction_cap)
    return SieveDictionary(dim, max_terms, interaction_cap, tuple(idx))


def featurize(dictionary: SieveDictionary, Z) -> np.ndarray:
    """Design matrix with entry (i, j) equal to basis function j at row i."""
    if dictionary.scaler is None:
        raise DomainError("dictionary scaler has not been fitted")
    U = dictionary.scaler.transform(Z)
    idx = np.asarray(dictionary.indices, dtype=int)  # (J, d)
    j_max = int(idx.max())
    B = cosine_matrix(j_max, U)  # (n, d, j_max)
    out = np.ones((U.shape[0], len(dictionary.indices)))
    for k in range(dictionary.dim):
        col = idx[:, k]
        if np.all(col == 1):
            continue
        out *= B[:, k, col - 1]
    return out
