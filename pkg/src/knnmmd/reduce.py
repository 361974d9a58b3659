"""Time-axis standardization, flattening and principal-component reduction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from knnmmd.errors import DataError

log = logging.getLogger(__name__)

EPS_STD = 1e-8


def standardize_time(values: np.ndarray, eps: float = EPS_STD) -> np.ndarray:
    """Z-score every subcarrier column over the time axis.

    Works on a single ``(l, s)`` matrix or a stack ``(..., l, s)``.  Columns with
    zero variance map to zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 2:
        raise DataError("expected a (l, s) matrix or a stack of them")
    if values.shape[-2] < 2:
        raise DataError("time standardization needs at least 2 time steps")
    mean = values.mean(axis=-2, keepdims=True)
    std = values.std(axis=-2, keepdims=True)
    out = (values - mean) / (std + eps)
    constant = np.ptp(values, axis=-2, keepdims=True) == 0
    return np.where(constant, 0.0, out)


def flatten(values: np.ndarray) -> np.ndarray:
    """Row-major (time-major) flattening of ``(..., l, s)`` to ``(..., l*s)``."""
    values = np.asarray(values)
    return values.reshape(values.shape[:-2] + (values.shape[-2] * values.shape[-1],))


def unflatten(vec: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    vec = np.asarray(vec)
    return vec.reshape(vec.shape[:-1] + tuple(shape))


@dataclass(frozen=True)
class ReductionModel:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance_ratio: np.ndarray
    degenerate: bool = False

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def d_in(self) -> int:
        return self.basis.shape[0]


def clamp_dimension(d: int, X: np.ndarray) -> int:
    """Clamp ``d`` to ``min(d_in, n)``, warning when the request is too large."""
    n, d_in = np.shape(X)
    limit = min(n, d_in)
    if d > limit:
        warnings.warn(f"reduction dimension {d} exceeds min(d_in, n) = {limit}; "
                      f"using {limit}", stacklevel=2)
        return limit
    return d


def fit_reduction(X: np.ndarray, d: int) -> ReductionModel:
    """Fit the top-``d`` principal directions of ``X`` (``n x d_in``).

    Each basis column is sign-normalized so that its largest-magnitude entry is
    positive, which makes repeated fits on identical data identical.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("fit_reduction expects a 2-D matrix")
    n, d_in = X.shape
    if n < 2:
        raise DataError("fit_reduction needs at least 2 samples")
    if not 1 <= d <= min(d_in, n):
        raise DataError(f"d={d} out of range [1, {min(d_in, n)}]")
    mean = X.mean(axis=0)
    centered = X - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:d].T.copy()
    peak = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[peak, np.arange(d)])
    signs[signs == 0] = 1.0
    basis *= signs
    var = sing ** 2
    total = var.sum()
    degenerate = not total > 0
    if degenerate:
        log.warning("fit_reduction: all rows are equal; basis is arbitrary")
        ratio = np.zeros(d)
    else:
        ratio = var[:d] / total
    mean.flags.writeable = False
    basis.flags.writeable = False
    ratio.flags.writeable = False
    return ReductionModel(mean, basis, ratio, degenerate)


def project(model: ReductionModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.d_in:
        raise DataError(f"expected {model.d_in} columns, got {X.shape[-1]}")
    return (X - model.mean) @ model.basis
