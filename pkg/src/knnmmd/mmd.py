"""Kernels, the multiple-kernel MMD estimator, and its analytic gradients.

The estimator is the biased V-statistic::

    MK-MMD^2 = sum_h beta_h [ mean K_h(X, X) - 2 mean K_h(X, Y) + mean K_h(Y, Y) ]

with self-pairs included.  ``local_mmd`` averages it over categories present in
both batches; ``global_mmd`` applies it to the full batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from knnmmd.errors import ConfigError, DataError

FAMILIES = ("gaussian", "laplacian")


@dataclass(frozen=True)
class Kernel:
    family: str
    sigma: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}")
        if not self.sigma > 0:
            raise ConfigError("kernel bandwidth must be positive")

    def __call__(self, x1, x2) -> float:
        x1 = np.atleast_1d(np.asarray(x1, dtype=np.float64))
        x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
        if x1.shape != x2.shape:
            raise DataError("kernel arguments differ in dimension")
        return float(self.matrix(x1[None, :], x2[None, :])[0, 0])

    def matrix(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Kernel matrix ``K[i, j] = k(X[i], Y[j])``."""
        if self.family == "gaussian":
            sq = (np.einsum("ij,ij->i", X, X)[:, None]
                  + np.einsum("ij,ij->i", Y, Y)[None, :] - 2.0 * X @ Y.T)
            np.maximum(sq, 0.0, out=sq)
            return np.exp(-sq / (2.0 * self.sigma ** 2))
        l1 = np.abs(X[:, None, :] - Y[None, :, :]).sum(axis=2)
        return np.exp(-l1 / self.sigma)

    def grad_first(self, K: np.ndarray, W, A: np.ndarray, B: np.ndarray):
        """``sum_j W[i, j] * d k(A[i], B[j]) / d A[i]`` for every row ``i``.

        ``K`` is the precomputed ``matrix(A, B)``; ``W`` may be a scalar.
        """
        WK = W * K
        if self.family == "gaussian":
            return (WK @ B - WK.sum(axis=1)[:, None] * A) / self.sigma ** 2
        sign = np.sign(B[None, :, :] - A[:, None, :])
        return np.einsum("ij,ijk->ik", WK, sign) / self.sigma


@dataclass(frozen=True)
class KernelBank:
    kernels: tuple[Kernel, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise ConfigError("a kernel bank needs at least one kernel")
        if len(self.weights) != len(self.kernels):
            raise ConfigError("one weight per kernel is required")
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("kernel weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, kernels: Sequence[Kernel]) -> "KernelBank":
        kernels = tuple(kernels)
        return cls(kernels, tuple([1.0 / len(kernels)] * len(kernels)))

    @classmethod
    def parse(cls, text: str) -> "KernelBank":
        """Parse ``"gaussian:0.5,gaussian:1.0"`` into a uniformly weighted bank."""
        kernels = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            family, sep, sigma = item.partition(":")
            if not sep:
                raise ConfigError(f"kernel spec {item!r} must look like family:sigma")
            try:
                kernels.append(Kernel(family.strip().lower(), float(sigma)))
            except ValueError as exc:
                raise ConfigError(f"bad bandwidth in kernel spec {item!r}") from exc
        if not kernels:
            raise ConfigError("empty kernel specification")
        return cls.uniform(kernels)

    def describe(self) -> str:
        return ",".join(f"{k.family}:{k.sigma!r}" for k in self.kernels)


DEFAULT_BANK = KernelBank.uniform([Kernel("gaussian", 0.5), Kernel("gaussian", 1.0)])


def _check_pair(X, Y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) == 0 or len(Y) == 0:
        raise DataError("MMD needs nonempty inputs")
    if X.shape[1] != Y.shape[1]:
        raise DataError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _cross(kern: Kernel, X, Y) -> np.ndarray:
    # always evaluate the cross matrix in one canonical orientation so the
    # estimator is bitwise symmetric in its arguments
    if (X.shape, X.tobytes()) <= (Y.shape, Y.tobytes()):
        return kern.matrix(X, Y)
    return kern.matrix(Y, X).T


def mk_mmd2(bank: KernelBank, X, Y) -> float:
    X, Y = _check_pair(X, Y)
    total = 0.0
    for beta, kern in zip(bank.weights, bank.kernels):
        if beta == 0:
            continue
        total += beta * ((kern.matrix(X, X).mean() + kern.matrix(Y, Y).mean())
                         - 2.0 * _cross(kern, X, Y).mean())
    return max(total, 0.0)


def mk_mmd2_with_grad(bank: KernelBank, X, Y):
    """Return ``(value, dX, dY)`` in one pass over the kernel matrices."""
    X, Y = _check_pair(X, Y)
    n, m = len(X), len(Y)
    total = 0.0
    gX = np.zeros_like(X)
    gY = np.zeros_like(Y)
    for beta, kern in zip(bank.weights, bank.kernels):
        if beta == 0:
            continue
        Kxx, Kxy, Kyy = kern.matrix(X, X), _cross(kern, X, Y), kern.matrix(Y, Y)
        total += beta * ((Kxx.mean() + Kyy.mean()) - 2.0 * Kxy.mean())
        # each self-pair term appears twice (as first and as second argument)
        gX += beta * (kern.grad_first(Kxx, 2.0 / n ** 2, X, X)
                      - kern.grad_first(Kxy, 2.0 / (n * m), X, Y))
        gY += beta * (kern.grad_first(Kyy, 2.0 / m ** 2, Y, Y)
                      - kern.grad_first(Kxy.T, 2.0 / (n * m), Y, X))
    return max(total, 0.0), gX, gY


def mmd_grad(bank: KernelBank, X, Y) -> tuple[np.ndarray, np.ndarray]:
    _, gX, gY = mk_mmd2_with_grad(bank, X, Y)
    return gX, gY


def global_mmd(bank: KernelBank, E_train, E_help) -> float:
    return mk_mmd2(bank, E_train, E_help)


def global_mmd_with_grad(bank: KernelBank, E_train, E_help):
    return mk_mmd2_with_grad(bank, E_train, E_help)


def local_mmd_with_grad(bank: KernelBank, E_train, y_train, E_help, y_help,
                        num_classes: int):
    """Category-wise MK-MMD averaged over categories present on both sides.

    Returns ``(value, dE_train, dE_help, contributing)``; the value is 0 with
    zero gradients when no category contributes.
    """
    if y_train is None or y_help is None:
        raise DataError("local MMD needs labeled batches")
    E_train, E_help = _check_pair(E_train, E_help)
    y_train = np.asarray(y_train)
    y_help = np.asarray(y_help)
    if len(y_train) != len(E_train) or len(y_help) != len(E_help):
        raise DataError("label count does not match embedding count")
    gT = np.zeros_like(E_train)
    gH = np.zeros_like(E_help)
    total = 0.0
    contributing = []
    for c in range(num_classes):
        it = np.flatnonzero(y_train == c)
        ih = np.flatnonzero(y_help == c)
        if len(it) == 0 or len(ih) == 0:
            continue
        v, g1, g2 = mk_mmd2_with_grad(bank, E_train[it], E_help[ih])
        total += v
        gT[it] += g1
        gH[ih] += g2
        contributing.append(c)
    if not contributing:
        return 0.0, gT, gH, contributing
    k = len(contributing)
    return total / k, gT / k, gH / k, contributing


def local_mmd(bank: KernelBank, E_train, y_train, E_help, y_help, num_classes: int) -> float:
    return local_mmd_with_grad(bank, E_train, y_train, E_help, y_help, num_classes)[0]
