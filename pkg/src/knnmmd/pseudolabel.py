"""KNN preliminary classification and confidence-ranked help-set construction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from knnmmd.dataset import LabeledSet
from knnmmd.errors import ConfigError, DataError

HELPSET_MODES = ("global", "per_class")


@dataclass(frozen=True)
class KnnConfig:
    k: int = 1
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("knn.k must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("knn.epsilon must be positive")


@dataclass(frozen=True)
class PseudoLabeled:
    index: int
    pseudo_label: int
    confidence: float


@dataclass(frozen=True)
class HelpSet:
    """Pseudo-labeled test samples kept for alignment.

    ``samples`` carries raw (unreduced) sample matrices with pseudo-labels;
    ``source_indices[i]`` is the test-set position of ``samples[i]``.
    """
    samples: LabeledSet | None
    source_indices: np.ndarray
    confidences: np.ndarray
    purity: float | None = None

    def __len__(self) -> int:
        return len(self.source_indices)

    @property
    def labels(self) -> np.ndarray:
        if self.samples is None:
            return np.zeros(0, dtype=np.int64)
        return self.samples.labels

    def with_purity(self, truth) -> "HelpSet":
        return HelpSet(self.samples, self.source_indices, self.confidences,
                       help_purity(self, truth))


def _distances(queries: np.ndarray, support: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - support[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def knn_classify_batch(queries, support_X, support_y, k: int):
    """Classify each query row against the support set.

    Returns ``(labels, distances)`` where ``distances[i]`` is the Euclidean
    distance from query ``i`` to the nearest support sample that carries the
    predicted label.  Label-count ties are resolved by the label of the single
    nearest neighbour.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    support_X = np.atleast_2d(np.asarray(support_X, dtype=np.float64))
    support_y = np.asarray(support_y, dtype=np.int64)
    if len(support_X) == 0:
        raise DataError("empty support set")
    if k > len(support_X):
        raise ConfigError(f"k={k} exceeds support size {len(support_X)}")
    if queries.shape[1] != support_X.shape[1]:
        raise DataError("query and support dimensions differ")
    dist = _distances(queries, support_X)
    # stable sort: equal distances keep support order
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    neigh = support_y[order]
    n_labels = int(support_y.max()) + 1
    labels = np.empty(len(queries), dtype=np.int64)
    for i in range(len(queries)):
        counts = np.bincount(neigh[i], minlength=n_labels)
        top = np.flatnonzero(counts == counts.max())
        labels[i] = top[0] if len(top) == 1 else neigh[i, 0]
    same = support_y[None, :] == labels[:, None]
    nearest = np.where(same, dist, np.inf).min(axis=1)
    return labels, nearest


def knn_classify(query, support_X, support_y, k: int) -> tuple[int, float]:
    labels, dists = knn_classify_batch(np.asarray(query)[None, :], support_X, support_y, k)
    return int(labels[0]), float(dists[0])


def confidence(distance, epsilon: float = 1e-8):
    """``1 / (distance + epsilon)``."""
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance < 0):
        raise DataError("distance must be nonnegative")
    out = 1.0 / (distance + epsilon)
    return float(out) if out.ndim == 0 else out


def help_size(p: float, n_test: int) -> int:
    # the epsilon guards against p*n/100 landing a hair below an integer
    return int(math.floor(p * n_test / 100.0 + 1e-9))


def rank_test_samples(support_X, support_y, test_X, cfg: KnnConfig) -> list[PseudoLabeled]:
    """Pseudo-label every test row, sorted by confidence (ties: ascending index)."""
    labels, dists = knn_classify_batch(test_X, support_X, support_y, cfg.k)
    conf = confidence(dists, cfg.epsilon)
    conf = np.atleast_1d(conf)
    order = np.lexsort((np.arange(len(conf)), -conf))
    return [PseudoLabeled(int(i), int(labels[i]), float(conf[i])) for i in order]


def build_help_set(support_X, support_y, test_X, raw_test: LabeledSet,
                   cfg: KnnConfig, p: float = 50.0, mode: str = "global") -> HelpSet:
    """Keep the top ``p`` percent most confident pseudo-labeled test samples.

    ``support_X`` / ``test_X`` are the reduced vectors used for KNN; the help
    set stores the matching raw samples from ``raw_test`` (same row order as
    ``test_X``).  Labels carried by ``raw_test`` are ignored.

    In ``per_class`` mode the top ``p`` percent is taken inside each
    pseudo-label category instead of over the whole test set.
    """
    if not 0 < p <= 100:
        raise ConfigError(f"top-p must lie in (0, 100], got {p}")
    if mode not in HELPSET_MODES:
        raise ConfigError(f"unknown help-set mode {mode!r}")
    test_X = np.atleast_2d(np.asarray(test_X, dtype=np.float64))
    if len(test_X) != len(raw_test):
        raise DataError("reduced and raw test sets differ in length")
    ranked = rank_test_samples(support_X, support_y, test_X, cfg)
    if mode == "global":
        chosen = ranked[:help_size(p, len(ranked))]
    else:
        chosen = []
        for c in sorted({r.pseudo_label for r in ranked}):
            members = [r for r in ranked if r.pseudo_label == c]
            chosen.extend(members[:help_size(p, len(members))])
        chosen.sort(key=lambda r: (-r.confidence, r.index))
    if not chosen:
        raise DataError(f"empty help set: top {p}% of {len(ranked)} test samples "
                        f"rounds down to zero")
    idx = np.array([r.index for r in chosen], dtype=np.int64)
    labels = np.array([r.pseudo_label for r in chosen], dtype=np.int64)
    conf = np.array([r.confidence for r in chosen])
    samples = LabeledSet(raw_test.values[idx], labels, raw_test.num_classes,
                         raw_test.domain)
    return HelpSet(samples, idx, conf)


def help_purity(help_set: HelpSet, truth) -> float:
    """Fraction of pseudo-labels that agree with ``truth[source_indices]``."""
    truth = np.asarray(truth)
    idx = help_set.source_indices
    if len(idx) == 0:
        raise DataError("empty help set has no purity")
    if idx.max() >= len(truth) or idx.min() < 0:
        raise DataError("help-set index out of range of the truth labels")
    return float(np.mean(truth[idx] == help_set.labels))


def empty_help_set() -> HelpSet:
    return HelpSet(None, np.zeros(0, dtype=np.int64), np.zeros(0))
