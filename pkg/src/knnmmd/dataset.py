"""Sample data model, on-disk table format, n-shot splits and synthetic domains.

A dataset file holds one sample per line, ``label,v_0,...,v_{l*s-1}``, with the
``(l, s)`` matrix flattened time-major.  A sidecar ``<name>.meta`` next to it
carries ``l=``, ``s=`` and ``classes=`` lines (plus an optional ``domain=``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np

from knnmmd.errors import DataError

PathLike = Union[str, Path]


class Sample(NamedTuple):
    values: np.ndarray
    label: int
    domain: str | None


class LabeledSet:
    """An immutable stack of equally shaped ``(l, s)`` samples with labels.

    Parameters
    ----------
    values
        Array of shape ``(n, l, s)``.
    labels
        Integer labels of shape ``(n,)`` in ``[0, num_classes)``.
    num_classes
        Number of categories ``M``.  Defaults to ``max(label) + 1``.
    domain
        Opaque domain tag shared by every sample (e.g. a person id).
    """

    def __init__(self, values, labels, num_classes: int | None = None,
                 domain: str | None = None):
        values = np.array(values, dtype=np.float64)
        labels = np.array(labels)
        if values.ndim != 3:
            raise DataError(f"values must have shape (n, l, s), got {values.shape}")
        n, l, s = values.shape
        if n == 0:
            raise DataError("a labeled set must be nonempty")
        if l < 1 or s < 1:
            raise DataError(f"sample shape must be at least 1x1, got {(l, s)}")
        if labels.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {labels.shape}")
        if labels.dtype.kind not in "iu":
            if labels.dtype.kind == "f" and np.all(labels == np.round(labels)):
                labels = labels.astype(np.int64)
            else:
                raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite value in samples")
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DataError(
                f"label out of range: labels must lie in [0, {num_classes})")
        values.flags.writeable = False
        labels.flags.writeable = False
        self.values = values
        self.labels = labels
        self.num_classes = int(num_classes)
        self.domain = domain

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.values[i], int(self.labels[i]), self.domain)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledSet):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.domain == other.domain
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.labels, other.labels))

    def __repr__(self) -> str:
        return (f"LabeledSet(n={len(self)}, shape={self.shape}, "
                f"num_classes={self.num_classes}, domain={self.domain!r})")

    def subset(self, indices) -> "LabeledSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.values[indices], self.labels[indices],
                          self.num_classes, self.domain)

    def with_labels(self, labels) -> "LabeledSet":
        return LabeledSet(self.values, labels, self.num_classes, self.domain)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# file format

def meta_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".meta")


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed metadata line {line!r}")
        meta[key.strip()] = value.strip()
    for key in ("l", "s", "classes"):
        if key not in meta:
            raise DataError(f"{path}: metadata is missing '{key}'")
    return meta


def load_labeled_set(path: PathLike) -> LabeledSet:
    """Read a dataset file and its ``.meta`` sidecar, preserving row order."""
    path = Path(path)
    mpath = meta_path(path)
    if not path.is_file():
        raise DataError(f"missing dataset file: {path}")
    if not mpath.is_file():
        raise DataError(f"missing metadata file: {mpath}")
    meta = _read_meta(mpath)
    try:
        l, s, m = int(meta["l"]), int(meta["s"]), int(meta["classes"])
    except ValueError as exc:
        raise DataError(f"{mpath}: non-integer metadata value") from exc
    width = l * s
    labels, rows = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != width + 1:
                raise DataError(
                    f"{path}:{lineno}: shape mismatch, expected {width} values "
                    f"for l={l}, s={s}, got {len(fields) - 1}")
            try:
                label = int(fields[0])
                row = np.array(fields[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparsable field") from exc
            if not np.all(np.isfinite(row)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if not 0 <= label < m:
                raise DataError(f"{path}:{lineno}: label out of range "
                                f"({label} not in [0, {m}))")
            labels.append(label)
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no samples")
    values = np.stack(rows).reshape(len(rows), l, s)
    return LabeledSet(values, labels, m, meta.get("domain") or None)


def write_labeled_set(dataset: LabeledSet, path: PathLike) -> None:
    path = Path(path)
    l, s = dataset.shape
    flat = dataset.values.reshape(len(dataset), l * s)
    lines = []
    for label, row in zip(dataset.labels, flat):
        # repr gives the shortest string that round-trips bit-for-bit
        lines.append(f"{int(label)}," + ",".join(map(repr, row.tolist())))
    meta = [f"l={l}", f"s={s}", f"classes={dataset.num_classes}"]
    if dataset.domain is not None:
        meta.append(f"domain={dataset.domain}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        meta_path(path).write_text("\n".join(meta) + "\n", encoding="utf-8",
                                   newline="\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# n-shot splits

@dataclass(frozen=True)
class SplitSpec:
    n_shots: int
    seed: int = 0
    per_class_cap: int | None = None

    def __post_init__(self):
        if self.n_shots < 1:
            raise DataError("n_shots must be >= 1")
        if self.per_class_cap is not None and self.per_class_cap < 1:
            raise DataError("per_class_cap must be a positive integer")


def split_indices(labels, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return sorted ``(support, test)`` index arrays for an n-shot split."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    support, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if spec.per_class_cap is not None and len(members) > spec.per_class_cap:
            members = np.sort(rng.choice(members, spec.per_class_cap, replace=False))
        if len(members) <= spec.n_shots:
            raise DataError(f"class {c} has {len(members)} samples, needs more "
                            f"than n_shots={spec.n_shots}")
        chosen = rng.choice(members, spec.n_shots, replace=False)
        support.append(chosen)
        test.append(np.setdiff1d(members, chosen))
    return np.sort(np.concatenate(support)), np.sort(np.concatenate(test))


def make_nshot_split(target: LabeledSet, spec: SplitSpec) -> tuple[LabeledSet, LabeledSet]:
    """Draw ``n_shots`` support samples per class; the rest form the test set."""
    present = np.flatnonzero(target.class_counts())
    if len(present) < target.num_classes:
        missing = sorted(set(range(target.num_classes)) - set(present.tolist()))
        raise DataError(f"classes {missing} have no samples in the target set")
    sup, tst = split_indices(target.labels, spec)
    return target.subset(sup), target.subset(tst)


# ---------------------------------------------------------------------------
# synthetic domain shift

@dataclass(frozen=True)
class Rotation:
    """Rotate every consecutive coordinate pair ``(2k, 2k+1)`` by ``angle`` radians."""
    angle: float

    def apply(self, means: np.ndarray) -> np.ndarray:
        out = means.copy()
        c, s = math.cos(self.angle), math.sin(self.angle)
        even = means[:, 0:means.shape[1] - 1:2]
        odd = means[:, 1::2]
        out[:, 0:2 * odd.shape[1]:2] = c * even[:, :odd.shape[1]] - s * odd
        out[:, 1::2] = s * even[:, :odd.shape[1]] + c * odd
        return out


@dataclass(frozen=True)
class Translation:
    vector: tuple[float, ...]

    def apply(self, means: np.ndarray) -> np.ndarray:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.shape != (means.shape[1],):
            raise DataError(f"translation needs {means.shape[1]} entries, "
                            f"got {vec.shape}")
        return means + vec


@dataclass(frozen=True)
class ClassPermutation:
    """Target class ``c`` takes the source structure of class ``mapping[c]``.

    With ``coords`` set, only those flattened coordinates are permuted and the
    rest of every class pattern is kept.
    """
    mapping: tuple[int, ...]
    coords: tuple[int, ...] | None = None

    def apply(self, means: np.ndarray) -> np.ndarray:
        mapping = np.asarray(self.mapping)
        if sorted(mapping.tolist()) != list(range(means.shape[0])):
            raise DataError(f"mapping {self.mapping} is not a permutation of "
                            f"{means.shape[0]} classes")
        if self.coords is None:
            return means[mapping]
        coords = np.asarray(self.coords, dtype=np.int64)
        out = means.copy()
        out[:, coords] = means[mapping][:, coords]
        return out


@dataclass(frozen=True)
class Composite:
    """Apply ``parts`` left to right."""
    parts: tuple

    def apply(self, means: np.ndarray) -> np.ndarray:
        for part in self.parts:
            means = part.apply(means)
        return means


@dataclass(frozen=True)
class Identity:
    def apply(self, means: np.ndarray) -> np.ndarray:
        return means.copy()


Transform = Union[Rotation, Translation, ClassPermutation, Composite, Identity]


@dataclass(frozen=True)
class SyntheticSpec:
    """Two Gaussian domains built around per-class mean patterns.

    ``class_means`` has one row of ``l * s`` entries (a flattened ``(l, s)``
    pattern) per class.  Target class means are ``transform(class_means)``.
    ``time_jitter > 0`` circularly shifts each drawn pattern along time by a
    uniform integer in ``[0, time_jitter]`` before noise is added.
    """
    num_classes: int
    dims: tuple[int, int]
    samples_per_class_source: int
    samples_per_class_target: int
    class_means: np.ndarray = field(repr=False)
    transform: Transform = Identity()
    noise_std: float = 1.0
    time_jitter: int = 0

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        l, s = self.dims
        if self.num_classes < 1 or l < 1 or s < 1:
            raise DataError("num_classes and dims must be positive")
        if means.shape != (self.num_classes, l * s):
            raise DataError(f"class_means must have shape "
                            f"{(self.num_classes, l * s)}, got {means.shape}")
        if self.samples_per_class_source < 1 or self.samples_per_class_target < 1:
            raise DataError("samples per class must be positive")
        if not self.noise_std >= 0:
            raise DataError("noise_std must be nonnegative")
        if self.time_jitter < 0:
            raise DataError("time_jitter must be nonnegative")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.array_equal(means[a], means[b]):
                    raise DataError(f"class means {a} and {b} coincide")
        object.__setattr__(self, "class_means", means)

    def target_means(self) -> np.ndarray:
        return self.transform.apply(self.class_means)


def grating_means(num_classes: int, dims: tuple[int, int], amplitude: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Class patterns as 2-D cosine gratings with distinct integer frequencies.

    Temporal frequencies are at least one cycle per sample so every subcarrier
    column has zero temporal mean, and distinct frequency pairs make the
    patterns mutually orthogonal.  Each pattern has RMS ``amplitude / sqrt(2)``.
    """
    l, s = dims
    cands = [(f, g) for f in range(1, max(2, l // 2)) for g in range(0, max(1, s // 2))]
    if len(cands) < num_classes:
        raise DataError(f"dims {dims} too small for {num_classes} distinct gratings")
    picks = rng.choice(len(cands), num_classes, replace=False)
    t = np.arange(l)[:, None] / l
    j = np.arange(s)[None, :] / s
    means = []
    for p in picks:
        f, g = cands[p]
        phase = rng.uniform(0, 2 * np.pi)
        means.append(amplitude * np.cos(2 * np.pi * (f * t + g * j) + phase).ravel())
    return np.array(means)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Draw ``(source, target)`` sets: class pattern plus isotropic Gaussian noise."""
    rng = np.random.default_rng(seed)
    l, s = spec.dims

    def draw(means, per_class, domain):
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        patterns = means[labels].reshape(len(labels), l, s)
        if spec.time_jitter:
            shifts = rng.integers(0, spec.time_jitter + 1, len(labels))
            patterns = np.stack([np.roll(p, k, axis=0) for p, k in zip(patterns, shifts)])
        if spec.noise_std:
            patterns = patterns + rng.normal(0.0, spec.noise_std, patterns.shape)
        return LabeledSet(patterns, labels, spec.num_classes, domain)

    source = draw(spec.class_means, spec.samples_per_class_source, "source")
    target = draw(spec.target_means(), spec.samples_per_class_target, "target")
    return source, target


def swap_scenario(num_classes: int = 4, dims: tuple[int, int] = (16, 8),
                  mapping: Sequence[int] | None = None, core_amplitude: float = 1.0,
                  spurious_amplitude: float = 2.0, noise_std: float = 1.0,
                  samples_per_class_source: int = 150,
                  samples_per_class_target: int = 60, time_jitter: int = 0,
                  seed: int = 0) -> SyntheticSpec:
    """Class-permutation trap with a shared core and a swapped spurious part.

    The first half of the subcarriers carries a core grating per class that is
    identical in both domains; the second half carries a stronger spurious
    grating whose class assignment is permuted by ``mapping`` in the target
    (cyclic shift by default).  Each part has the same marginal over classes
    in both domains, but the class-conditional structure is swapped, so
    aligning whole domains cannot fix it.
    """
    l, s = dims
    if s < 2:
        raise DataError("swap scenario needs at least 2 subcarriers")
    rng = np.random.default_rng(seed)
    core = grating_means(num_classes, dims, core_amplitude, rng).reshape(num_classes, l, s)
    spur = grating_means(num_classes, dims, spurious_amplitude, rng).reshape(num_classes, l, s)
    half = s // 2
    means = np.concatenate([core[:, :, :half], spur[:, :, half:]], axis=2)
    coords = np.flatnonzero(np.tile(np.arange(s) >= half, l))
    if mapping is None:
        mapping = tuple(range(1, num_classes)) + (0,)
    transform = ClassPermutation(tuple(int(m) for m in mapping), tuple(coords.tolist()))
    return SyntheticSpec(num_classes, dims, samples_per_class_source,
                         samples_per_class_target, means.reshape(num_classes, -1),
                         transform, noise_std, time_jitter)


def separable_scenario(num_classes: int, dims: tuple[int, int] = (16, 8),
                       separation: float = 4.0, noise_std: float = 1.0,
                       samples_per_class_source: int = 20,
                       samples_per_class_target: int = 60,
                       seed: int = 0) -> SyntheticSpec:
    """Well-separated classes with no domain shift.

    ``separation`` is the smallest RMS (per-entry) distance between two class
    means, in units of ``noise_std``.
    """
    l, s = dims
    rng = np.random.default_rng(seed)
    means = grating_means(num_classes, dims, 1.0, rng)
    gaps = [np.sqrt(np.mean((means[a] - means[b]) ** 2))
            for a in range(num_classes) for b in range(a + 1, num_classes)]
    scale = separation * noise_std / min(gaps) if gaps else separation * noise_std
    return SyntheticSpec(num_classes, dims, samples_per_class_source,
                         samples_per_class_target, means * scale, Identity(), noise_std)


def per_class_means(dataset: LabeledSet) -> np.ndarray:
    """Empirical flattened mean per class, shape ``(M, l*s)``."""
    flat = dataset.values.reshape(len(dataset), -1)
    return np.array([flat[dataset.labels == c].mean(axis=0)
                     for c in range(dataset.num_classes)])


def concat(sets: Sequence[LabeledSet]) -> LabeledSet:
    return LabeledSet(np.concatenate([d.values for d in sets]),
                      np.concatenate([d.labels for d in sets]),
                      max(d.num_classes for d in sets), sets[0].domain)
