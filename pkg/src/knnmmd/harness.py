"""End-to-end experiment runner, baselines, multi-seed suites and reports.

A run is split into three stages so that test ground truth is only touched
at the end:

* ``prepare``: load or generate data, standardize, split off the support set,
  and separate the test labels from the test samples;
* ``execute``: everything a deployed system could do (reduction, help set,
  training, prediction) without the test labels;
* ``score``: compare predictions against the withheld labels.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from knnmmd.dataset import (LabeledSet, SplitSpec, SyntheticSpec, gen_synthetic,
                            load_labeled_set, make_nshot_split)
from knnmmd.errors import ConfigError, DataError, DivergenceError
from knnmmd.net import Network
from knnmmd.pseudolabel import (HELPSET_MODES, HelpSet, KnnConfig, build_help_set,
                                help_purity, knn_classify_batch)
from knnmmd.reduce import clamp_dimension, fit_reduction, flatten, project, standardize_time
from knnmmd.train import FitResult, TrainConfig, fit, predict_logits

log = logging.getLogger(__name__)

METHODS = ("knn_mmd", "knn_only", "no_alignment", "global_mmd_only",
           "finetune_ablation", "oracle_upper_bound")
REPORT_HEADER = "method,n_shots,seed,test_acc,help_purity,stop_epoch,wall_ms"
SERIES_HEADER = "method,n_shots,runs,acc_min,acc_mean,acc_max"

# desk-scale training schedule used for synthetic scenarios
DESK_TRAIN = TrainConfig.desk_scale(lr=2e-3, batch_size=32)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  Data comes from ``synthetic`` or from two files.

    ``seed`` drives the synthetic draw, the support split (unless
    ``split_seed`` is given) and network training.  ``finetune_epochs``
    bounds the second phase of ``finetune_ablation``; ``None`` reuses the
    training schedule.
    """
    synthetic: SyntheticSpec | None = None
    source_path: str | None = None
    target_path: str | None = None
    n_shots: int = 1
    knn: KnnConfig = KnnConfig()
    d: int = 128
    top_p: float = 50.0
    helpset_mode: str = "global"
    train: TrainConfig = DESK_TRAIN
    method: str = "knn_mmd"
    repeats: int = 1
    seed: int = 0
    split_seed: int | None = None
    standardize: bool = True
    finetune_epochs: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        has_files = self.source_path is not None or self.target_path is not None
        if (self.synthetic is None) == (not has_files):
            if self.synthetic is None:
                raise ConfigError("no data source: give a synthetic spec or source/target paths")
            raise ConfigError("give either a synthetic spec or data paths, not both")
        if has_files and (self.source_path is None or self.target_path is None):
            raise ConfigError("file data needs both a source and a target path")
        if self.n_shots < 1:
            raise ConfigError("split.n_shots must be >= 1")
        if self.d < 1:
            raise ConfigError("reduce.d must be >= 1")
        if not 0 < self.top_p <= 100:
            raise ConfigError(f"helpset.top_p must lie in (0, 100], got {self.top_p}")
        if self.helpset_mode not in HELPSET_MODES:
            raise ConfigError(f"unknown help-set mode {self.helpset_mode!r}")
        if self.repeats < 1:
            raise ConfigError("run.repeats must be >= 1")
        if self.finetune_epochs is not None and self.finetune_epochs < 0:
            raise ConfigError("finetune epochs must be nonnegative")

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    n_shots: int
    seed: int
    test_accuracy: float
    help_purity: float | None
    per_class_accuracy: tuple[float, ...]
    stop_epoch: int
    wall_time: float

    def __post_init__(self):
        for a in (self.test_accuracy, *self.per_class_accuracy):
            if not (0.0 <= a <= 1.0 or math.isnan(a)):
                raise DataError(f"accuracy {a} outside [0, 1]")

    def same_result(self, other: "MetricsRecord") -> bool:
        """Equality on every field except ``wall_time``."""
        return replace(self, wall_time=0.0) == replace(other, wall_time=0.0)


# ---------------------------------------------------------------------------
# stages

@contextlib.contextmanager
def stage(name: str):
    """Prefix module errors raised inside the block with the stage name."""
    try:
        yield
    except (ConfigError, DataError, DivergenceError) as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


@dataclass(frozen=True)
class Prepared:
    """Inputs of a run.  ``test`` carries placeholder labels; the real ones
    live in ``truth`` and are meant for ``score`` only."""
    source: LabeledSet
    support: LabeledSet
    test: LabeledSet
    truth: np.ndarray
    num_classes: int


@dataclass
class Outcome:
    predictions: np.ndarray
    help_set: HelpSet | None = None
    fit_result: FitResult | None = None
    stop_epoch: int = 0


def _standardized(data: LabeledSet) -> LabeledSet:
    return LabeledSet(standardize_time(data.values), data.labels, data.num_classes, data.domain)


def load_domains(cfg: ExperimentConfig) -> tuple[LabeledSet, LabeledSet]:
    if cfg.synthetic is not None:
        return gen_synthetic(cfg.synthetic, cfg.seed)
    return load_labeled_set(cfg.source_path), load_labeled_set(cfg.target_path)


def prepare(cfg: ExperimentConfig) -> Prepared:
    with stage("dataset"):
        source, target = load_domains(cfg)
        if source.shape != target.shape:
            raise DataError(f"source shape {source.shape} differs from target {target.shape}")
        m = max(source.num_classes, target.num_classes)
        support, test = make_nshot_split(target, SplitSpec(cfg.n_shots, cfg.effective_split_seed))
    with stage("reduce"):
        if cfg.standardize:
            source, support, test = map(_standardized, (source, support, test))
    truth = test.labels.copy()
    truth.flags.writeable = False
    blind = LabeledSet(test.values, np.zeros(len(test), dtype=np.int64), m, test.domain)
    return Prepared(source, support, blind, truth, m)


def withhold_labels(prep: Prepared) -> Prepared:
    """Replace the test truth by a sentinel that ``score`` refuses to use."""
    return replace(prep, truth=np.full(len(prep.truth), -1, dtype=np.int64))


def _reduced(prep: Prepared, cfg: ExperimentConfig):
    Xs, Xt = flatten(prep.support.values), flatten(prep.test.values)
    pooled = np.vstack([Xs, Xt])
    model = fit_reduction(pooled, clamp_dimension(cfg.d, pooled))
    return project(model, Xs), project(model, Xt)


def _retarget(help_set: HelpSet, labels: np.ndarray) -> HelpSet:
    return HelpSet(help_set.samples.with_labels(labels), help_set.source_indices,
                   help_set.confidences)


def _argmax_predictions(net: Network, data: LabeledSet) -> np.ndarray:
    return np.argmax(predict_logits(net, data.values), axis=1)


def execute(prep: Prepared, cfg: ExperimentConfig,
            oracle_labels: np.ndarray | None = None) -> Outcome:
    """Run the selected method without looking at test labels.

    ``oracle_labels`` is only consulted by ``oracle_upper_bound``, whose help
    set deliberately carries ground-truth labels.
    """
    method = cfg.method
    with stage("pseudolabel"):
        needs_knn = method in ("knn_mmd", "knn_only", "global_mmd_only",
                               "finetune_ablation", "oracle_upper_bound")
        if needs_knn:
            zs, zt = _reduced(prep, cfg)
        if method == "knn_only":
            labels, _ = knn_classify_batch(zt, zs, prep.support.labels, cfg.knn.k)
            return Outcome(labels)
        help_set = None
        if method in ("knn_mmd", "finetune_ablation", "oracle_upper_bound"):
            help_set = build_help_set(zs, prep.support.labels, zt, prep.test, cfg.knn,
                                      cfg.top_p, cfg.helpset_mode)
        elif method == "global_mmd_only":
            help_set = build_help_set(zs, prep.support.labels, zt, prep.test, cfg.knn, 100.0)
        if method == "oracle_upper_bound":
            if oracle_labels is None:
                raise DataError("oracle_upper_bound needs ground-truth labels")
            help_set = _retarget(help_set, np.asarray(oracle_labels)[help_set.source_indices])

    train_cfg = cfg.train.with_(seed=cfg.seed)
    with stage("train"):
        if method == "finetune_ablation":
            result = run_finetune_phases(prep, help_set, train_cfg, cfg.finetune_epochs)
        else:
            if method == "no_alignment":
                train_cfg = train_cfg.with_(alpha1=0.0, alpha2=0.0)
            elif method == "global_mmd_only":
                train_cfg = train_cfg.with_(alpha1=0.0)
            result = fit(prep.source, help_set, prep.support, train_cfg)
        preds = _argmax_predictions(result.network, prep.test)
    return Outcome(preds, help_set, result, result.stop_epoch)


def run_finetune_phases(prep: Prepared, help_set: HelpSet, cfg: TrainConfig,
                        finetune_epochs: int | None = None) -> FitResult:
    """Cross-entropy on the source, then cross-entropy on the help set.

    Both phases use the same early-stop controller on the support set.  With
    ``finetune_epochs == 0`` the second phase is skipped.
    """
    plain = cfg.with_(alpha1=0.0, alpha2=0.0)
    first = fit(prep.source, None, prep.support, plain)
    if finetune_epochs == 0:
        return first
    if len(help_set) < 2:
        raise DataError("fine-tuning needs at least 2 help samples")
    second_cfg = plain
    if finetune_epochs is not None:
        second_cfg = plain.with_(e_max=finetune_epochs,
                                 e_min=min(plain.e_min, finetune_epochs - 1))
    second = fit(help_set.samples, None, prep.support, second_cfg, network=first.network)
    second.history = first.history + second.history
    return second


def score(prep: Prepared, outcome: Outcome) -> tuple[float, tuple[float, ...], float | None]:
    """``(test accuracy, per-class accuracies, help purity)`` from the truth."""
    truth = prep.truth
    if len(truth) != len(outcome.predictions):
        raise DataError("prediction count does not match test size")
    if np.any(truth < 0) or np.any(truth >= prep.num_classes):
        raise DataError("test labels are withheld or invalid; refusing to score")
    correct = outcome.predictions == truth
    per_class = tuple(float(correct[truth == c].mean()) if np.any(truth == c) else float("nan")
                      for c in range(prep.num_classes))
    purity = None
    if outcome.help_set is not None:
        purity = help_purity(outcome.help_set, truth)
    return float(correct.mean()), per_class, purity


def run_experiment(cfg: ExperimentConfig) -> MetricsRecord:
    start = time.perf_counter()
    prep = prepare(cfg)
    oracle = prep.truth if cfg.method == "oracle_upper_bound" else None
    outcome = execute(prep, cfg, oracle)
    with stage("evaluate"):
        acc, per_class, purity = score(prep, outcome)
    return MetricsRecord(cfg.method, cfg.n_shots, cfg.seed, acc, purity, per_class,
                         outcome.stop_epoch, time.perf_counter() - start)


def run_baseline_finetune(cfg: ExperimentConfig) -> MetricsRecord:
    return run_experiment(cfg.with_(method="finetune_ablation"))


# ---------------------------------------------------------------------------
# suites

def derive_seeds(base_seed: int, repeats: int) -> list[int]:
    """``repeats`` distinct seeds from one base seed."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    seeds: list[int] = []
    children = np.random.SeedSequence(base_seed).spawn(repeats)
    for child in children:
        s = int(child.generate_state(1, dtype=np.uint32)[0])
        while s in seeds:
            s = (s + 1) % 2 ** 32
        seeds.append(s)
    return seeds


@dataclass(frozen=True)
class Aggregate:
    runs: int
    acc_min: float
    acc_mean: float
    acc_max: float

    @property
    def spread(self) -> float:
        return self.acc_max - self.acc_min


@dataclass(frozen=True)
class RunStatus:
    method: str
    seed: int
    ok: bool
    error: str = ""


@dataclass
class SuiteResult:
    records: list[MetricsRecord] = field(default_factory=list)
    statuses: list[RunStatus] = field(default_factory=list)

    @property
    def failures(self) -> list[RunStatus]:
        return [s for s in self.statuses if not s.ok]

    def aggregates(self) -> dict[tuple[str, int], Aggregate]:
        return aggregate(self.records)


def aggregate(records: Iterable[MetricsRecord]) -> dict[tuple[str, int], Aggregate]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in records:
        groups.setdefault((r.method, r.n_shots), []).append(r.test_accuracy)
    return {key: Aggregate(len(v), min(v), float(np.mean(v)), max(v))
            for key, v in sorted(groups.items())}


def run_suite(cfgs: Sequence[ExperimentConfig], repeats: int | None = None,
              vary: str = "seed") -> SuiteResult:
    """Run every config for ``repeats`` derived seeds (default ``cfg.repeats``).

    ``vary="seed"`` reseeds the whole run; ``vary="split"`` keeps data and
    training fixed and only redraws the support set.  Failed runs are
    recorded in ``statuses`` instead of aborting the suite.
    """
    if vary not in ("seed", "split"):
        raise ConfigError("vary must be 'seed' or 'split'")
    out = SuiteResult()
    for cfg in cfgs:
        n = cfg.repeats if repeats is None else repeats
        for s in derive_seeds(cfg.seed, n):
            run_cfg = cfg.with_(seed=s) if vary == "seed" else cfg.with_(split_seed=s)
            try:
                rec = run_experiment(run_cfg)
            except (ConfigError, DataError, DivergenceError) as exc:
                log.warning("run %s seed %d failed: %s", cfg.method, s, exc)
                out.statuses.append(RunStatus(cfg.method, s, False, f"{type(exc).__name__}: {exc}"))
                continue
            out.records.append(rec)
            out.statuses.append(RunStatus(cfg.method, s, True))
    return out


# ---------------------------------------------------------------------------
# reports

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def report_text(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    for r in records:
        buf.write(",".join([r.method, str(r.n_shots), str(r.seed), _fmt(r.test_accuracy),
                            _fmt(r.help_purity), str(r.stop_epoch),
                            str(int(round(r.wall_time * 1000)))]) + "\n")
    return buf.getvalue()


def series_text(records: Sequence[MetricsRecord]) -> str:
    lines = [SERIES_HEADER]
    for (method, n), agg in aggregate(records).items():
        lines.append(f"{method},{n},{agg.runs},{agg.acc_min!r},{agg.acc_mean!r},{agg.acc_max!r}")
    return "\n".join(lines) + "\n"


def series_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".series.csv")


def emit_report(records: Sequence[MetricsRecord], path) -> None:
    """Write the per-run CSV and an accuracy-vs-n_shots series next to it."""
    if not records:
        raise DataError("no records to report")
    path = Path(path)
    try:
        path.write_text(report_text(records), encoding="utf-8", newline="\n")
        series_path(path).write_text(series_text(records), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc


def read_report(path) -> list[MetricsRecord]:
    """Parse a report CSV.  Per-class accuracies are not part of the file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing report file: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]) != REPORT_HEADER:
        raise DataError(f"{path}: not a report file (bad header)")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            method, n, seed, acc, purity, stop, wall = row
            records.append(MetricsRecord(method, int(n), int(seed), float(acc),
                                         float(purity) if purity else None, (),
                                         int(stop), int(wall) / 1000.0))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed report row") from exc
    return records
