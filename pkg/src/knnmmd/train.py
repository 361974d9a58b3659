"""Composite-loss training with support-set early stopping.

The objective per step is::

    L = CE(train logits) + alpha1 * local_mmd(E_train, E_help) + alpha2 * global_mmd(E_train, E_help)

The support set never enters a gradient; it only drives the early-stop tracker.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from knnmmd.dataset import LabeledSet
from knnmmd.errors import ConfigError, DataError, DivergenceError
from knnmmd.mmd import DEFAULT_BANK, KernelBank, global_mmd_with_grad, local_mmd_with_grad
from knnmmd.net import (EVAL, TRAIN, Adam, Architecture, ForwardTrace, Network,
                        ParamSnapshot, accuracy, add_grads, cross_entropy,
                        cross_entropy_grad)
from knnmmd.pseudolabel import HelpSet

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,total,cls,local,global,support_loss,support_acc,snapshot_taken"


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    lr: float = 5e-4
    batch_size: int = 256
    e_min: int = 200
    e_max: int = 350
    e_threshold: int = 30
    relax_alpha: float = 1.2
    relax_beta: float = 0.8
    seed: int = 0
    bank: KernelBank = DEFAULT_BANK

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if not self.e_min < self.e_max:
            raise ConfigError(f"e_min ({self.e_min}) must be below e_max ({self.e_max})")
        if self.e_threshold < 1:
            raise ConfigError("e_threshold must be >= 1")
        if self.relax_alpha < 1:
            raise ConfigError("loss relaxation factor must be >= 1")
        if self.relax_beta > 1:
            raise ConfigError("accuracy relaxation factor must be <= 1")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Shorter epoch schedule for small synthetic problems."""
        base = dict(e_min=30, e_max=60, e_threshold=10)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossParts:
    total: float
    cls: float
    local: float
    global_: float


def combined_loss(trace_train: ForwardTrace, y_train, trace_help: ForwardTrace | None,
                  y_help, cfg: TrainConfig, num_classes: int):
    """Return ``(LossParts, d_logits_train, d_emb_train, d_emb_help)``.

    The classification term sees the train batch only.  With an empty help
    batch both MMD terms are 0.
    """
    y_train = np.asarray(y_train)
    if len(y_train) != len(trace_train.logits):
        raise DataError("train labels do not match the train batch")
    cls = cross_entropy(trace_train.logits, y_train)
    d_logits = cross_entropy_grad(trace_train.logits, y_train)
    d_emb_train = np.zeros_like(trace_train.embeddings)
    d_emb_help = None
    local = glob = 0.0
    if trace_help is not None and len(trace_help.embeddings) > 0:
        E_t, E_h = trace_train.embeddings, trace_help.embeddings
        if E_t.shape[1] != E_h.shape[1]:
            raise DataError("train and help embeddings differ in width")
        d_emb_help = np.zeros_like(E_h)
        if cfg.alpha1 > 0:
            local, gt, gh, _ = local_mmd_with_grad(cfg.bank, E_t, y_train, E_h,
                                                   y_help, num_classes)
            d_emb_train += cfg.alpha1 * gt
            d_emb_help += cfg.alpha1 * gh
        if cfg.alpha2 > 0:
            glob, gt, gh = global_mmd_with_grad(cfg.bank, E_t, E_h)
            d_emb_train += cfg.alpha2 * gt
            d_emb_help += cfg.alpha2 * gh
    total = cls + cfg.alpha1 * local + cfg.alpha2 * glob
    return LossParts(total, cls, local, glob), d_logits, d_emb_train, d_emb_help


# ---------------------------------------------------------------------------
# batches

def stratified_draw(labels, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``min(size, len(labels))`` indices without replacement, class-balanced.

    Every present class gets ``size // C`` slots; the remainder goes to randomly
    chosen classes.  Slots a small class cannot fill are handed to the others.
    """
    labels = np.asarray(labels)
    size = min(size, len(labels))
    classes = np.unique(labels)
    pools = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    quota = {c: 0 for c in classes}
    remaining = size
    open_classes = list(classes)
    while remaining > 0:
        open_classes = [c for c in open_classes if quota[c] < len(pools[c])]
        share, extra = divmod(remaining, len(open_classes))
        lucky = set(rng.choice(open_classes, extra, replace=False).tolist()) if extra else set()
        for c in open_classes:
            want = share + (1 if c in lucky else 0)
            take = min(want, len(pools[c]) - quota[c])
            quota[c] += take
            remaining -= take
    idx = np.concatenate([pools[c][:quota[c]] for c in classes])
    return np.sort(idx)


def make_step_batches(train: LabeledSet, help_set: HelpSet | None, batch_size: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays for one step: a stratified train batch and help batch."""
    t_idx = stratified_draw(train.labels, batch_size, rng)
    if help_set is None or len(help_set) == 0:
        return t_idx, np.zeros(0, dtype=np.int64)
    return t_idx, stratified_draw(help_set.labels, batch_size, rng)


def epoch_batches(labels, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split one pass over ``labels`` into stratified batches of near-equal size."""
    labels = np.asarray(labels)
    n = len(labels)
    steps = max(1, math.ceil(n / batch_size))
    queues = [list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    order = []
    while any(queues):
        live = [q for q in queues if q]
        for j in rng.permutation(len(live)):
            order.append(live[j].pop())
    return [np.sort(np.array(b, dtype=np.int64)) for b in np.array_split(order, steps)]


# ---------------------------------------------------------------------------
# early stopping

@dataclass
class EarlyStopState:
    loss_best: float = math.inf
    acc_best: float = 0.0
    e_loss: int = 1
    e_acc: int = 1
    best_params: ParamSnapshot | None = None
    best_epoch: int = 0


def early_stop_update(state: EarlyStopState, epoch: int, support_loss: float,
                      support_acc: float, snapshot: Callable[[], object],
                      cfg: TrainConfig) -> tuple[bool, bool]:
    """Advance the tracker by one epoch; returns ``(stop, snapshot_taken)``.

    ``snapshot`` is called at most once even when accuracy and loss both
    improve.  Epochs are counted from 1.
    """
    improved = False
    if support_acc >= state.acc_best:
        state.acc_best = support_acc
        state.e_acc = 1
        improved = True
    else:
        state.e_acc += 1
    if support_loss <= state.loss_best:
        state.loss_best = support_loss
        state.e_loss = 1
        improved = True
    else:
        state.e_loss += 1
    if improved:
        state.best_params = snapshot()
        state.best_epoch = epoch
    if epoch == cfg.e_min:
        state.loss_best *= cfg.relax_alpha
        state.acc_best *= cfg.relax_beta
        state.e_acc = state.e_loss = 1
    stop = (epoch > cfg.e_min and state.e_loss > cfg.e_threshold
            and state.e_acc > cfg.e_threshold)
    return stop or epoch >= cfg.e_max, improved


# ---------------------------------------------------------------------------
# fit

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    cls_loss: float
    local_mmd: float
    global_mmd: float
    support_loss: float
    support_acc: float
    snapshot_taken: bool
    stopped: bool

    def csv_row(self) -> str:
        return ",".join([str(self.epoch), repr(self.train_loss), repr(self.cls_loss),
                         repr(self.local_mmd), repr(self.global_mmd),
                         repr(self.support_loss), repr(self.support_acc),
                         str(int(self.snapshot_taken))])


@dataclass
class FitResult:
    network: Network
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def stop_epoch(self) -> int:
        return self.history[-1].epoch if self.history else 0


def evaluate(net: Network, data: LabeledSet, batch_size: int = 512) -> tuple[float, float]:
    """Eval-mode ``(cross_entropy, accuracy)`` over a whole labeled set."""
    logits = predict_logits(net, data.values, batch_size)
    return cross_entropy(logits, data.labels), accuracy(logits, data.labels)


def predict_logits(net: Network, values, batch_size: int = 512) -> np.ndarray:
    parts = [net.forward(values[i:i + batch_size], EVAL).logits
             for i in range(0, len(values), batch_size)]
    return np.concatenate(parts)


def fit(train: LabeledSet, help_set: HelpSet | None, support: LabeledSet,
        cfg: TrainConfig, network: Network | None = None,
        metrics_path: str | Path | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Train on ``train`` (+ help-set alignment), early-stopped on ``support``.

    The returned network carries the tracker's best snapshot, never the live
    parameters of the last epoch.
    """
    if len(train) < 2:
        raise DataError("training needs at least 2 samples")
    if support.shape != train.shape:
        raise DataError("support and train sample shapes differ")
    use_help = help_set is not None and len(help_set) > 0 and (cfg.alpha1 > 0 or cfg.alpha2 > 0)
    if use_help:
        if help_set.samples.shape != train.shape:
            raise DataError("help and train sample shapes differ")
        if len(help_set) < 2:
            raise DataError("the help set needs at least 2 samples")
    num_classes = max(train.num_classes, support.num_classes)
    if network is None:
        network = Network(Architecture(train.shape, num_classes), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(network)
    state = EarlyStopState()
    result = FitResult(network)
    metrics = None
    if metrics_path is not None:
        metrics = Path(metrics_path).open("w", encoding="utf-8", newline="\n")
        metrics.write(METRICS_HEADER + "\n")
    try:
        for epoch in range(1, cfg.e_max + 1):
            sums = np.zeros(4)
            batches = epoch_batches(train.labels, cfg.batch_size, rng)
            for step, t_idx in enumerate(batches):
                tr = network.forward(train.values[t_idx], TRAIN)
                hr = h_idx = None
                if use_help:
                    h_idx = stratified_draw(help_set.labels, cfg.batch_size, rng)
                    hr = network.forward(help_set.samples.values[h_idx], TRAIN)
                parts, d_log, d_et, d_eh = combined_loss(
                    tr, train.labels[t_idx], hr,
                    None if h_idx is None else help_set.labels[h_idx], cfg, num_classes)
                if not math.isfinite(parts.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
                grads = network.backward(tr, d_log, d_et)
                if hr is not None:
                    grads = add_grads(grads, network.backward(hr, None, d_eh))
                opt.step(network, grads, cfg.lr)
                sums += (parts.cls, parts.local, parts.global_, 1.0)
            cls_m, loc_m, glob_m = sums[:3] / sums[3]
            s_loss, s_acc = evaluate(network, support)
            if not math.isfinite(s_loss):
                raise DivergenceError(f"non-finite support loss at epoch {epoch}")
            stop, took = early_stop_update(state, epoch, s_loss, s_acc,
                                           network.snapshot, cfg)
            rec = EpochRecord(epoch, cls_m + cfg.alpha1 * loc_m + cfg.alpha2 * glob_m,
                              cls_m, loc_m, glob_m, s_loss, s_acc, took, stop)
            result.history.append(rec)
            if metrics is not None:
                metrics.write(rec.csv_row() + "\n")
                metrics.flush()
            if on_epoch is not None:
                on_epoch(rec)
            log.debug("epoch %d loss %.4f support acc %.3f", epoch, rec.train_loss, s_acc)
            if stop:
                break
    finally:
        if metrics is not None:
            metrics.close()
    if state.best_params is not None:
        network.restore(state.best_params)
    result.best_epoch = state.best_epoch
    return result
