"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np

from knnmmd.dataset import LabeledSet
from knnmmd.net import TRAIN, Architecture, Network
from knnmmd.train import TrainConfig, combined_loss

_TINY = Architecture((6, 5), 2, embed_dim=4, conv_channels=(2, 3), head_widths=(5, 3))


def kernel_scalar(family, sigma, a, b):
    if family == "gaussian":
        sq = sum((x - y) ** 2 for x, y in zip(a, b))
        return math.exp(-sq / (2.0 * sigma ** 2))
    l1 = sum(abs(x - y) for x, y in zip(a, b))
    return math.exp(-l1 / sigma)


def mmd2_loops(kernels, weights, X, Y):
    """Triple loop: kernels, then both sample indices."""
    X = [list(map(float, r)) for r in np.atleast_2d(X)]
    Y = [list(map(float, r)) for r in np.atleast_2d(Y)]
    n, m = len(X), len(Y)
    total = 0.0
    for (family, sigma), beta in zip(kernels, weights):
        xx = sum(kernel_scalar(family, sigma, a, b) for a in X for b in X) / n ** 2
        xy = sum(kernel_scalar(family, sigma, a, b) for a in X for b in Y) / (n * m)
        yy = sum(kernel_scalar(family, sigma, a, b) for a in Y for b in Y) / m ** 2
        total += beta * (xx - 2.0 * xy + yy)
    return total


def central_diff(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def simulate_early_stop(losses, accs, e_min, e_threshold, e_max, alpha, beta):
    """Step-by-step transcription of the early-stopping controller.

    Returns ``(stop_epoch, snapshot_epoch)`` with 1-based epochs.
    """
    loss_best, acc_best = float("inf"), 0.0
    e_loss = e_acc = 1
    snap = None
    for i in range(1, len(losses) + 1):
        l, a = losses[i - 1], accs[i - 1]
        improved = False
        if a >= acc_best:
            acc_best, e_acc, improved = a, 1, True
        else:
            e_acc += 1
        if l <= loss_best:
            loss_best, e_loss, improved = l, 1, True
        else:
            e_loss += 1
        if improved:
            snap = i
        if i == e_min:
            loss_best *= alpha
            acc_best *= beta
            e_acc = e_loss = 1
        if (i > e_min and e_loss > e_threshold and e_acc > e_threshold) or i == e_max:
            return i, snap
    return len(losses), snap


def combined_fd_error(seed, alpha1=1.0, alpha2=1.0):
    """Worst relative error of the analytic combined-loss gradient, per parameter."""
    net = Network(_TINY, seed=seed)
    rng = np.random.default_rng(seed)
    t = LabeledSet(rng.normal(size=(6, 6, 5)), np.array([0, 1] * 3), 2)
    h = LabeledSet(rng.normal(size=(6, 6, 5)) * 0.8 + 0.3, rng.integers(0, 2, 6), 2)
    cfg = TrainConfig(alpha1=alpha1, alpha2=alpha2)

    def total():
        tr = net.forward(t.values, TRAIN, update_stats=False)
        hr = net.forward(h.values, TRAIN, update_stats=False)
        return combined_loss(tr, t.labels, hr, h.labels, cfg, 2)[0].total

    tr = net.forward(t.values, TRAIN, update_stats=False)
    hr = net.forward(h.values, TRAIN, update_stats=False)
    _, d_log, d_et, d_eh = combined_loss(tr, t.labels, hr, h.labels, cfg, 2)
    g1, g2 = net.backward(tr, d_log, d_et), net.backward(hr, None, d_eh)
    worst = 0.0
    for k, p in net.params.items():
        worst = max(worst, rel_error(g1[k] + g2[k], central_diff(total, p), floor=1e-5))
    return worst
