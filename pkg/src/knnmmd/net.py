"""Classification network: input batch norm, a small conv extractor, an MLP head.

    E = Extractor(BatchNorm(X)),   logits = Head(E)

The extractor is two blocks of 3x3 convolution (same padding), ReLU and 2x2
average pooling, followed by global average pooling and a dense layer to the
embedding width.  The head is three dense layers with ReLU between them.
Everything runs on float64 numpy arrays with hand-written backward passes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from knnmmd.errors import DataError, DivergenceError

TRAIN, EVAL = "train", "eval"

CHECKPOINT_MAGIC = b"KNNMMDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_shape: tuple[int, int]
    num_classes: int
    embed_dim: int = 64
    conv_channels: tuple[int, ...] = (8, 16)
    head_widths: tuple[int, ...] = (64, 32)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        l, s = self.in_shape
        size = min(l, s)
        if size < 2 ** len(self.conv_channels):
            raise DataError(f"input {self.in_shape} too small for "
                            f"{len(self.conv_channels)} pooling stages")
        if self.num_classes < 2:
            raise DataError("the classifier needs at least 2 classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        d["conv_channels"] = list(self.conv_channels)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["in_shape"] = tuple(d["in_shape"])
        d["conv_channels"] = tuple(d["conv_channels"])
        d["head_widths"] = tuple(d["head_widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# layer primitives

def conv3x3_forward(x, W, b):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))          # n c h w 3 3
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, cols, x_shape, W):
    n, c, h, w = x_shape
    f = W.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(n * h * w, f)
    dW = (dflat.T @ cols).reshape(W.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ W.reshape(f, -1)).reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dW, db


def avgpool2_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout, x_shape):
    # odd trailing rows/columns were cropped and receive zero gradient
    n, c, h, w = x_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape)
    up = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    dx[:, :, :2 * h2, :2 * w2] = up
    return dx


def _finite(name, a):
    if not np.all(np.isfinite(a)):
        raise DivergenceError(f"non-finite activation in {name}")
    return a


# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    embeddings: np.ndarray
    logits: np.ndarray
    mode: str
    cache: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class ParamSnapshot:
    arch: Architecture
    arrays: "OrderedDict[str, np.ndarray]"


class Network:
    """Trainable parameters plus normalization buffers for one architecture."""

    def __init__(self, arch: Architecture, seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        p = OrderedDict()
        p["norm.gamma"] = np.ones(1)
        p["norm.beta"] = np.zeros(1)
        c_in = 1
        for i, c_out in enumerate(arch.conv_channels, start=1):
            p[f"conv{i}.W"] = _uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
            p[f"conv{i}.b"] = _uniform_bias(rng, c_out, c_in * 9)
            c_in = c_out
        p["embed.W"] = _uniform(rng, (c_in, arch.embed_dim), c_in)
        p["embed.b"] = _uniform_bias(rng, arch.embed_dim, c_in)
        widths = (arch.embed_dim,) + tuple(arch.head_widths) + (arch.num_classes,)
        for i in range(len(widths) - 1):
            p[f"fc{i + 1}.W"] = _uniform(rng, (widths[i], widths[i + 1]), widths[i])
            p[f"fc{i + 1}.b"] = _uniform_bias(rng, widths[i + 1], widths[i])
        self.params = p
        self.buffers = OrderedDict([("norm.running_mean", np.zeros(1)),
                                    ("norm.running_var", np.ones(1))])

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_conv(self) -> int:
        return len(self.arch.conv_channels)

    @property
    def n_fc(self) -> int:
        return len(self.arch.head_widths) + 1

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def snapshot(self) -> ParamSnapshot:
        arrays = OrderedDict((k, v.copy()) for k, v in self.params.items())
        arrays.update((k, v.copy()) for k, v in self.buffers.items())
        for v in arrays.values():
            v.flags.writeable = False
        return ParamSnapshot(self.arch, arrays)

    def restore(self, snap: ParamSnapshot) -> None:
        if snap.arch != self.arch:
            raise DataError("snapshot architecture does not match the network")
        for k in self.params:
            self.params[k] = snap.arrays[k].copy()
        for k in self.buffers:
            self.buffers[k] = snap.arrays[k].copy()

    @classmethod
    def from_snapshot(cls, snap: ParamSnapshot) -> "Network":
        net = cls(snap.arch)
        net.restore(snap)
        return net

    # -- forward / backward ------------------------------------------------

    def forward(self, X, mode: str = EVAL, update_stats: bool = True) -> ForwardTrace:
        """Run a batch of ``(n, l, s)`` samples through the network.

        Train mode normalizes with batch statistics and, unless
        ``update_stats`` is false, folds them into the running estimates.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != tuple(self.arch.in_shape):
            raise DataError(f"expected input (n, {self.arch.in_shape[0]}, "
                            f"{self.arch.in_shape[1]}), got {X.shape}")
        if len(X) == 0:
            raise DataError("empty batch")
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"unknown mode {mode!r}")
        p, a = self.params, self.arch
        cache = {}
        x = X[:, None, :, :]
        if mode == TRAIN:
            if len(X) < 2:
                raise DataError("train-mode batch normalization needs >= 2 samples")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                cnt = x.size // x.shape[1]
                m = a.bn_momentum
                self.buffers["norm.running_mean"] = (1 - m) * self.buffers["norm.running_mean"] + m * mu
                self.buffers["norm.running_var"] = ((1 - m) * self.buffers["norm.running_var"]
                                                    + m * var * cnt / (cnt - 1))
        else:
            mu = self.buffers["norm.running_mean"]
            var = self.buffers["norm.running_var"]
        inv_std = 1.0 / np.sqrt(var + a.bn_eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        h = p["norm.gamma"][None, :, None, None] * xhat + p["norm.beta"][None, :, None, None]
        cache["bn"] = (xhat, inv_std)
        for i in range(1, self.n_conv + 1):
            shape_in = h.shape
            z, cols = conv3x3_forward(h, p[f"conv{i}.W"], p[f"conv{i}.b"])
            r = np.maximum(z, 0.0)
            h = avgpool2_forward(r)
            cache[f"conv{i}"] = (shape_in, cols, z > 0, r.shape)
        cache["gap_shape"] = h.shape
        g = h.mean(axis=(2, 3))
        cache["gap"] = g
        emb = _finite("embedding", g @ p["embed.W"] + p["embed.b"])
        h = emb
        for i in range(1, self.n_fc + 1):
            cache[f"fc{i}.in"] = h
            z = h @ p[f"fc{i}.W"] + p[f"fc{i}.b"]
            if i < self.n_fc:
                cache[f"fc{i}.mask"] = z > 0
                h = np.maximum(z, 0.0)
            else:
                h = z
        logits = _finite("logits", h)
        return ForwardTrace(emb, logits, mode, cache)

    def backward(self, trace: ForwardTrace, d_logits=None, d_embeddings=None) -> dict:
        """Gradient of ``<d_logits, logits> + <d_embeddings, E>`` for every parameter."""
        if d_logits is None:
            d_logits = np.zeros_like(trace.logits)
        if d_embeddings is None:
            d_embeddings = np.zeros_like(trace.embeddings)
        d_logits = np.asarray(d_logits, dtype=np.float64)
        d_embeddings = np.asarray(d_embeddings, dtype=np.float64)
        if d_logits.shape != trace.logits.shape:
            raise DataError(f"d_logits shape {d_logits.shape} != {trace.logits.shape}")
        if d_embeddings.shape != trace.embeddings.shape:
            raise DataError(f"d_embeddings shape {d_embeddings.shape} != "
                            f"{trace.embeddings.shape}")
        p, c = self.params, trace.cache
        grads = OrderedDict((k, None) for k in p)
        dh = d_logits
        for i in range(self.n_fc, 0, -1):
            if i < self.n_fc:
                dh = dh * c[f"fc{i}.mask"]
            grads[f"fc{i}.W"] = c[f"fc{i}.in"].T @ dh
            grads[f"fc{i}.b"] = dh.sum(axis=0)
            dh = dh @ p[f"fc{i}.W"].T
        demb = dh + d_embeddings
        grads["embed.W"] = c["gap"].T @ demb
        grads["embed.b"] = demb.sum(axis=0)
        dg = demb @ p["embed.W"].T
        gshape = c["gap_shape"]
        dh = np.broadcast_to(dg[:, :, None, None] / (gshape[2] * gshape[3]), gshape)
        for i in range(self.n_conv, 0, -1):
            shape_in, cols, mask, r_shape = c[f"conv{i}"]
            dz = avgpool2_backward(dh, r_shape) * mask
            dh, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = conv3x3_backward(
                dz, cols, shape_in, p[f"conv{i}.W"])
        xhat, _ = c["bn"]
        grads["norm.gamma"] = (dh * xhat).sum(axis=(0, 2, 3))
        grads["norm.beta"] = dh.sum(axis=(0, 2, 3))
        # batch statistics depend on the input only, so no parameter term flows through them
        return grads


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def _uniform_bias(rng, size, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size)


# ---------------------------------------------------------------------------
# losses

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of the true class."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(logits),):
        raise DataError("one label per logit row is required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError("label out of range")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    prob = np.exp(log_softmax(logits))
    prob[np.arange(len(labels)), labels] -= 1.0
    return prob / len(labels)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; moment buffers mirror the network parameters."""

    def __init__(self, net: Network, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items())
        self.t = 0

    def step(self, net: Network, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {k}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            net.params[k] = net.params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adam_step(net: Network, grads: dict, state: Adam, lr: float) -> None:
    state.step(net, grads, lr)


def add_grads(a: dict, b: dict) -> dict:
    return OrderedDict((k, a[k] + b[k]) for k in a)


# ---------------------------------------------------------------------------
# checkpoint file

def save_checkpoint(snap: ParamSnapshot | Network, path) -> None:
    """Write magic, version, a JSON architecture descriptor, then '<f8' arrays."""
    if isinstance(snap, Network):
        snap = snap.snapshot()
    layout = [[k, list(v.shape)] for k, v in snap.arrays.items()]
    desc = json.dumps({"arch": snap.arch.to_dict(), "arrays": layout},
                      sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                    for v in snap.arrays.values())
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(desc)) + desc + body
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ParamSnapshot:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, dlen = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off += 8
    desc = json.loads(data[off:off + dlen].decode("utf-8"))
    off += dlen
    arch = Architecture.from_dict(desc["arch"])
    arrays = OrderedDict()
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        arrays[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise DataError(f"{path}: trailing bytes after parameters")
    expected = list(Network(arch).snapshot().arrays)
    if list(arrays) != expected:
        raise DataError(f"{path}: parameter layout does not match its architecture")
    return ParamSnapshot(arch, arrays)
