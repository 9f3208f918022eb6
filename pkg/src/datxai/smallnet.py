"""A compact numpy CNN: layers, backprop, Adam, training and checkpoints.

Tensors are numpy arrays in NCHW layout. Every layer caches what it needs
during ``forward`` and consumes it in ``backward``; a layer whose
``trainable`` flag is off still passes gradients through but never reports
parameter gradients, so the optimizer cannot touch it.
"""

from __future__ import annotations

import copy
import csv
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import AugmentSpec, DatasetSplit, augment

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# ------------------------------------------------------------ primitive math


def dense_affine(x, W, b=0.0):
    """Net input ``z = x . W + b`` (bias folded in as the weight on a
    constant unit). ``W`` has shape ``(in,)`` or ``(in, out)``."""
    x = np.asarray(x)
    W = np.asarray(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"cannot apply weights {W.shape} to input {x.shape}")
    return x @ W + b


def sigmoid(z):
    z = np.asarray(z)
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z)
    if z.shape[axis] < 1:
        raise ShapeError("softmax needs at least one class")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def activation(kind: str, z):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "sigmoid_derivative":
        s = sigmoid(z)
        return s * (1.0 - s)
    if kind == "softmax":
        return softmax(z)
    if kind == "relu":
        return np.maximum(z, 0)
    raise ValueError(f"unknown activation {kind!r}")


def bce_loss(probs, labels, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} and labels {y.shape} differ in length")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# -------------------------------------------------------------------- layers


class Layer:
    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, need_input_grad=True):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def cast(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)


class Conv2D(Layer):
    def __init__(self, in_channels, channels, kernel=3, stride=1, pad=1, rng=None, dtype=np.float32):
        super().__init__()
        if kernel < 1 or stride < 1 or pad < 0:
            raise ValueError("kernel and stride must be >= 1, pad >= 0")
        self.in_channels, self.channels = in_channels, channels
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_channels * kernel * kernel
        limit = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, (channels, in_channels, kernel, kernel)).astype(dtype)
        self.params["b"] = np.zeros(channels, dtype=dtype)

    def spec(self):
        return {"kind": "Conv2D", "in_channels": self.in_channels, "channels": self.channels,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}

    def out_shape(self, shape):
        c, h, w = shape
        k, s, p = self.kernel, self.stride, self.pad
        return self.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2D expects (N, {self.in_channels}, H, W), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if xp.shape[2] < k or xp.shape[3] < k:
            raise ShapeError(f"input {x.shape} smaller than kernel {k}")
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        self._cache = (x.shape, xp.shape, win)
        out = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad, need_input_grad=True):
        x_shape, xp_shape, win = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        W = self.params["W"]
        if self.trainable:
            self.grads = {
                "W": np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3])).astype(W.dtype),
                "b": grad.sum(axis=(0, 2, 3)).astype(W.dtype),
            }
        if not need_input_grad:
            return None
        ho, wo = grad.shape[2], grad.shape[3]
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for ki in range(k):
            for kj in range(k):
                contrib = np.tensordot(grad, W[:, :, ki, kj], axes=([1], [0]))  # N,Ho,Wo,C
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class MaxPool(Layer):
    def __init__(self, window=2, stride=None):
        super().__init__()
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.stride = stride or window

    def spec(self):
        return {"kind": "MaxPool", "window": self.window, "stride": self.stride}

    def out_shape(self, shape):
        c, h, w = shape
        k, s = self.window, self.stride
        return c, (h - k) // s + 1, (w - k) // s + 1

    def forward(self, x, train=False, rng=None):
        k, s = self.window, self.stride
        if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"MaxPool({k}) cannot pool input of shape {x.shape}")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad, need_input_grad=True):
        x_shape, idx = self._cache
        k, s = self.window, self.stride
        ho, wo = grad.shape[2], grad.shape[3]
        dx = np.zeros(x_shape, dtype=grad.dtype)
        for pos in range(k * k):
            ki, kj = divmod(pos, k)
            dx[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += grad * (idx == pos)
        return dx


class Dense(Layer):
    def __init__(self, in_features, units, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.units = in_features, units
        limit = np.sqrt(6.0 / in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, (in_features, units)).astype(dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)

    def spec(self):
        return {"kind": "Dense", "in_features": self.in_features, "units": self.units}

    def out_shape(self, shape):
        return (self.units,)

    def forward(self, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects {self.in_features} features, got {flat.shape[1]}")
        self._cache = (x.shape, flat)
        return dense_affine(flat, self.params["W"], self.params["b"])

    def backward(self, grad, need_input_grad=True):
        x_shape, flat = self._cache
        if self.trainable:
            self.grads = {"W": flat.T @ grad, "b": grad.sum(axis=0)}
        if not need_input_grad:
            return None
        return (grad @ self.params["W"].T).reshape(x_shape)


class Dropout(Layer):
    def __init__(self, rate=0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def spec(self):
        return {"kind": "Dropout", "rate": self.rate}

    def out_shape(self, shape):
        return shape

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * self._mask

    def backward(self, grad, need_input_grad=True):
        return grad if self._mask is None else grad * self._mask


class Activation(Layer):
    KINDS = ("relu", "sigmoid", "softmax")

    def __init__(self, kind):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def spec(self):
        return {"kind": "Activation", "fn": self.kind}

    def out_shape(self, shape):
        return shape

    def forward(self, x, train=False, rng=None):
        if self.kind == "relu":
            self._x = x
            return np.maximum(x, 0)
        y = activation(self.kind, x).astype(x.dtype, copy=False)
        self._y = y
        return y

    def backward(self, grad, need_input_grad=True):
        if self.kind == "relu":
            return grad * (self._x > 0)
        y = self._y
        if self.kind == "sigmoid":
            return grad * y * (1 - y)
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


_LAYER_KINDS = {"Conv2D": Conv2D, "MaxPool": MaxPool, "Dense": Dense,
                "Dropout": Dropout, "Activation": Activation}


def layer_from_spec(spec: dict, dtype=np.float32) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "Activation":
        return Activation(spec["fn"])
    cls = _LAYER_KINDS[kind]
    if kind in ("Conv2D", "Dense"):
        return cls(**spec, dtype=dtype)
    return cls(**spec)


# ------------------------------------------------------------------- network


class Network:
    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (1,) or not isinstance(self.layers[-1], Activation) \
                or self.layers[-1].kind != "sigmoid":
            # still usable as a feature stack, but not as a binary classifier
            self.binary_head = False
        else:
            self.binary_head = True
        self.output_shape = shape

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return next(iter(layer.params.values())).dtype
        return np.dtype(np.float32)

    @property
    def freeze_mask(self) -> list[bool]:
        """True where a layer is frozen."""
        return [not layer.trainable for layer in self.layers]

    def set_freeze_mask(self, mask) -> None:
        if len(mask) != len(self.layers):
            raise ValueError("freeze mask length must equal the layer count")
        for layer, frozen in zip(self.layers, mask):
            layer.trainable = not frozen

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) if layer.trainable
                for k, v in layer.params.items()}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def copy(self, dtype=None) -> "Network":
        net = copy.deepcopy(self)
        if dtype is not None:
            for layer in net.layers:
                layer.cast(dtype)
        return net

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3 and len(self.input_shape) == 3:
            x = x[:, None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def predict_proba(self, x, batch_size=256) -> np.ndarray:
        """P(positive) per sample, evaluation mode."""
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size]).reshape(-1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    def backward(self, grad, start=None):
        """Back-propagate ``grad`` (the loss gradient w.r.t. the output of
        layer ``start``, default the last layer); returns trainable gradients."""
        start = len(self.layers) - 1 if start is None else start
        first = next((i for i, layer in enumerate(self.layers)
                      if layer.trainable and layer.params), None)
        for layer in self.layers:
            layer.grads = {}
        if first is None or first > start:
            return {}
        for i in range(start, first - 1, -1):
            grad = self.layers[i].backward(grad, need_input_grad=i > first)
        return {f"{i}.{k}": g for i, layer in enumerate(self.layers)
                for k, g in layer.grads.items()}

    def loss_and_grads(self, x, labels, train=False, rng=None):
        """BCE loss, probabilities and trainable gradients for one batch.

        With a sigmoid head the loss gradient is fed straight into the
        pre-activation as ``(p - y) / N``, which is the sigmoid derivative
        times dL/dp written without the division.
        """
        y = np.asarray(labels, dtype=self.dtype).reshape(-1)
        out = self.forward(x, train=train, rng=rng)
        probs = out.reshape(-1)
        if probs.shape != y.shape:
            raise ShapeError(f"{probs.shape[0]} outputs for {y.shape[0]} labels")
        loss = bce_loss(probs, y)
        n = y.shape[0]
        if self.binary_head:
            grads = self.backward(((probs - y) / n).reshape(out.shape), start=len(self.layers) - 2)
        else:
            p = np.clip(probs, BCE_EPS, 1 - BCE_EPS)
            grads = self.backward((((p - y) / (p * (1 - p))) / n).reshape(out.shape))
        return loss, probs, grads


def forward(net: Network, batch, train_mode=False, rng=None):
    return net.forward(batch, train=train_mode, rng=rng).reshape(-1)


def backward(net: Network, batch, labels, train_mode=False, rng=None):
    """Forward the batch, then return ``(loss, grads)`` for trainable params."""
    loss, _, grads = net.loss_and_grads(batch, labels, train=train_mode, rng=rng)
    return loss, grads


def compact_net(input_size=64, conv_channels=(8, 16, 16), dense_units=32,
                dropout=0.5, seed=0, dtype=np.float32) -> Network:
    """Conv3x3 -> ReLU -> MaxPool2 blocks, then Dense -> ReLU -> Dropout ->
    Dense(1) -> sigmoid. Weights are He-uniform from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    c, size = 1, input_size
    for ch in conv_channels:
        layers += [Conv2D(c, ch, 3, 1, 1, rng=rng, dtype=dtype), Activation("relu"), MaxPool(2)]
        c, size = ch, size // 2
    layers += [Dense(c * size * size, dense_units, rng=rng, dtype=dtype), Activation("relu"),
               Dropout(dropout), Dense(dense_units, 1, rng=rng, dtype=dtype), Activation("sigmoid")]
    return Network(layers, (1, input_size, input_size))


def freeze_for_transfer(net: Network, n_trainable_conv=2) -> Network:
    """Freeze every layer ahead of the last ``n_trainable_conv`` conv layers.

    The chosen conv layers and everything after them (the dense head)
    stay trainable.
    """
    conv_idx = [i for i, layer in enumerate(net.layers) if isinstance(layer, Conv2D)]
    if n_trainable_conv >= len(conv_idx):
        cut = 0
    elif n_trainable_conv > 0:
        cut = conv_idx[-n_trainable_conv]
    else:
        cut = next(i for i, layer in enumerate(net.layers) if isinstance(layer, Dense))
    net.set_freeze_mask([i < cut for i in range(len(net.layers))])
    return net


def _decision_pattern(net: Network) -> bytes:
    # ReLU on/off states and pooling winners from the most recent forward pass
    parts = []
    for layer in net.layers:
        if isinstance(layer, Activation) and layer.kind == "relu":
            parts.append(np.packbits(layer._x > 0).tobytes())
        elif isinstance(layer, MaxPool):
            parts.append(layer._cache[1].astype(np.int8).tobytes())
    return b"".join(parts)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kinks: int
    worst: tuple | None = None


def gradient_check(net: Network, x, labels, step=1e-3, floor=1e-8) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    Runs on a float64 shadow copy of ``net``. Entries whose +/-step probes
    flip a ReLU or a max-pool winner sit on a kink where the central
    difference is not a derivative estimate; they are counted in
    ``n_kinks`` and left out of the error.
    """
    shadow = net.copy(np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _, grads = backward(shadow, x, y)
    shadow.forward(x)
    base = _decision_pattern(shadow)
    params = shadow.parameters()
    worst, worst_at, checked, kinks = 0.0, None, 0, 0
    for name, g in grads.items():
        p = params[name]
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + step
            lp = bce_loss(shadow.forward(x).reshape(-1), y)
            crossed = _decision_pattern(shadow) != base
            p[i] = old - step
            lm = bce_loss(shadow.forward(x).reshape(-1), y)
            crossed |= _decision_pattern(shadow) != base
            p[i] = old
            if crossed:
                kinks += 1
                continue
            num = (lp - lm) / (2 * step)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (name, i, float(g[i]), float(num))
    return GradCheckReport(worst, checked, kinks, worst_at)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 300
    batch_size_train: int = 32
    batch_size_val: int = 16
    steps_train: int = 32
    steps_val: int = 4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        for name in ("epochs", "batch_size_train", "batch_size_val", "steps_train", "steps_val"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def adam_step(params, grads, state, config: OptimizerConfig, t: int):
    """One bias-corrected Adam update, in place on ``params``.

    Only keys present in ``grads`` move, so frozen parameters (which never
    receive gradients) are left alone. ``state`` maps each key to its
    ``(m, v)`` moment pair and is created on first use.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
        p = params[k]
        if k not in state:
            state[k] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (config.learning_rate / bc1) * m / (np.sqrt(v / bc2) + config.epsilon)
        p -= step.astype(p.dtype, copy=False)
    return params, state


# ------------------------------------------------------------------ training


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self, path, preamble: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if preamble:
                fh.write(f"# {preamble}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for e in range(len(self)):
                w.writerow([e + 1] + [repr(float(v[e])) for v in
                                      (self.train_loss, self.train_acc, self.val_loss, self.val_acc)])


@dataclass
class TrainedModel:
    network: Network
    config: OptimizerConfig
    history: TrainingHistory = field(default_factory=TrainingHistory)
    seed: int = 0

    @property
    def freeze_mask(self):
        return self.network.freeze_mask

    def predict_proba(self, images, batch_size=256):
        return self.network.predict_proba(images, batch_size)


def _stack(images, ids):
    return np.stack([np.asarray(images[i], dtype=np.float32) for i in ids])[:, None]


def train(net: Network, split: DatasetSplit, images, aug: AugmentSpec | None = None,
          config: OptimizerConfig | None = None, seed: int = 0, progress=None):
    """Mini-batch Adam training with on-the-fly augmentation.

    Each epoch draws ``steps_train`` batches of ``batch_size_train`` from a
    reshuffled stream over the training ids, then evaluates ``steps_val``
    batches of ``batch_size_val`` cycling through the validation ids.
    ``net`` is trained in place and wrapped in the returned model.
    """
    config = config or OptimizerConfig()
    aug = aug or AugmentSpec(rng_seed=seed)
    if not split.train or not split.validation:
        raise ValueError("training needs non-empty train and validation partitions")
    rng = np.random.default_rng(seed)
    train_ids = list(split.train)
    val_ids = list(split.validation)
    y_all = split.labels
    val_x = _stack(images, val_ids)
    val_y = np.array([y_all[i] for i in val_ids], dtype=np.float32)

    params = net.trainable_parameters()
    state: dict = {}
    history = TrainingHistory()
    order: list[int] = []
    draw = 0
    t = 0
    val_pos = 0
    for epoch in range(config.epochs):
        losses, hits, seen = [], 0, 0
        for _ in range(config.steps_train):
            idx = []
            while len(idx) < config.batch_size_train:
                if not order:
                    order = list(rng.permutation(len(train_ids)))
                idx.append(order.pop())
            batch_ids = [train_ids[j] for j in idx]
            xb = np.stack([augment(images[i], aug, draw + n) for n, i in enumerate(batch_ids)])[:, None]
            draw += len(batch_ids)
            yb = np.array([y_all[i] for i in batch_ids], dtype=np.float32)
            loss, probs, grads = net.loss_and_grads(xb, yb, train=True, rng=rng)
            if grads:
                t += 1
                adam_step(params, grads, state, config, t)
            losses.append(loss * len(yb))
            hits += int(np.sum((probs >= 0.5) == (yb >= 0.5)))
            seen += len(yb)
        vl, vh, vn = 0.0, 0, 0
        for _ in range(config.steps_val):
            sel = [(val_pos + j) % len(val_ids) for j in range(config.batch_size_val)]
            val_pos = (val_pos + config.batch_size_val) % len(val_ids)
            p = net.forward(val_x[sel]).reshape(-1)
            vl += bce_loss(p, val_y[sel]) * len(sel)
            vh += int(np.sum((p >= 0.5) == (val_y[sel] >= 0.5)))
            vn += len(sel)
        history.train_loss.append(sum(losses) / seen if seen else float("nan"))
        history.train_acc.append(hits / seen if seen else float("nan"))
        history.val_loss.append(vl / vn if vn else float("nan"))
        history.val_acc.append(vh / vn if vn else float("nan"))
        if progress is not None:
            progress(epoch + 1, history)
    return TrainedModel(net, config, history, seed), history


def fine_tune(model: TrainedModel, split: DatasetSplit, images, aug=None, config=None,
              seed: int = 0, n_trainable_conv: int = 2):
    """Transfer step: copy the model, freeze its early layers and retrain."""
    net = freeze_for_transfer(model.network.copy(), n_trainable_conv)
    return train(net, split, images, aug, config or model.config, seed)


# --------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"SNET"
_CKPT_VERSION = b"1"


def save_checkpoint(path, model: TrainedModel, extra: dict | None = None) -> None:
    """Binary checkpoint: ``SNET1``, JSON layer table, f32 blobs, CRC32.

    ``extra`` is stored verbatim in the header (e.g. run provenance).
    """
    net = model.network
    names = list(net.parameters())
    header = {
        "input_shape": list(net.input_shape),
        "layers": [dict(layer.spec(), trainable=layer.trainable) for layer in net.layers],
        "params": [[n, list(net.parameters()[n].shape)] for n in names],
        "config": asdict(model.config),
        "history": asdict(model.history),
        "seed": model.seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = bytearray(_CKPT_MAGIC + _CKPT_VERSION)
    body += struct.pack("<I", len(blob)) + blob
    for n in names:
        body += np.ascontiguousarray(net.parameters()[n], dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> TrainedModel:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic)")
    if data[4:5] != _CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {data[4:5]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = json.loads(data[9:9 + hlen])
    layers = []
    for spec in header["layers"]:
        spec = dict(spec)
        trainable = spec.pop("trainable")
        layer = layer_from_spec(spec)
        layer.trainable = trainable
        layers.append(layer)
    net = Network(layers, header["input_shape"])
    offset = 9 + hlen
    for name, shape in header["params"]:
        i, key = name.split(".")
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        net.layers[int(i)].params[key] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(data) - 4:
        raise CheckpointError("payload length does not match the layer table")
    history = TrainingHistory(**header["history"])
    return TrainedModel(net, OptimizerConfig(**header["config"]), history, header["seed"])


def checkpoint_header(path) -> dict:
    """The JSON header of a checkpoint, without loading the weights."""
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 5)
    return json.loads(data[9:9 + hlen])


def checkpoint_io(path, mode, model=None):
    if mode == "read":
        return load_checkpoint(path)
    if mode == "write":
        save_checkpoint(path, model)
        return None
    raise ValueError(f"unknown mode {mode!r}")
