"""Fixed-menu neural layers in float64 with hand-written backward passes.

Batched tensors use the layout ``(batch, channels, frames)``. Every
frame-level activation travels with a length vector; frames at or beyond an
utterance's length are zeroed after each convolution and never win the
global max pool, so padding is inert.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# Layers


@dataclass
class DilatedConv1d:
    """Same-length dilated 1-D convolution.

    ``y[o, t] = bias[o] + sum_{c, j} w[o, c, j] * x[c, t + (j - k // 2) * dilation]``
    with out-of-range ``x`` treated as zero.
    """
    weight: np.ndarray  # (out, in, kernel)
    bias: np.ndarray    # (out,)
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 3 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("conv weight must be (out, in, kernel) with matching bias")
        if self.kernel_size < 1 or self.dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, in_channels, out_channels, kernel_size, dilation, rng):
        fan_in = in_channels * kernel_size
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size))
        return cls(w, np.zeros(out_channels), dilation)

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("dense weight must be (out, in) with matching bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, rng):
        bound = math.sqrt(6.0 / in_dim)
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim))

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def param_count(obj) -> int:
    """Total number of scalar parameters in a layer, a model or a parameter dict."""
    if hasattr(obj, "param_count"):
        return obj.param_count()
    return int(sum(np.asarray(v).size for v in obj.values()))


# --------------------------------------------------------------------------
# Convolution


def _conv_taps(kernel_size: int, dilation: int):
    left = (kernel_size // 2) * dilation
    right = (kernel_size - 1) * dilation - left
    return left, right


def conv1d_forward(x, weight, bias, dilation):
    """Batched same-length dilated convolution.

    Parameters
    ----------
    x : array (B, C_in, T)

    Returns
    -------
    y : array (B, C_out, T)
    cols : array (B, C_in * K, T), kept for the backward pass
    """
    if x.ndim == 2:
        y, cols = conv1d_forward(x[None], weight, bias, dilation)
        return y[0], cols
    B, C, T = x.shape
    O, Cw, K = weight.shape
    if C != Cw:
        raise ValueError(f"conv expects {Cw} input channels, got {C}")
    left, right = _conv_taps(K, dilation)
    xp = np.zeros((B, C, T + left + right))
    xp[:, :, left:left + T] = x
    cols = np.empty((B, C, K, T))
    for j in range(K):
        cols[:, :, j, :] = xp[:, :, j * dilation:j * dilation + T]
    cols = cols.reshape(B, C * K, T)
    y = np.matmul(weight.reshape(O, C * K), cols) + bias[None, :, None]
    return y, cols


def conv1d_backward(dy, cols, weight, dilation, need_dx=True):
    """Gradients of a batched convolution given the upstream gradient ``dy``."""
    B, O, T = dy.shape
    _, C, K = weight.shape
    w2 = weight.reshape(O, C * K)
    dw = np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    db = dy.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w2.T, dy).reshape(B, C, K, T)
    left, right = _conv_taps(K, dilation)
    dxp = np.zeros((B, C, T + left + right))
    for j in range(K):
        dxp[:, :, j * dilation:j * dilation + T] += dcols[:, :, j, :]
    return dxp[:, :, left:left + T], dw, db


def conv1d_dilated_forward(layer: DilatedConv1d, x, length=None):
    """Single-utterance convenience wrapper: ``(C_in, T) -> (C_out, T)``.

    Frames at or beyond ``length`` are zeroed in the output.
    """
    y, _ = conv1d_forward(np.asarray(x, dtype=float), layer.weight, layer.bias, layer.dilation)
    if length is not None:
        y = y.copy()
        y[:, length:] = 0.0
    return y


# --------------------------------------------------------------------------
# Pooling, dense, activations, loss


def frame_mask(lengths, T) -> np.ndarray:
    """Boolean ``(B, T)`` mask of valid frames."""
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("every sequence needs at least one frame")
    return np.arange(T)[None, :] < lengths[:, None]


def global_max_pool(x, lengths):
    """Per-channel max over valid frames only.

    Returns the pooled ``(B, C)`` array and the argmax frame indices.
    """
    if x.ndim == 2:
        pooled, idx = global_max_pool(x[None], np.atleast_1d(lengths))
        return pooled[0], idx[0]
    mask = frame_mask(lengths, x.shape[2])
    masked = np.where(mask[:, None, :], x, -np.inf)
    idx = masked.argmax(axis=2)
    pooled = np.take_along_axis(x, idx[:, :, None], axis=2)[:, :, 0]
    return pooled, idx


def global_max_pool_backward(dpooled, idx, T):
    B, C = dpooled.shape
    dx = np.zeros((B, C, T))
    np.put_along_axis(dx, idx[:, :, None], dpooled[:, :, None], axis=2)
    return dx


def dense_forward(x, weight, bias):
    return x @ weight.T + bias


def dense_backward(dy, x, weight):
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs, labels) -> float:
    """Mean ``-log p[label]`` over the batch."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError("label out of range")
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy from logits and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("label out of range")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class Adam:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, frozen=()):
        """Update ``params`` in place for every name present in ``grads``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if name in frozen:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


# --------------------------------------------------------------------------
# Finite differences


def numerical_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x``.

    ``x`` is perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


# --------------------------------------------------------------------------
# Checkpoints


def save_params(params: dict, path, meta: dict | None = None):
    """Write named tensors to an ``.npz`` file with a JSON header entry."""
    header = {"format_version": CHECKPOINT_VERSION,
              "shapes": {k: list(v.shape) for k, v in params.items()},
              "meta": meta or {}}
    arrays = {k: np.asarray(v) for k, v in params.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path, expected_shapes: dict | None = None):
    """Load tensors written by :func:`save_params`; returns ``(params, meta)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        params = {k: data[k].astype(float) for k in header["shapes"]}
    for name, shape in header["shapes"].items():
        if list(params[name].shape) != shape:
            raise ValueError(f"tensor {name} does not match its recorded shape")
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise ValueError("checkpoint tensor names do not match the model")
        for name, shape in expected_shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{params[name].shape} vs expected {tuple(shape)}")
    return params, header["meta"]
