"""Neural layers with explicit forward/backward passes.

Each layer caches its last forward input and supports exactly one
in-flight forward/backward pair; backward clears the cache. Distinct
instances share no state, so one instance per client is thread-safe.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ConfigError, ShapeMismatchError, StateError
from .tensor import Tensor


def kaiming_uniform(rng, shape, fan_in):
    """Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: parameters are (name, Tensor) pairs in a stable order."""

    def param_items(self):
        return []

    def parameters(self):
        return [t for _, t in self.param_items()]

    def zero_grad(self):
        for _, t in self.param_items():
            t.zero_grad()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, upstream, accumulate=True):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Linear(Layer):
    """y = x @ W + b for x of shape [batch, in_dim]."""

    def __init__(self, in_dim, out_dim, rng, name="linear", zero_init=False):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.name = name
        if zero_init:
            w = np.zeros((self.in_dim, self.out_dim))
        else:
            w = kaiming_uniform(rng, (self.in_dim, self.out_dim), fan_in=self.in_dim)
        self.weights = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(self.out_dim), requires_grad=True)
        self._x = None

    def param_items(self):
        return [(f"{self.name}.weights", self.weights), (f"{self.name}.bias", self.bias)]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"{self.name}: input shape {x.shape} does not match weight shape "
                f"{(self.in_dim, self.out_dim)}"
            )
        self._x = x
        return x @ self.weights.data + self.bias.data

    def backward(self, upstream, accumulate=True):
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self._x.shape[0], self.out_dim):
            raise ShapeMismatchError(
                f"{self.name}: upstream shape {upstream.shape} does not match output shape "
                f"{(self._x.shape[0], self.out_dim)}"
            )
        if accumulate:
            self.weights.accumulate_grad(self._x.T @ upstream)
            self.bias.accumulate_grad(upstream.sum(axis=0))
        dx = upstream @ self.weights.data.T
        self._x = None
        return dx


class Conv2d(Layer):
    """Cross-correlation with odd kernel, stride 1 and same-size padding.

    Input [batch, ch_in, H, W] -> output [batch, ch_out, H, W].
    """

    def __init__(self, ch_in, ch_out, rng, kernel=3, name="conv", zero_init=False,
                 bias=True):
        if kernel % 2 != 1:
            raise ConfigError(f"{name}: kernel must be odd, got {kernel}")
        self.ch_in = int(ch_in)
        self.ch_out = int(ch_out)
        self.kernel = int(kernel)
        self.pad = kernel // 2
        self.name = name
        fan_in = self.ch_in * kernel * kernel
        if zero_init:
            w = np.zeros((self.ch_out, self.ch_in, kernel, kernel))
        else:
            w = kaiming_uniform(rng, (self.ch_out, self.ch_in, kernel, kernel), fan_in=fan_in)
        self.weights = Tensor(w, requires_grad=True)
        # a following normalization layer would cancel any bias; drop it there
        self.bias = Tensor(np.zeros(self.ch_out), requires_grad=True) if bias else None
        self._cols = None
        self._in_shape = None

    def param_items(self):
        items = [(f"{self.name}.weights", self.weights)]
        if self.bias is not None:
            items.append((f"{self.name}.bias", self.bias))
        return items

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.ch_in:
            raise ShapeMismatchError(
                f"{self.name}: input shape {x.shape} does not match kernel shape "
                f"{self.weights.shape}"
            )
        b, c, h, w = x.shape
        k, p = self.kernel, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # channel-major columns [b, c*k*k, h*w]: one strided copy per kernel offset
        cols = np.empty((b, c, k * k, h * w))
        view = cols.reshape(b, c, k * k, h, w)
        for i in range(k):
            for j in range(k):
                view[:, :, i * k + j] = xp[:, :, i:i + h, j:j + w]
        cols = cols.reshape(b, c * k * k, h * w)
        w_mat = self.weights.data.reshape(self.ch_out, -1)
        out = np.matmul(w_mat[None], cols)  # [b, ch_out, h*w]
        if self.bias is not None:
            out += self.bias.data[None, :, None]
        self._cols = cols
        self._in_shape = x.shape
        return out.reshape(b, self.ch_out, h, w)

    def backward(self, upstream, accumulate=True):
        if self._cols is None:
            raise StateError(f"{self.name}: backward called before forward")
        b, c, h, w = self._in_shape
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (b, self.ch_out, h, w):
            raise ShapeMismatchError(
                f"{self.name}: upstream shape {upstream.shape} does not match output shape "
                f"{(b, self.ch_out, h, w)}"
            )
        k, p = self.kernel, self.pad
        up_mat = upstream.reshape(b, self.ch_out, h * w)
        if accumulate:
            d_w = np.matmul(up_mat, self._cols.transpose(0, 2, 1)).sum(axis=0)
            self.weights.accumulate_grad(d_w.reshape(self.weights.shape))
            if self.bias is not None:
                self.bias.accumulate_grad(up_mat.sum(axis=(0, 2)))
        w_mat = self.weights.data.reshape(self.ch_out, -1)
        dcols = np.matmul(w_mat.T[None], up_mat).reshape(b, c, k * k, h, w)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i * k + j]
        self._cols = None
        self._in_shape = None
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, upstream, accumulate=True):
        if self._mask is None:
            raise StateError("relu: backward called before forward")
        dx = np.where(self._mask, upstream, 0.0)
        self._mask = None
        return dx


class Sigmoid(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x):
        out = 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
        self._out = out
        return out

    def backward(self, upstream, accumulate=True):
        if self._out is None:
            raise StateError("sigmoid: backward called before forward")
        dx = upstream * self._out * (1.0 - self._out)
        self._out = None
        return dx


class SoftmaxChannel(Layer):
    """Softmax over axis 1 (the channel axis), per remaining position."""

    def __init__(self):
        self._out = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2:
            raise ShapeMismatchError(f"softmax_channel: input shape {x.shape} has no channel axis")
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
        self._out = out
        return out

    def backward(self, upstream, accumulate=True):
        if self._out is None:
            raise StateError("softmax_channel: backward called before forward")
        s = self._out
        dot = (upstream * s).sum(axis=1, keepdims=True)
        dx = s * (upstream - dot)
        self._out = None
        return dx


def activation(x, kind):
    """Pure forward activation: one of {relu, sigmoid, softmax_channel}."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "softmax_channel":
        if x.ndim < 2:
            raise ShapeMismatchError(f"softmax_channel: input shape {x.shape} has no channel axis")
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ConfigError(f"unknown activation kind {kind!r}")


class AvgPool2(Layer):
    """2x2 average pooling with stride 2; spatial extents must be even."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatchError(f"avg_pool2: spatial extents of {x.shape} must be even")
        self._in_shape = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, upstream, accumulate=True):
        if self._in_shape is None:
            raise StateError("avg_pool2: backward called before forward")
        b, c, h, w = self._in_shape
        dx = np.repeat(np.repeat(upstream, 2, axis=2), 2, axis=3) / 4.0
        self._in_shape = None
        return dx


class Upsample2(Layer):
    """2x nearest-neighbour upsampling."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._in_shape = x.shape
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, upstream, accumulate=True):
        if self._in_shape is None:
            raise StateError("upsample2: backward called before forward")
        b, c, h, w = self._in_shape
        dx = upstream.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        self._in_shape = None
        return dx


class GlobalAvgPool(Layer):
    """Spatial mean pool: [batch, ch, H, W] -> [batch, ch]."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, upstream, accumulate=True):
        if self._in_shape is None:
            raise StateError("global_avg_pool: backward called before forward")
        b, c, h, w = self._in_shape
        dx = np.broadcast_to(upstream[:, :, None, None], self._in_shape) / (h * w)
        self._in_shape = None
        return np.ascontiguousarray(dx)


class InstanceNorm2d(Layer):
    """Per-sample, per-channel spatial normalization with learnable gain/bias.

    Keeps activations and logits in a bounded range so federated averaging
    of conflicting models cannot saturate the softmax into a dead zone.
    """

    def __init__(self, channels, name="inorm", eps=1e-5):
        self.channels = int(channels)
        self.eps = float(eps)
        self.name = name
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self._cache = None

    def param_items(self):
        return [(f"{self.name}.gain", self.gain), (f"{self.name}.bias", self.bias)]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"{self.name}: input shape {x.shape} does not match channels {self.channels}")
        mean = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return self.gain.data[None, :, None, None] * xhat + self.bias.data[None, :, None, None]

    def backward(self, upstream, accumulate=True):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        xhat, inv_std = self._cache
        self._cache = None
        if accumulate:
            self.gain.accumulate_grad((upstream * xhat).sum(axis=(0, 2, 3)))
            self.bias.accumulate_grad(upstream.sum(axis=(0, 2, 3)))
        d_xhat = upstream * self.gain.data[None, :, None, None]
        mean_d = d_xhat.mean(axis=(2, 3), keepdims=True)
        mean_dx = (d_xhat * xhat).mean(axis=(2, 3), keepdims=True)
        return inv_std * (d_xhat - mean_d - xhat * mean_dx)


class Sequential(Layer):
    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def param_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            for pname, t in layer.param_items():
                items.append((f"{self.name}.{i}.{pname}", t))
        return items

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream, accumulate=True):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream, accumulate=accumulate)
        return upstream


class GradientReversal(Layer):
    """Identity forward; backward returns -alpha * upstream."""

    def __init__(self, alpha=1.0):
        self.alpha = float(alpha)
        self._seen = False

    def forward(self, x):
        self._seen = True
        return x

    def backward(self, upstream, accumulate=True):
        if not self._seen:
            raise StateError("gradient_reversal: backward called before forward")
        self._seen = False
        return -self.alpha * np.asarray(upstream, dtype=np.float64)


def cross_entropy_logits(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits).

    Returns (loss, d_loss/d_logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(b), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b
