"""Dense layers with explicit forward/backward passes.

Everything here operates on plain numpy arrays. Sequence layers take input of
shape ``(B, T, C)`` plus an optional ``lengths`` vector marking how many
leading frames of each row are valid; padded frames are kept at zero so that
a padded batch computes exactly what a batch-size-1 loop would.

Backward passes are written per layer (no tape). A layer caches what its
backward needs only when called with ``training=True``; eval-mode forward
passes mutate nothing, so concurrent inference over one model is safe.

Production dtype is float32. Every layer accepts ``dtype=np.float64`` for
finite-difference verification, where float32 rounding would drown the
signal.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .params import Parameter, he_uniform

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def lengths_to_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean mask (B, T) with True for valid frames."""
    lengths = np.asarray(lengths, dtype=np.int64)
    return np.arange(max_len)[None, :] < lengths[:, None]


def _full_lengths(x: np.ndarray) -> np.ndarray:
    return np.full(x.shape[0], x.shape[1], dtype=np.int64)


class Layer:
    """Base class: parameter discovery by attribute walk (insertion order)."""

    def named_parameters(self):
        for attr, obj in self.__dict__.items():
            if isinstance(obj, Parameter):
                yield attr, obj
            elif isinstance(obj, Layer):
                for name, p in obj.named_parameters():
                    yield f"{attr}.{name}", p
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Layer):
                        for name, p in item.named_parameters():
                            yield f"{attr}{i}.{name}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv1d_gather(x: np.ndarray, kernel_size: int, dilation: int) -> np.ndarray:
    """Stack dilated windows: (B, T, C) -> (B, T, K, C) with same zero padding."""
    b, t, c = x.shape
    pad = dilation * (kernel_size - 1) // 2
    xp = np.zeros((b, t + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + t] = x
    idx = np.arange(t)[:, None] + np.arange(kernel_size)[None, :] * dilation
    return xp[:, idx, :]


def conv1d_core(x: np.ndarray, weight: np.ndarray, bias, dilation: int):
    """Dilated stride-1 cross-correlation with same zero padding.

    x: (B, T, Cin), weight: (Cout, Cin, K), bias: (Cout,) or None.
    Returns (out (B, T, Cout), window cache for backward).
    """
    b, t, cin = x.shape
    cout, _, k = weight.shape
    xw = _conv1d_gather(x, k, dilation)  # (B, T, K, Cin)
    xw2 = xw.reshape(b * t, k * cin)
    w2 = weight.transpose(2, 1, 0).reshape(k * cin, cout)
    out = xw2 @ w2
    if bias is not None:
        out += bias
    return out.reshape(b, t, cout), xw2


def conv1d_backward_input(dout: np.ndarray, weight: np.ndarray, dilation: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input.

    For stride 1 with symmetric zero padding this is a cross-correlation of
    the output gradient with the kernel flipped along K and transposed in its
    channel axes.
    """
    w_flip = weight[:, :, ::-1].transpose(1, 0, 2)  # (Cin, Cout, K)
    dx, _ = conv1d_core(dout, np.ascontiguousarray(w_flip), None, dilation)
    return dx


class Conv1d(Layer):
    """1D convolution over time, stride 1, odd kernel, same zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int = 1, *, rng: np.random.Generator, dtype=np.float32):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise DimensionError(f"kernel_size must be odd and positive, got {kernel_size}")
        if dilation < 1:
            raise DimensionError(f"dilation must be >= 1, got {dilation}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        fan_in = in_channels * kernel_size
        self.weight = Parameter(
            he_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise DimensionError(
                f"conv1d expects input (B, T, {self.in_channels}), got {x.shape}")
        out, xw2 = conv1d_core(x, self.weight.value, self.bias.value, self.dilation)
        self._cache = (xw2, x.shape) if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xw2, x_shape = self._cache
        b, t, cin = x_shape
        cout, _, k = self.weight.value.shape
        dout2 = dout.reshape(b * t, cout)
        dw = (dout2.T @ xw2).reshape(cout, k, cin).transpose(0, 2, 1)
        self.weight.grad += dw
        self.bias.grad += dout2.sum(axis=0)
        return conv1d_backward_input(dout, self.weight.value, self.dilation)


class Linear(Layer):
    """Affine map along the trailing axis."""

    def __init__(self, in_dim: int, out_dim: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(he_uniform(rng, (out_dim, in_dim), in_dim, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear expects trailing axis {self.in_dim}, got input shape {x.shape}")
        out = x @ self.weight.value.T + self.bias.value
        self._cache = x if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._cache
        x2 = x.reshape(-1, self.in_dim)
        d2 = dout.reshape(-1, self.out_dim)
        self.weight.grad += d2.T @ x2
        self.bias.grad += d2.sum(axis=0)
        return (d2 @ self.weight.value).reshape(x.shape)


class BatchNorm1d(Layer):
    """Per-channel batch normalization over valid time frames.

    Training mode normalizes with statistics pooled over every valid frame
    in the batch (padded frames excluded) and updates running statistics
    with momentum 0.1; with batch size 1 this reduces to statistics over the
    sequence's own time axis. Eval mode applies the stored running
    statistics, so padded eval batches are exactly equivalent to looping
    utterances one at a time.
    """

    def __init__(self, channels: int, *, dtype=np.float32):
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=dtype), trainable=False)
        self._cache = None

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise DimensionError(
                f"batchnorm expects input (B, T, {self.channels}), got {x.shape}")
        if lengths is None:
            lengths = _full_lengths(x)
        mask = lengths_to_mask(lengths, x.shape[1])[..., None].astype(x.dtype)
        total = x.dtype.type(np.asarray(lengths).sum())

        if training:
            mean = (x * mask).sum(axis=(0, 1)) / total
            var = (np.square(x - mean) * mask).sum(axis=(0, 1)) / total
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * inv_std * mask
            self.running_mean.value[...] = (
                (1 - BN_MOMENTUM) * self.running_mean.value + BN_MOMENTUM * mean)
            self.running_var.value[...] = (
                (1 - BN_MOMENTUM) * self.running_var.value + BN_MOMENTUM * var)
            self._cache = (xhat, inv_std, mask, total)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.value + BN_EPS)
            xhat = (x - self.running_mean.value) * inv_std * mask
            self._cache = None
        return (self.gamma.value * xhat + self.beta.value) * mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, mask, total = self._cache
        dout = dout * mask
        self.beta.grad += dout.sum(axis=(0, 1))
        self.gamma.grad += (dout * xhat).sum(axis=(0, 1))
        dxhat = dout * self.gamma.value
        sum_d = dxhat.sum(axis=(0, 1))
        sum_dx = (dxhat * xhat).sum(axis=(0, 1))
        dx = inv_std / total * (total * dxhat - sum_d - xhat * sum_dx)
        return dx * mask


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = np.maximum(x, 0)
        self._cache = (x > 0) if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._cache


class Tanh(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = np.tanh(x)
        self._cache = out if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        y = self._cache
        return dout * (1.0 - y * y)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Sigmoid without overflow for large negative inputs."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = stable_sigmoid(np.asarray(x))
        self._cache = out if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        y = self._cache
        return dout * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along the named axis (max-subtracted)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dout: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward of softmax given its output y."""
    inner = (dout * y).sum(axis=axis, keepdims=True)
    return y * (dout - inner)


class Softmax(Layer):
    """Softmax over a fixed axis."""

    def __init__(self, axis: int = -1):
        self.axis = axis
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = softmax(x, axis=self.axis)
        self._cache = out if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return softmax_backward(self._cache, dout, axis=self.axis)


class TDNNBlock(Layer):
    """Conv1d -> ReLU -> BatchNorm1d, the time-delay unit used throughout."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int = 1, *, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv1d(in_channels, out_channels, kernel_size, dilation,
                           rng=rng, dtype=dtype)
        self.act = ReLU()
        self.norm = BatchNorm1d(out_channels, dtype=dtype)

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        h = self.conv.forward(x, training)
        h = self.act.forward(h, training)
        return self.norm.forward(h, lengths, training)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = self.norm.backward(dout)
        dh = self.act.backward(dh)
        return self.conv.backward(dh)
