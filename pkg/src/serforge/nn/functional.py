"""Functional single-sequence views of the layer math.

These mirror the layer classes on unbatched arrays, which keeps small numeric
experiments and tests close to the written definitions. Model code uses the
layer classes in :mod:`serforge.nn.layers`.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, DimensionError
from .layers import (
    BN_EPS,
    BN_MOMENTUM,
    conv1d_backward_input,
    conv1d_core,
    softmax,
    stable_sigmoid,
)

__all__ = [
    "conv1d_forward",
    "linear_forward",
    "batchnorm1d",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "cross_entropy",
]


def conv1d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   dilation: int = 1) -> np.ndarray:
    """Dilated same-padded convolution of a (T, Cin) sequence.

    weight is (Cout, Cin, K) with odd K; output is (T, Cout).
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 2:
        raise DimensionError(f"conv1d_forward expects (T, Cin) input, got shape {x.shape}")
    if weight.ndim != 3:
        raise DimensionError(f"conv1d_forward expects (Cout, Cin, K) weight, got {weight.shape}")
    if weight.shape[2] % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got K={weight.shape[2]}")
    if dilation < 1:
        raise DimensionError(f"dilation must be >= 1, got {dilation}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"channel mismatch: input Cin={x.shape[1]}, weight Cin={weight.shape[1]}")
    if bias is not None and np.asarray(bias).shape != (weight.shape[0],):
        raise DimensionError(
            f"bias shape {np.asarray(bias).shape} does not match Cout={weight.shape[0]}")
    out, _ = conv1d_core(x[None], weight, bias, dilation)
    return out[0]


def conv1d_grads(x: np.ndarray, weight: np.ndarray, dilation: int,
                 dout: np.ndarray):
    """Gradients of conv1d_forward: returns (dx, dweight, dbias)."""
    t, cin = x.shape
    cout, _, k = weight.shape
    _, xw2 = conv1d_core(x[None], weight, None, dilation)
    d2 = dout.reshape(t, cout)
    dw = (d2.T @ xw2).reshape(cout, k, cin).transpose(0, 2, 1)
    db = d2.sum(axis=0)
    dx = conv1d_backward_input(dout[None], weight, dilation)[0]
    return dx, dw, db


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map along the trailing axis: x (..., Din) -> (..., Dout)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"trailing axis mismatch: input Din={x.shape[-1]}, weight Din={weight.shape[1]}")
    return x @ weight.T + bias


def batchnorm1d(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                running_stats: dict, mode: str = "train") -> np.ndarray:
    """Normalize a (T, C) sequence per channel over the time axis.

    ``running_stats`` is a dict with "mean" and "var" arrays of shape (C,);
    train mode normalizes with the sequence's own statistics and updates the
    dict in place with momentum 0.1, eval mode uses the stored statistics.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm1d expects (T, C) input, got shape {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running mean", running_stats["mean"]),
                      ("running var", running_stats["var"])):
        if np.asarray(arr).shape != (c,):
            raise DimensionError(
                f"{name} has shape {np.asarray(arr).shape}, expected ({c},) to match input channels")
    if mode == "train":
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_stats["mean"] = (1 - BN_MOMENTUM) * running_stats["mean"] + BN_MOMENTUM * mean
        running_stats["var"] = (1 - BN_MOMENTUM) * running_stats["var"] + BN_MOMENTUM * var
    elif mode == "eval":
        mean = running_stats["mean"]
        var = running_stats["var"]
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xhat = (x - mean) / np.sqrt(var + BN_EPS)
    return gamma * xhat + beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return stable_sigmoid(x)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax at the true class.

    Returns (loss, dloss/dlogits). Labels outside [0, C) raise a DataError
    naming the offending record.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match N={n} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label out of range at record {i}: {int(labels[i])} not in [0, {c})")
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
