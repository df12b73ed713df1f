"""Aggregators and the emotion classifier.

Two aggregators map frame-level features to a fixed utterance embedding:
plain masked mean pooling, and an ECAPA-TDNN built from SE-Res2 blocks with
channel-dependent attentive statistics pooling. Both accept padded batches
with a lengths vector and compute exactly what the batch-size-1 path would.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError
from .nn.layers import (
    Layer,
    Linear,
    ReLU,
    Sigmoid,
    TDNNBlock,
    lengths_to_mask,
    softmax_backward,
)

ASP_VAR_GUARD = 1e-12


def _mask_and_counts(x: np.ndarray, lengths):
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise DataError("every sequence in the batch needs at least one valid frame")
    mask = lengths_to_mask(lengths, x.shape[1])[..., None].astype(x.dtype)
    n = lengths.astype(x.dtype)[:, None, None]
    return mask, n


@dataclass(frozen=True)
class UtteranceEmbedding:
    """Fixed-size utterance vector with provenance."""

    utt_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        object.__setattr__(self, "vector", vec)
        if vec.ndim != 1:
            raise DataError(f"{self.utt_id}: embedding must be a vector, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{self.utt_id}: non-finite embedding values")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def late_fuse(e1: UtteranceEmbedding, e2: UtteranceEmbedding) -> UtteranceEmbedding:
    """Concatenate two utterance embeddings of the same utterance."""
    if e1.utt_id != e2.utt_id:
        raise DataError(
            f"cannot fuse embeddings of different utterances: {e1.utt_id!r} vs {e2.utt_id!r}")
    return UtteranceEmbedding(utt_id=e1.utt_id,
                              vector=np.concatenate([e1.vector, e2.vector]))


class MeanPoolAggregator(Layer):
    """Arithmetic mean over valid frames, per feature dimension."""

    def __init__(self, in_dim: int):
        self.in_dim = in_dim
        self._cache = None

    @property
    def embedding_dim(self) -> int:
        return self.in_dim

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise DimensionError(
                f"mean pool expects input (B, T, {self.in_dim}), got {x.shape}")
        mask, n = _mask_and_counts(x, lengths)
        out = (x * mask).sum(axis=1) / n[:, :, 0]
        self._cache = (mask, n, x.shape) if training else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mask, n, x_shape = self._cache
        return dout[:, None, :] * mask / n


class SEBlock(Layer):
    """Squeeze-excitation gate: per-channel sigmoid scale from the time mean."""

    def __init__(self, channels: int, bottleneck: int, *, rng, dtype=np.float32):
        self.fc1 = Linear(channels, bottleneck, rng=rng, dtype=dtype)
        self.act = ReLU()
        self.fc2 = Linear(bottleneck, channels, rng=rng, dtype=dtype)
        self.gate = Sigmoid()
        self._cache = None

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        mask, n = _mask_and_counts(x, lengths)
        s = (x * mask).sum(axis=1) / n[:, :, 0]
        g = self.gate.forward(
            self.fc2.forward(self.act.forward(self.fc1.forward(s, training), training),
                             training), training)
        if training:
            self._cache = (x, g, mask, n)
        return x * g[:, None, :]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, g, mask, n = self._cache
        dx = dout * g[:, None, :]
        dg = (dout * x).sum(axis=1)
        ds = self.fc1.backward(self.act.backward(self.fc2.backward(self.gate.backward(dg))))
        dx += ds[:, None, :] * mask / n
        return dx


class Res2Block(Layer):
    """Hierarchical multi-scale convolution over channel groups."""

    def __init__(self, channels: int, scale: int, kernel_size: int, dilation: int,
                 *, rng, dtype=np.float32):
        if channels % scale != 0:
            raise DimensionError(f"channels ({channels}) must divide by scale ({scale})")
        self.scale = scale
        self.width = channels // scale
        self.blocks = [TDNNBlock(self.width, self.width, kernel_size, dilation,
                                 rng=rng, dtype=dtype)
                       for _ in range(scale - 1)]

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        chunks = np.split(x, self.scale, axis=2)
        outs = [chunks[0]]
        prev = None
        for i in range(1, self.scale):
            inp = chunks[i] if i == 1 else chunks[i] + prev
            prev = self.blocks[i - 1].forward(inp, lengths, training)
            outs.append(prev)
        return np.concatenate(outs, axis=2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        douts = np.split(dout, self.scale, axis=2)
        dxs = [None] * self.scale
        carry = 0.0
        for i in range(self.scale - 1, 0, -1):
            din = self.blocks[i - 1].backward(douts[i] + carry)
            dxs[i] = din
            carry = din if i >= 2 else 0.0
        dxs[0] = douts[0]
        return np.concatenate(dxs, axis=2)


class SERes2Block(Layer):
    """1x1 TDNN -> Res2 -> 1x1 TDNN -> SE gate, with identity residual."""

    def __init__(self, channels: int, scale: int, se_bottleneck: int,
                 kernel_size: int, dilation: int, *, rng, dtype=np.float32):
        self.tdnn1 = TDNNBlock(channels, channels, 1, 1, rng=rng, dtype=dtype)
        self.res2 = Res2Block(channels, scale, kernel_size, dilation, rng=rng, dtype=dtype)
        self.tdnn2 = TDNNBlock(channels, channels, 1, 1, rng=rng, dtype=dtype)
        self.se = SEBlock(channels, se_bottleneck, rng=rng, dtype=dtype)

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        h = self.tdnn1.forward(x, lengths, training)
        h = self.res2.forward(h, lengths, training)
        h = self.tdnn2.forward(h, lengths, training)
        h = self.se.forward(h, lengths, training)
        return h + x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = self.se.backward(dout)
        dh = self.tdnn2.backward(dh)
        dh = self.res2.backward(dh)
        dh = self.tdnn1.backward(dh)
        return dh + dout


class AttentiveStatsPooling(Layer):
    """Channel-dependent attention over time; pools weighted mean and std.

    Attention logits come from a two-layer tanh network over the input frames
    augmented with each sequence's global mean and std (computed over valid
    frames only). Masked frames get -inf logits so their attention weight is
    exactly zero. The pooled std is sqrt(sum(alpha * h^2) - mu^2) with the
    variance clamped at zero before the square root.
    """

    def __init__(self, channels: int, attention_channels: int, *, rng, dtype=np.float32):
        self.channels = channels
        self.attn1 = Linear(3 * channels, attention_channels, rng=rng, dtype=dtype)
        self.attn2 = Linear(attention_channels, channels, rng=rng, dtype=dtype)
        self.last_attention: np.ndarray | None = None
        self._cache = None

    @property
    def out_dim(self) -> int:
        return 2 * self.channels

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        mask, n = _mask_and_counts(x, lengths)
        bool_mask = mask > 0

        mu_g = (x * mask).sum(axis=1, keepdims=True) / n
        var_g = (np.square(x - mu_g) * mask).sum(axis=1, keepdims=True) / n
        sig_g = np.sqrt(np.maximum(var_g, 0.0))
        ctx = np.concatenate(
            [x, np.broadcast_to(mu_g, x.shape), np.broadcast_to(sig_g, x.shape)], axis=2)

        z = np.tanh(self.attn1.forward(ctx, training))
        logits = self.attn2.forward(z, training)
        logits = np.where(bool_mask, logits, -np.inf)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(shifted)
        alpha = expl / expl.sum(axis=1, keepdims=True)
        self.last_attention = alpha

        # the E[h^2] - E[h]^2 form cancels catastrophically in float32 when a
        # channel is near-constant; accumulate the pooled moments in float64
        mu = (alpha * x).sum(axis=1, dtype=np.float64)
        m2 = (alpha * np.square(x)).sum(axis=1, dtype=np.float64)
        var = m2 - np.square(mu)
        var_c = np.maximum(var, 0.0)
        sigma = np.sqrt(var_c)

        if training:
            self._cache = (x, mask, n, mu_g, var_g, sig_g, z, alpha, mu, var, sigma)
        return np.concatenate([mu, sigma], axis=1).astype(x.dtype, copy=False)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, mask, n, mu_g, var_g, sig_g, z, alpha, mu, var, sigma = self._cache
        c = self.channels
        dmu_out = dout[:, :c]
        dsig = dout[:, c:]

        safe_sigma = np.where(var > ASP_VAR_GUARD, sigma, 1.0)
        dvar = np.where(var > ASP_VAR_GUARD, dsig * 0.5 / safe_sigma, 0.0)
        dm2 = dvar
        dmu = dmu_out - 2.0 * mu * dvar

        dalpha = dmu[:, None, :] * x + dm2[:, None, :] * np.square(x)
        dx = alpha * (dmu[:, None, :] + 2.0 * x * dm2[:, None, :])

        dlogits = softmax_backward(alpha, dalpha, axis=1) * mask
        dz = self.attn2.backward(dlogits)
        dctx = self.attn1.backward(dz * (1.0 - np.square(z)))

        dx += dctx[:, :, :c]
        dmu_g = dctx[:, :, c:2 * c].sum(axis=1, keepdims=True)
        dsig_g = dctx[:, :, 2 * c:].sum(axis=1, keepdims=True)
        safe_sig_g = np.where(var_g > ASP_VAR_GUARD, sig_g, 1.0)
        dvar_g = np.where(var_g > ASP_VAR_GUARD, dsig_g * 0.5 / safe_sig_g, 0.0)
        # var_g's dependence on mu_g cancels exactly (sum of centered frames is 0)
        dx += dvar_g * 2.0 * (x - mu_g) * mask / n
        dx += dmu_g * mask / n
        return (dx * mask).astype(x.dtype, copy=False)


@dataclass(frozen=True)
class EcapaConfig:
    """ECAPA-TDNN hyperparameters; defaults follow the reference design."""

    channels: int = 512
    kernel_sizes: Sequence[int] = (5, 3, 3, 3)
    dilations: Sequence[int] = (1, 2, 3, 4)
    res2_scale: int = 8
    se_bottleneck: int = 128
    attention_channels: int = 128
    embedding_dim: int = 192

    def __post_init__(self):
        for name in ("channels", "res2_scale", "se_bottleneck",
                     "attention_channels", "embedding_dim"):
            if getattr(self, name) < 1:
                raise DataError(f"ecapa {name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.res2_scale != 0:
            raise DataError(
                f"ecapa channels ({self.channels}) must divide by res2_scale ({self.res2_scale})")
        if len(self.kernel_sizes) != 4 or len(self.dilations) != 4:
            raise DataError("ecapa needs 4 kernel sizes and 4 dilations (stem + 3 blocks)")


SMALL_ECAPA = EcapaConfig(channels=64, res2_scale=8, se_bottleneck=32,
                          attention_channels=32, embedding_dim=48)


class EcapaAggregator(Layer):
    """TDNN stem, three SE-Res2 blocks, multi-layer aggregation, attentive
    statistics pooling, and a linear projection to the embedding."""

    def __init__(self, in_dim: int, cfg: EcapaConfig | None = None, *,
                 rng, dtype=np.float32):
        cfg = cfg or EcapaConfig()
        self.in_dim = in_dim
        self.cfg = cfg
        c = cfg.channels
        self.stem = TDNNBlock(in_dim, c, cfg.kernel_sizes[0], cfg.dilations[0],
                              rng=rng, dtype=dtype)
        self.blocks = [
            SERes2Block(c, cfg.res2_scale, cfg.se_bottleneck,
                        cfg.kernel_sizes[i], cfg.dilations[i], rng=rng, dtype=dtype)
            for i in (1, 2, 3)
        ]
        self.mfa = TDNNBlock(3 * c, 3 * c, 1, 1, rng=rng, dtype=dtype)
        self.asp = AttentiveStatsPooling(3 * c, cfg.attention_channels, rng=rng, dtype=dtype)
        self.embed = Linear(6 * c, cfg.embedding_dim, rng=rng, dtype=dtype)

    @property
    def embedding_dim(self) -> int:
        return self.cfg.embedding_dim

    @staticmethod
    def _check_finite(stage: str, arr: np.ndarray) -> None:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite activations after ecapa stage {stage!r}")

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise DimensionError(
                f"ecapa expects input (B, T, {self.in_dim}), got {x.shape}")
        h = self.stem.forward(x, lengths, training)
        self._check_finite("stem", h)
        taps = []
        for i, block in enumerate(self.blocks):
            h = block.forward(h, lengths, training)
            self._check_finite(f"block{i + 1}", h)
            taps.append(h)
        cat = np.concatenate(taps, axis=2)
        m = self.mfa.forward(cat, lengths, training)
        self._check_finite("mfa", m)
        pooled = self.asp.forward(m, lengths, training)
        self._check_finite("asp", pooled)
        emb = self.embed.forward(pooled, training)
        self._check_finite("embed", emb)
        return emb

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dpooled = self.embed.backward(dout)
        dm = self.asp.backward(dpooled)
        dcat = self.mfa.backward(dm)
        c = self.cfg.channels
        dtaps = [dcat[:, :, i * c:(i + 1) * c] for i in range(3)]
        dh = dtaps[2]
        dh = self.blocks[2].backward(dh) + dtaps[1]
        dh = self.blocks[1].backward(dh) + dtaps[0]
        dh = self.blocks[0].backward(dh)
        return self.stem.backward(dh)


def classify(embedding: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map from utterance embedding(s) to emotion logits."""
    embedding = np.asarray(embedding)
    if embedding.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"classifier expects embeddings of dim {weight.shape[1]}, "
            f"got trailing axis {embedding.shape[-1]}")
    return embedding @ weight.T + bias
