"""Upstream feature sources: fbank front end and the trainable toy encoder.

The toy encoder is a deliberately small two-layer convolutional network over
fbank frames. It is the in-engine stand-in for a large self-supervised
speech encoder: it preserves the frame rate, emits a fixed 64-dim feature
stream, and its weights take gradients so the joint fine-tuning and
checkpoint-averaging machinery can be exercised end to end at desk scale.
"""

from __future__ import annotations

import numpy as np

from .audio import FbankConfig, Waveform, log_mel_fbank
from .features import FeatureSequence
from .nn.layers import Layer, TDNNBlock

TOY_CHANNELS = 64
TOY_KERNEL = 3


def fbank_upstream(wave_in: Waveform, cfg: FbankConfig | None = None,
                   utt_id: str = "") -> FeatureSequence:
    """Log-mel filterbank features tagged as the fbank source."""
    return FeatureSequence(utt_id=utt_id, source="fbank", data=log_mel_fbank(wave_in, cfg))


class ToyEncoder(Layer):
    """Two TDNN blocks (n_mels -> 64 -> 64, kernel 3) over fbank frames."""

    def __init__(self, n_mels: int = 40, channels: int = TOY_CHANNELS, *,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.n_mels = n_mels
        self.channels = channels
        self.block1 = TDNNBlock(n_mels, channels, TOY_KERNEL, rng=rng, dtype=dtype)
        self.block2 = TDNNBlock(channels, channels, TOY_KERNEL, rng=rng, dtype=dtype)

    @property
    def out_dim(self) -> int:
        return self.channels

    @property
    def dtype(self):
        return self.block1.conv.weight.dtype

    def forward(self, x: np.ndarray, lengths=None, training: bool = False) -> np.ndarray:
        h = self.block1.forward(x, lengths, training)
        return self.block2.forward(h, lengths, training)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.block1.backward(self.block2.backward(dout))


def toy_encode(wave_in: Waveform, encoder: ToyEncoder,
               cfg: FbankConfig | None = None, utt_id: str = "",
               training: bool = False) -> FeatureSequence:
    """Encode a waveform with the toy upstream; frame count matches fbank."""
    fbank = log_mel_fbank(wave_in, cfg)
    encoded = encoder.forward(fbank[None].astype(encoder.dtype), training=training)[0]
    return FeatureSequence(utt_id=utt_id, source="toy", data=encoded)
