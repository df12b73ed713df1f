"""WAV ingestion and log-mel filterbank features.

The front end accepts 16 kHz 16-bit PCM mono WAV only; resampling is out of
scope, so anything else is rejected with the offending field named. Feature
extraction is the usual energy pipeline: pre-emphasis, 25 ms Hamming windows
every 10 ms, power spectrum, triangular mel filterbank on the HTK mel scale,
natural log with an absolute floor. No pitch features are appended.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono float32 samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise DataError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        if samples.size < 400:
            raise DataError(
                f"waveform has {samples.size} samples, need at least 400 (one analysis window)")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a 16 kHz 16-bit PCM mono RIFF/WAVE file."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            rate = wf.getframerate()
            width = wf.getsampwidth()
            comp = wf.getcomptype()
            if channels != 1:
                raise FormatError(f"{path}: channels={channels}, expected mono")
            if rate != SAMPLE_RATE:
                raise FormatError(f"{path}: sample_rate={rate}, expected {SAMPLE_RATE}")
            if width != 2:
                raise FormatError(f"{path}: sample_width={8 * width} bit, expected 16 bit PCM")
            if comp != "NONE":
                raise FormatError(f"{path}: compression={comp}, expected uncompressed PCM")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples=samples)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class FbankConfig:
    """Log-mel filterbank settings. The analysis window is always Hamming."""

    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    pre_emphasis: float = 0.97
    fft_size: int = 512
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise DataError(
                f"window_ms ({self.window_ms}) must exceed hop_ms ({self.hop_ms}) > 0")
        if self.n_mels < 1:
            raise DataError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.fft_size < self.window_samples:
            raise DataError(
                f"fft_size ({self.fft_size}) smaller than window ({self.window_samples} samples)")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * SAMPLE_RATE / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * SAMPLE_RATE / 1000.0))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FbankConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters (n_mels, fft_size // 2 + 1) covering 0 Hz to Nyquist."""
    n_bins = cfg.fft_size // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / cfg.fft_size
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    left, center, right = hz_points[:-2], hz_points[1:-1], hz_points[2:]
    up = (fft_freqs[None, :] - left[:, None]) / (center - left)[:, None]
    down = (right[:, None] - fft_freqs[None, :]) / (right - center)[:, None]
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, cfg: FbankConfig) -> int:
    """T = 1 + floor((N - window) / hop); requires N >= window."""
    return 1 + (n_samples - cfg.window_samples) // cfg.hop_samples


def log_mel_fbank(wave_in: Waveform, cfg: FbankConfig | None = None) -> np.ndarray:
    """Log-mel energies, shape (T, n_mels), float32.

    The natural log is floored at ``cfg.log_floor`` so silence maps to
    ln(log_floor) instead of -inf.
    """
    cfg = cfg or FbankConfig()
    win = cfg.window_samples
    hop = cfg.hop_samples
    x = wave_in.samples.astype(np.float64)
    if x.size < win:
        raise DataError(f"waveform has {x.size} samples, shorter than one {win}-sample window")

    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - cfg.pre_emphasis * x[:-1]

    t = frame_count(x.size, cfg)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = emphasized[idx] * np.hamming(win)

    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = np.square(np.abs(spectrum))
    mel_energy = power @ mel_filterbank(cfg).T
    log_energy = np.log(np.maximum(mel_energy, cfg.log_floor))
    return log_energy.astype(np.float32)
