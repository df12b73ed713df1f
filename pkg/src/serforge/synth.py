"""Synthetic 4-class dataset generator.

Emits a corpus shaped like the real evaluation protocol expects: 5 sessions
of 2 exclusive speakers each, WAV audio, class-correlated transcripts, and a
JSONL manifest. Each emotion class gets a distinct acoustic recipe
(carrier band, amplitude-modulation rate, frequency wobble) with per-speaker
and per-session variation, so the classes are separable but not trivial
duplicates.

Alongside the audio, the generator writes stand-in feature files for the
``w2v2``/``hubert``/``bert`` sources: fixed seeded projections of the fbank
(frame-pair averaged to ~50 fps) for the audio models, and token-hash
embeddings of the transcript for the text model. They let every checked-in
experiment config run end to end without large pretrained models; swap in
real exported features for production runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, FbankConfig, Waveform, log_mel_fbank, write_wav
from .features import write_features

CLASS_RECIPES = {
    # carrier Hz, AM rate Hz, wobble depth
    "angry": (3100.0, 13.0, 0.06),
    "happy": (1750.0, 8.0, 0.04),
    "neutral": (850.0, 4.5, 0.02),
    "sad": (420.0, 2.0, 0.03),
}

CLASS_VOCAB = {
    "angry": ["slam", "grit", "snap", "burn", "clash", "storm"],
    "happy": ["glow", "bloom", "spark", "cheer", "bright", "dance"],
    "neutral": ["table", "paper", "window", "stone", "path", "plain"],
    "sad": ["fade", "drift", "grey", "hollow", "slow", "rain"],
}
FILLER_WORDS = ["the", "a", "so", "and", "then"]

EXCLUDED_EXTRA_LABELS = ("frustrated", "fear", "surprised")

PSEUDO_AUDIO_DIM = 64
PSEUDO_TEXT_DIM = 32


@dataclass(frozen=True)
class SynthSummary:
    manifest_path: str
    n_utterances: int
    n_excluded: int
    per_class: dict


def _tone(rng: np.random.Generator, label: str, speaker_idx: int,
          session: int, duration: float) -> np.ndarray:
    carrier, am_rate, wobble = CLASS_RECIPES[label]
    n = int(duration * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    carrier = carrier * (1.0 + 0.04 * speaker_idx) * (1.0 + 0.015 * (session - 3) / 2)
    carrier *= 1.0 + rng.uniform(-0.02, 0.02)
    phase_wobble = wobble * carrier * np.sin(2 * np.pi * rng.uniform(1.0, 2.5) * t) / 4.0
    phase = 2 * np.pi * np.cumsum(carrier + phase_wobble) / SAMPLE_RATE
    am = 1.0 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    signal = 0.3 * am * np.sin(phase)
    signal += 0.01 * rng.normal(size=n)
    # soft fade at both ends keeps the PCM clip-free
    edge = min(400, n // 10)
    ramp = np.linspace(0.0, 1.0, edge)
    signal[:edge] *= ramp
    signal[-edge:] *= ramp[::-1]
    return np.clip(signal, -0.99, 0.99).astype(np.float32)


def _transcript(rng: np.random.Generator, label: str) -> str:
    vocab = CLASS_VOCAB[label]
    n_words = int(rng.integers(4, 10))
    words = []
    for _ in range(n_words):
        pool = vocab if rng.random() < 0.7 else FILLER_WORDS
        words.append(pool[int(rng.integers(len(pool)))])
    return " ".join(words)


def _token_vector(token: str) -> np.ndarray:
    digest = hashlib.sha256(token.encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).normal(size=PSEUDO_TEXT_DIM).astype(np.float32)


def pseudo_text_features(transcript: str) -> np.ndarray:
    """Token-hash embeddings, one frame per word."""
    tokens = transcript.split()
    if not tokens:
        raise ValueError("transcript is empty")
    return np.stack([_token_vector(tok) for tok in tokens])


def _projection(source: str, n_mels: int) -> np.ndarray:
    digest = hashlib.sha256(source.encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.normal(scale=1.0 / np.sqrt(n_mels),
                      size=(n_mels, PSEUDO_AUDIO_DIM)).astype(np.float32)


def pseudo_audio_features(samples: np.ndarray, source: str,
                          cfg: FbankConfig | None = None) -> np.ndarray:
    """Stand-in self-supervised features: projected fbank at half frame rate."""
    cfg = cfg or FbankConfig()
    fb = log_mel_fbank(Waveform(samples=samples), cfg).astype(np.float64)
    fb = (fb - fb.mean(axis=0)) / (fb.std(axis=0) + 1e-6)
    h = np.tanh(fb @ _projection(source, cfg.n_mels))
    t2 = (h.shape[0] // 2) * 2
    return ((h[0:t2:2] + h[1:t2:2]) / 2.0).astype(np.float32)


def generate_dataset(out_dir, seed: int = 0, utts_per_speaker_class: int = 5,
                     duration_range=(0.8, 1.4), write_pseudo_features: bool = True,
                     n_excluded_extras: int = 3) -> SynthSummary:
    """Write WAVs, stand-in features and the manifest; returns a summary."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    per_class: dict[str, int] = {}

    for session in range(1, 6):
        for speaker_idx, letter in enumerate("AB"):
            speaker = f"spk{session}{letter}"
            for label in CLASS_RECIPES:
                for k in range(utts_per_speaker_class):
                    rng = np.random.default_rng(
                        [seed, session, speaker_idx, sorted(CLASS_RECIPES).index(label), k])
                    utt_id = f"s{session}{letter.lower()}_{label}_{k:03d}"
                    duration = float(rng.uniform(*duration_range))
                    samples = _tone(rng, label, speaker_idx, session, duration)
                    write_wav(out_dir / "wav" / f"{utt_id}.wav", samples)
                    transcript = _transcript(rng, label)
                    # a slice of happy utterances carries the raw "excited"
                    # label so label canonicalization gets real work
                    raw_label = label
                    if label == "happy" and k % 3 == 1:
                        raw_label = "excited"
                    row = {
                        "utt_id": utt_id,
                        "session": session,
                        "speaker": speaker,
                        "label": raw_label,
                        "audio": f"wav/{utt_id}.wav",
                        "transcript": transcript,
                    }
                    if write_pseudo_features:
                        feats = {}
                        for source in ("w2v2", "hubert"):
                            rel = f"features/{source}/{utt_id}.serf"
                            write_features(out_dir / rel,
                                           pseudo_audio_features(samples, source))
                            feats[source] = rel
                        rel = f"features/bert/{utt_id}.serf"
                        write_features(out_dir / rel, pseudo_text_features(transcript))
                        feats["bert"] = rel
                        row["features"] = feats
                    rows.append(row)
                    per_class[label] = per_class.get(label, 0) + 1

    # a few utterances with out-of-scope labels exercise manifest exclusion
    for j in range(n_excluded_extras):
        rng = np.random.default_rng([seed, 99, j])
        label = EXCLUDED_EXTRA_LABELS[j % len(EXCLUDED_EXTRA_LABELS)]
        session = int(rng.integers(1, 6))
        utt_id = f"extra_{label}_{j:02d}"
        samples = _tone(rng, "neutral", 0, session, float(rng.uniform(*duration_range)))
        write_wav(out_dir / "wav" / f"{utt_id}.wav", samples)
        rows.append({
            "utt_id": utt_id,
            "session": session,
            "speaker": f"spk{session}A",
            "label": label,
            "audio": f"wav/{utt_id}.wav",
            "transcript": _transcript(rng, "neutral"),
        })

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return SynthSummary(manifest_path=str(manifest_path),
                        n_utterances=len(rows) - n_excluded_extras,
                        n_excluded=n_excluded_extras,
                        per_class=per_class)
