"""SNR-exact additive noise in feature space.

Four categories: babble (mean of 6 distinct bank streams), speech (one
competing bank stream), natural (white Gaussian), music (AR(1) low-pass
colored Gaussian at unit power). Power is mean squared frame energy, so a
target SNR is hit exactly by closed-form scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Utterance
from .tensor import RngState

__all__ = [
    "CATEGORIES",
    "NoiseSpec",
    "NoiseBank",
    "measure_power",
    "scale_for_snr",
    "tile_crop",
    "mix",
    "draw_noise",
    "sample_category",
]

CATEGORIES = ("babble", "speech", "music", "natural")

_BABBLE_STREAMS = 6       # overlapping "speakers" per babble draw
_MUSIC_AR_COEFF = 0.9


@dataclass(frozen=True)
class NoiseSpec:
    category: str
    snr_db: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown noise category {self.category!r}; "
                             f"expected one of {CATEGORIES}")
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


class NoiseBank:
    """Pool of audio-frame streams reserved from the training split."""

    def __init__(self, streams: list[np.ndarray], stream_ids: list[str],
                 seed: int = 0):
        if len(streams) != len(stream_ids):
            raise ValueError("streams and ids must align")
        if not streams:
            raise ValueError("noise bank is empty")
        self.streams = [np.asarray(s, dtype=np.float64) for s in streams]
        self.stream_ids = list(stream_ids)
        self.feat_dim = self.streams[0].shape[1]
        self.seed = seed

    @classmethod
    def from_utterances(cls, utterances: list[Utterance], size: int,
                        seed: int) -> "NoiseBank":
        if size < 1:
            raise ValueError("bank size must be positive")
        rng = RngState(seed).derive("noise-bank")
        size = min(size, len(utterances))
        idx = rng.choice(len(utterances), size=size, replace=False)
        picked = [utterances[int(i)] for i in sorted(idx)]
        return cls([u.audio_frames for u in picked], [u.utt_id for u in picked],
                   seed=seed)


def measure_power(frames: np.ndarray) -> float:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        raise ValueError("cannot measure power of an empty stream")
    return float(np.mean(frames * frames))


def scale_for_snr(p_signal: float, p_noise: float, snr_db: float) -> float:
    """Noise scale alpha hitting the target SNR exactly under mean-square power."""
    if p_signal <= 0.0 or p_noise <= 0.0:
        raise ValueError(f"powers must be positive, got signal={p_signal} noise={p_noise}")
    return math.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))


def tile_crop(noise: np.ndarray, length: int) -> np.ndarray:
    """Tile a noise stream along time and crop to ``length`` frames."""
    if noise.shape[0] == 0:
        raise ValueError("empty noise stream")
    if noise.shape[0] >= length:
        return noise[:length]
    reps = -(-length // noise.shape[0])
    return np.tile(noise, (reps, 1))[:length]


def mix(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """``signal + alpha * noise`` with alpha from the cropped noise's power."""
    signal = np.asarray(signal, dtype=np.float64)
    cropped = tile_crop(np.asarray(noise, dtype=np.float64), signal.shape[0])
    alpha = scale_for_snr(measure_power(signal), measure_power(cropped), snr_db)
    return signal + alpha * cropped


def draw_noise(bank: NoiseBank, spec: NoiseSpec, length: int, rng: RngState,
               exclude_id: str | None = None) -> np.ndarray:
    """Draw ``length`` frames of the requested category.

    ``exclude_id`` keeps a signal utterance from serving as its own noise.
    """
    if length < 1:
        raise ValueError("noise length must be positive")
    if spec.category == "natural":
        return rng.normal((length, bank.feat_dim))
    if spec.category == "music":
        white = rng.normal((length, bank.feat_dim))
        colored = np.empty_like(white)
        colored[0] = white[0]
        for t in range(1, length):
            colored[t] = _MUSIC_AR_COEFF * colored[t - 1] + white[t]
        return colored / math.sqrt(measure_power(colored))

    eligible = [i for i, sid in enumerate(bank.stream_ids) if sid != exclude_id]
    if spec.category == "speech":
        if not eligible:
            raise ValueError("no eligible bank stream for speech noise")
        pick = eligible[int(rng.integers(0, len(eligible)))]
        return tile_crop(bank.streams[pick], length)
    # babble
    if len(eligible) < _BABBLE_STREAMS:
        raise ValueError(f"babble needs {_BABBLE_STREAMS} distinct streams, "
                         f"bank offers {len(eligible)}")
    picks = rng.choice(len(eligible), size=_BABBLE_STREAMS, replace=False)
    stack = [tile_crop(bank.streams[eligible[int(i)]], length) for i in picks]
    return np.mean(stack, axis=0)


def sample_category(rng: RngState) -> str:
    """Uniform draw over the four categories (training-time mixing)."""
    return CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
