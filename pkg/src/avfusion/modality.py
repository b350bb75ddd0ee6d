"""Decoder modality dropout: per-example AV/A/V draws and zero substitution.

Dropping a modality replaces its *encoded* feature sequence with a constant
zero tensor of the same shape, severing the gradient path into that encoder
entirely. Sampling is a training-time construct; evaluation forces a mode by
calling ``apply_selection`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import EncodedStreams
from .tensor import RngState, Tensor

__all__ = ["ModalitySelection", "DropoutPolicy", "sample_selection", "apply_selection"]

_SUM_TOL = 1e-12


class ModalitySelection(Enum):
    AV = "av"
    A = "a"
    V = "v"


@dataclass(frozen=True)
class DropoutPolicy:
    """Probabilities of keeping both modalities, audio only, or video only."""

    p_av: float
    p_a: float
    p_v: float

    def __post_init__(self):
        for name in ("p_av", "p_a", "p_v"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")
        total = self.p_av + self.p_a + self.p_v
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"dropout probabilities sum to {total}, expected 1")

    @classmethod
    def from_sequence(cls, seq) -> "DropoutPolicy":
        if len(seq) != 3:
            raise ValueError(f"dropout policy needs 3 probabilities, got {seq!r}")
        return cls(p_av=float(seq[0]), p_a=float(seq[1]), p_v=float(seq[2]))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_av, self.p_a, self.p_v)


def sample_selection(policy: DropoutPolicy, rng: RngState) -> ModalitySelection:
    """Draw one selection; consumes exactly one rng draw."""
    total = policy.p_av + policy.p_a + policy.p_v
    if abs(total - 1.0) > _SUM_TOL:
        raise ValueError(f"invalid dropout policy {policy}")
    u = float(rng.uniform())
    if u < policy.p_av:
        return ModalitySelection.AV
    if u < policy.p_av + policy.p_a:
        return ModalitySelection.A
    return ModalitySelection.V


def apply_selection(sel: ModalitySelection, streams: EncodedStreams) -> EncodedStreams:
    """Zero out the dropped modality's embedding sequence, shapes preserved."""
    if sel is ModalitySelection.AV:
        return streams
    if sel is ModalitySelection.A:
        if streams.video_feats is None:
            return streams
        return EncodedStreams(
            audio_feats=streams.audio_feats,
            video_feats=Tensor(np.zeros(streams.video_feats.shape)))
    return EncodedStreams(
        audio_feats=Tensor(np.zeros(streams.audio_feats.shape)),
        video_feats=streams.video_feats)
