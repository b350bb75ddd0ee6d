"""Two-encoder / one-decoder recognizer with tanh-gated visual cross-attention.

Decoder blocks run [causal self-attention -> gated visual cross-attention ->
audio cross-attention -> feed-forward], all pre-norm with residuals. The
gated sublayers start at gate zero, so a freshly added visual path is an
exact identity map and the model reproduces its audio-only twin bit for bit.

Every parameter is initialized from a stream keyed by (init_seed, name), so
two models sharing a name share the initial value no matter which other
parameters exist around it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .tensor import (
    AttentionParams,
    Parameter,
    RngState,
    ShapeError,
    Tensor,
    add,
    embedding,
    gelu,
    layer_norm,
    linear,
    mul,
    multi_head_attention,
    tanh,
)

__all__ = [
    "ModelConfig",
    "SpecialTokens",
    "EncodedStreams",
    "AvsrModel",
    "parameter_groups",
    "parameter_checksum",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "Checkpoint",
]


@dataclass
class ModelConfig:
    vocab_size: int
    n_languages: int
    audio_feat_dim: int
    video_feat_dim: int
    d_model: int = 64
    n_heads: int = 4
    n_audio_enc_layers: int = 2
    n_video_enc_layers: int = 2
    n_dec_layers: int = 2
    ffw_mult: int = 4
    max_target_len: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= self.n_languages + 3:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves no room for content tokens "
                f"beyond {self.n_languages} languages + 3 specials")
        for name in ("d_model", "n_heads", "n_audio_enc_layers", "n_video_enc_layers",
                     "n_dec_layers", "ffw_mult", "audio_feat_dim", "video_feat_dim",
                     "max_target_len", "n_languages"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SpecialTokens:
    pad: int
    bos: int
    eos: int
    lang_tokens: tuple[int, ...]

    def __post_init__(self):
        ids = [self.pad, self.bos, self.eos, *self.lang_tokens]
        if len(set(ids)) != len(ids):
            raise ValueError(f"special token ids collide: {ids}")

    @classmethod
    def for_languages(cls, n_languages: int) -> "SpecialTokens":
        return cls(pad=0, bos=1, eos=2, lang_tokens=tuple(range(3, 3 + n_languages)))

    @property
    def content_base(self) -> int:
        """First token id available for per-language content vocabularies."""
        return 3 + len(self.lang_tokens)


@dataclass
class EncodedStreams:
    """Encoder outputs fed to the decoder; lengths may differ freely."""

    audio_feats: Tensor
    video_feats: Tensor | None


@dataclass
class LayerNormParams:
    gamma: Parameter
    beta: Parameter


@dataclass
class FeedForwardParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class EncoderBlockParams:
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ffw: LayerNormParams
    ffw: FeedForwardParams


@dataclass
class GatedXAttnBlockParams:
    """Gated visual sublayers; both gates start at zero (identity map)."""

    g_attn: Parameter
    g_ffw: Parameter
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ffw: LayerNormParams
    ffw: FeedForwardParams


@dataclass
class DecoderBlockParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    gated: GatedXAttnBlockParams | None
    ln_audio: LayerNormParams
    audio_attn: AttentionParams
    ln_ffw: LayerNormParams
    ffw: FeedForwardParams


_OUT_PROJ_SCALE = 0.02  # small logits at init => initial loss ~= ln(vocab)


class _Builder:
    """Registers parameters with (seed, name)-keyed initial values."""

    def __init__(self, seed: int, registry: dict[str, Parameter]):
        self.seed = seed
        self.registry = registry

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.registry:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.registry[p.name] = p
        return p

    def weight(self, name: str, fan_in: int, fan_out: int,
               scale: float | None = None) -> Parameter:
        rng = RngState(self.seed).derive("init", name)
        if scale is None:
            scale = fan_in ** -0.5
        return self._register(Parameter(rng.normal((fan_in, fan_out)) * scale, name))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.zeros(shape), name))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.ones(shape), name))

    def layer_norm(self, prefix: str, d: int) -> LayerNormParams:
        return LayerNormParams(gamma=self.ones(f"{prefix}.gamma", d),
                               beta=self.zeros(f"{prefix}.beta", d))

    def attention(self, prefix: str, d: int) -> AttentionParams:
        return AttentionParams(
            w_q=self.weight(f"{prefix}.w_q", d, d), b_q=self.zeros(f"{prefix}.b_q", d),
            w_k=self.weight(f"{prefix}.w_k", d, d), b_k=self.zeros(f"{prefix}.b_k", d),
            w_v=self.weight(f"{prefix}.w_v", d, d), b_v=self.zeros(f"{prefix}.b_v", d),
            w_o=self.weight(f"{prefix}.w_o", d, d), b_o=self.zeros(f"{prefix}.b_o", d),
        )

    def feed_forward(self, prefix: str, d: int, mult: int) -> FeedForwardParams:
        hidden = d * mult
        return FeedForwardParams(
            w1=self.weight(f"{prefix}.w1", d, hidden), b1=self.zeros(f"{prefix}.b1", hidden),
            w2=self.weight(f"{prefix}.w2", hidden, d), b2=self.zeros(f"{prefix}.b2", d),
        )

    def encoder_block(self, prefix: str, d: int, mult: int) -> EncoderBlockParams:
        return EncoderBlockParams(
            ln_attn=self.layer_norm(f"{prefix}.ln_attn", d),
            attn=self.attention(f"{prefix}.attn", d),
            ln_ffw=self.layer_norm(f"{prefix}.ln_ffw", d),
            ffw=self.feed_forward(f"{prefix}.ffw", d, mult),
        )

    def gated_block(self, prefix: str, d: int, mult: int) -> GatedXAttnBlockParams:
        return GatedXAttnBlockParams(
            g_attn=self.zeros(f"{prefix}.g_attn", ()),
            g_ffw=self.zeros(f"{prefix}.g_ffw", ()),
            ln_attn=self.layer_norm(f"{prefix}.ln_attn", d),
            attn=self.attention(f"{prefix}.attn", d),
            ln_ffw=self.layer_norm(f"{prefix}.ln_ffw", d),
            ffw=self.feed_forward(f"{prefix}.ffw", d, mult),
        )


_posenc_cache: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    key = (length, d)
    pe = _posenc_cache.get(key)
    if pe is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        idx = np.arange(0, d, 2, dtype=np.float64)
        denom = np.power(10000.0, idx / d)
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(pos / denom)
        pe[:, 1::2] = np.cos(pos / denom[: d // 2])
        _posenc_cache[key] = pe
    return pe


def _ffw_forward(p: FeedForwardParams, x: Tensor) -> Tensor:
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


class AvsrModel:
    """The recognizer; ``gated=False`` builds the audio-only twin."""

    def __init__(self, config: ModelConfig, gated: bool = True, init_seed: int = 0):
        self.config = config
        self.gated = gated
        self.init_seed = init_seed
        self.special = SpecialTokens.for_languages(config.n_languages)
        self.params: dict[str, Parameter] = {}
        b = _Builder(init_seed, self.params)
        d, mult = config.d_model, config.ffw_mult

        self.token_embedding = b.weight("token_embedding", config.vocab_size, d,
                                        scale=d ** -0.5)
        self.audio_in_w = b.weight("audio_in.w", config.audio_feat_dim, d)
        self.audio_in_b = b.zeros("audio_in.b", d)
        self.audio_blocks = [b.encoder_block(f"audio_enc.block{i}", d, mult)
                             for i in range(config.n_audio_enc_layers)]
        self.audio_ln_out = b.layer_norm("audio_enc.ln_out", d)

        if gated:
            self.video_in_w = b.weight("video_in.w", config.video_feat_dim, d)
            self.video_in_b = b.zeros("video_in.b", d)
            self.video_blocks = [b.encoder_block(f"video_enc.block{i}", d, mult)
                                 for i in range(config.n_video_enc_layers)]
            self.video_ln_out = b.layer_norm("video_enc.ln_out", d)

        self.dec_blocks: list[DecoderBlockParams] = []
        for i in range(config.n_dec_layers):
            prefix = f"decoder.block{i}"
            self.dec_blocks.append(DecoderBlockParams(
                ln_self=b.layer_norm(f"{prefix}.ln_self", d),
                self_attn=b.attention(f"{prefix}.self_attn", d),
                gated=b.gated_block(f"{prefix}.gated_xattn", d, mult) if gated else None,
                ln_audio=b.layer_norm(f"{prefix}.ln_audio", d),
                audio_attn=b.attention(f"{prefix}.audio_attn", d),
                ln_ffw=b.layer_norm(f"{prefix}.ln_ffw", d),
                ffw=b.feed_forward(f"{prefix}.ffw", d, mult),
            ))
        self.dec_ln_out = b.layer_norm("decoder.ln_out", d)
        self.out_w = b.weight("out_proj.w", d, config.vocab_size, scale=_OUT_PROJ_SCALE)
        self.out_b = b.zeros("out_proj.b", config.vocab_size)

    # -- encoding ----------------------------------------------------------

    def _encode(self, frames: np.ndarray, feat_dim: int, in_w: Parameter,
                in_b: Parameter, blocks: list[EncoderBlockParams],
                ln_out: LayerNormParams, what: str) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != feat_dim:
            raise ShapeError(f"{what} frames must be [T, {feat_dim}], got {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError(f"{what} stream must contain at least one frame")
        d = self.config.d_model
        x = linear(Tensor(frames), in_w, in_b)
        x = add(x, Tensor(sinusoidal_positions(frames.shape[0], d)))
        for blk in blocks:
            h = layer_norm(x, blk.ln_attn.gamma, blk.ln_attn.beta)
            x = add(x, multi_head_attention(h, h, blk.attn, self.config.n_heads))
            h = layer_norm(x, blk.ln_ffw.gamma, blk.ln_ffw.beta)
            x = add(x, _ffw_forward(blk.ffw, h))
        return layer_norm(x, ln_out.gamma, ln_out.beta)

    def encode_audio(self, frames: np.ndarray) -> Tensor:
        return self._encode(frames, self.config.audio_feat_dim, self.audio_in_w,
                            self.audio_in_b, self.audio_blocks, self.audio_ln_out, "audio")

    def encode_video(self, frames: np.ndarray) -> Tensor:
        if not self.gated:
            raise ValueError("audio-only model has no video encoder")
        return self._encode(frames, self.config.video_feat_dim, self.video_in_w,
                            self.video_in_b, self.video_blocks, self.video_ln_out, "video")

    def encode(self, audio_frames: np.ndarray,
               video_frames: np.ndarray | None) -> EncodedStreams:
        video = None
        if self.gated:
            if video_frames is None:
                raise ValueError("gated model requires video frames (may be zeros)")
            video = self.encode_video(video_frames)
        return EncodedStreams(audio_feats=self.encode_audio(audio_frames), video_feats=video)

    # -- decoding ----------------------------------------------------------

    def forward_teacher_forced(self, tokens, streams: EncodedStreams) -> Tensor:
        """Causal logits [L, vocab] for the given decoder input tokens."""
        tokens = np.asarray(tokens, dtype=np.int64)
        cfg = self.config
        if tokens.ndim != 1 or tokens.size < 2:
            raise ValueError(f"decoder input must be a sequence starting [bos, lang], got {tokens}")
        if tokens.size > cfg.max_target_len:
            raise ValueError(f"sequence length {tokens.size} exceeds max_target_len {cfg.max_target_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"unknown token id in {tokens}")
        if tokens[0] != self.special.bos or tokens[1] not in self.special.lang_tokens:
            raise ValueError(f"decoder input must start [bos, lang_token], got {tokens[:2]}")
        if self.gated and streams.video_feats is None:
            raise ValueError("gated model requires encoded video features (may be zeros)")

        n_heads = cfg.n_heads
        x = add(embedding(self.token_embedding, tokens),
                Tensor(sinusoidal_positions(tokens.size, cfg.d_model)))
        for blk in self.dec_blocks:
            h = layer_norm(x, blk.ln_self.gamma, blk.ln_self.beta)
            x = add(x, multi_head_attention(h, h, blk.self_attn, n_heads, causal_mask=True))
            if blk.gated is not None:
                g = blk.gated
                h = layer_norm(x, g.ln_attn.gamma, g.ln_attn.beta)
                x = add(x, mul(tanh(g.g_attn),
                               multi_head_attention(h, streams.video_feats, g.attn, n_heads)))
                h = layer_norm(x, g.ln_ffw.gamma, g.ln_ffw.beta)
                x = add(x, mul(tanh(g.g_ffw), _ffw_forward(g.ffw, h)))
            h = layer_norm(x, blk.ln_audio.gamma, blk.ln_audio.beta)
            x = add(x, multi_head_attention(h, streams.audio_feats, blk.audio_attn, n_heads))
            h = layer_norm(x, blk.ln_ffw.gamma, blk.ln_ffw.beta)
            x = add(x, _ffw_forward(blk.ffw, h))
        x = layer_norm(x, self.dec_ln_out.gamma, self.dec_ln_out.beta)
        return linear(x, self.out_w, self.out_b)

    # -- bookkeeping -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_parameter_values(self, values: dict[str, np.ndarray],
                             strict: bool = True) -> None:
        """Overwrite parameter data by name; unknown names always error."""
        for name, arr in values.items():
            p = self.params.get(name)
            if p is None:
                raise KeyError(f"no parameter named {name!r}")
            if p.data.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)
        if strict:
            missing = set(self.params) - set(values)
            if missing:
                raise KeyError(f"missing values for parameters: {sorted(missing)[:5]}...")


def parameter_groups(model: AvsrModel) -> dict[str, set[str]]:
    """Partition parameter names into audio backbone / video encoder / gated."""
    groups = {"audio_backbone": set(), "video_encoder": set(), "gated_layers": set()}
    for name in model.params:
        if ".gated_xattn." in name:
            groups["gated_layers"].add(name)
        elif name.startswith("video_enc.") or name.startswith("video_in."):
            groups["video_encoder"].add(name)
        else:
            groups["audio_backbone"].add(name)
    return groups


def parameter_checksum(model: AvsrModel, names: Iterable[str]) -> str:
    """SHA-256 over the named parameters' raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint file format: magic, u64 header length, JSON header, raw <f8 data
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"AVFCKPT1"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    values: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return self.header["step"]

    @property
    def extra(self) -> dict:
        return self.header["extra"]


def save_checkpoint(path, model: AvsrModel, rng: RngState | None = None,
                    step: int = 0, extra: dict | None = None) -> None:
    table = [[p.name, list(p.data.shape), bool(p.trainable)]
             for p in model.params.values()]
    rng = rng or RngState(0)
    header = {
        "format_version": _CKPT_VERSION,
        "model_config": asdict(model.config),
        "gated": model.gated,
        "init_seed": model.init_seed,
        "param_table": table,
        "rng_state": {"seed": rng.seed, "counter": rng.counter},
        "step": int(step),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header["format_version"] != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        values: dict[str, np.ndarray] = {}
        for name, shape, _trainable in header["param_table"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated data for parameter {name!r}")
            values[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(header=header, values=values)


def model_from_checkpoint(ckpt: Checkpoint) -> AvsrModel:
    config = ModelConfig(**ckpt.header["model_config"])
    model = AvsrModel(config, gated=ckpt.header["gated"],
                      init_seed=ckpt.header["init_seed"])
    model.set_parameter_values(ckpt.values, strict=True)
    for name, _shape, trainable in ckpt.header["param_table"]:
        model.params[name].trainable = trainable
    return model
