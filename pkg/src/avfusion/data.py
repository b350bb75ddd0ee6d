"""Synthetic multilingual audio-visual corpus.

Each utterance is a token sequence rendered twice: a high-rate "audio"
stream (the token's fixed codebook vector repeated 4x plus Gaussian jitter)
and a low-rate "viseme" stream (one-hot viseme per token, occasionally
confused). Languages own disjoint token ranges and language 0 carries an
imbalance-factor share of the training data.

On-disk format (version 1): ``manifest.json`` plus one record file per
split. A record file is the magic ``AVCORP01``, a little-endian u64 record
count, then per record a ``<6u32`` header (lang_id, L, T_a, F_a, T_v, F_v)
followed by the token ids (int64 LE), audio frames and video frames (both
float64 LE, row-major).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import SpecialTokens
from .tensor import RngState

__all__ = [
    "CorpusConfig",
    "LanguageSpec",
    "VisemeMap",
    "Utterance",
    "Corpus",
    "make_languages",
    "make_viseme_maps",
    "make_codebook",
    "synthesize_utterance",
    "build_corpus",
    "save_corpus",
    "load_corpus",
    "viseme_ceiling",
]

SPLITS = ("train", "dev", "test")

_RECORD_MAGIC = b"AVCORP01"
_FORMAT_VERSION = 1


@dataclass
class CorpusConfig:
    n_languages: int = 5
    tokens_per_language: int = 30
    n_visemes: int = 10
    base_train_count: int = 500
    imbalance_factor: float = 13.6
    dev_count: int = 20
    test_count: int = 40
    min_len: int = 5
    max_len: int = 15
    audio_feat_dim: int = 16
    video_feat_dim: int = 10
    audio_jitter: float = 0.1
    viseme_confusion: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_languages < 2:
            raise ValueError("need at least two languages for a non-primary average")
        if self.tokens_per_language <= self.n_visemes:
            raise ValueError("tokens_per_language must exceed n_visemes for viseme ambiguity")
        if self.video_feat_dim < self.n_visemes:
            raise ValueError(f"video_feat_dim {self.video_feat_dim} cannot one-hot "
                             f"{self.n_visemes} visemes")
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        for name in ("base_train_count", "dev_count", "test_count",
                     "audio_feat_dim", "n_visemes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive (zero-size split)")
        if not (0.0 <= self.viseme_confusion <= 1.0):
            raise ValueError("viseme_confusion outside [0, 1]")
        if self.audio_jitter < 0.0:
            raise ValueError("audio_jitter must be non-negative")
        if self.imbalance_factor <= 0.0:
            raise ValueError("imbalance_factor must be positive")

    @property
    def content_base(self) -> int:
        return SpecialTokens.for_languages(self.n_languages).content_base

    @property
    def vocab_size(self) -> int:
        return self.content_base + self.n_languages * self.tokens_per_language


@dataclass
class LanguageSpec:
    lang_id: int
    vocab_start: int
    vocab_size: int
    unigram: np.ndarray
    hours_weight: float
    train_count: int


@dataclass
class VisemeMap:
    """Many-to-one token -> viseme map (lip-reading is inherently ambiguous)."""

    lang_id: int
    n_visemes: int
    token_to_viseme: np.ndarray

    def __post_init__(self):
        counts = np.bincount(self.token_to_viseme, minlength=self.n_visemes)
        if (counts == 0).any():
            raise ValueError(f"viseme map for language {self.lang_id} is not surjective")
        if counts.max() < 2:
            raise ValueError("every viseme has fan-in 1; no visual ambiguity")


@dataclass
class Utterance:
    utt_id: str
    lang_id: int
    tokens: np.ndarray        # global token ids, length L
    audio_frames: np.ndarray  # [4L, audio_feat_dim]
    video_frames: np.ndarray  # [L, video_feat_dim]


@dataclass
class Corpus:
    config: CorpusConfig
    languages: list[LanguageSpec]
    viseme_maps: list[VisemeMap]
    codebook: np.ndarray
    splits: dict[str, list[Utterance]]
    manifest: dict

    def language_of_token(self, token: int) -> tuple[int, int]:
        """Map a global content token id to (lang_id, local index)."""
        base = self.config.content_base
        local = token - base
        if local < 0 or local >= self.config.n_languages * self.config.tokens_per_language:
            raise ValueError(f"token {token} is not a content token")
        return divmod(local, self.config.tokens_per_language)[0], \
            local % self.config.tokens_per_language


def make_languages(config: CorpusConfig) -> list[LanguageSpec]:
    """Language 0 gets imbalance_factor x the mean train count of the rest."""
    rng = RngState(config.seed).derive("languages")
    primary_count = int(round(config.imbalance_factor * config.base_train_count))
    total = primary_count + (config.n_languages - 1) * config.base_train_count
    specs = []
    for lang in range(config.n_languages):
        weights = 0.5 + rng.uniform(size=config.tokens_per_language)
        unigram = weights / weights.sum()
        count = primary_count if lang == 0 else config.base_train_count
        specs.append(LanguageSpec(
            lang_id=lang,
            vocab_start=config.content_base + lang * config.tokens_per_language,
            vocab_size=config.tokens_per_language,
            unigram=unigram,
            hours_weight=count / total,
            train_count=count,
        ))
    return specs


def make_viseme_maps(config: CorpusConfig) -> list[VisemeMap]:
    rng = RngState(config.seed).derive("visemes")
    maps = []
    for lang in range(config.n_languages):
        perm = rng.permutation(config.tokens_per_language)
        mapping = np.empty(config.tokens_per_language, dtype=np.int64)
        mapping[perm] = np.arange(config.tokens_per_language) % config.n_visemes
        maps.append(VisemeMap(lang_id=lang, n_visemes=config.n_visemes,
                              token_to_viseme=mapping))
    return maps


def make_codebook(config: CorpusConfig) -> np.ndarray:
    """One fixed random audio vector per content token, all languages."""
    rng = RngState(config.seed).derive("codebook")
    total = config.n_languages * config.tokens_per_language
    return rng.normal((total, config.audio_feat_dim))


def synthesize_utterance(spec: LanguageSpec, vmap: VisemeMap, config: CorpusConfig,
                         codebook: np.ndarray, rng: RngState,
                         utt_id: str = "utt") -> Utterance:
    length = int(rng.integers(config.min_len, config.max_len + 1))
    local = rng.choice(spec.vocab_size, size=length, p=spec.unigram).astype(np.int64)
    tokens = spec.vocab_start + local

    emb = codebook[tokens - config.content_base]
    audio = np.repeat(emb, 4, axis=0) + config.audio_jitter * rng.normal(
        (4 * length, config.audio_feat_dim))

    visemes = vmap.token_to_viseme[local]
    confused = rng.uniform(size=length) < config.viseme_confusion
    random_visemes = rng.integers(0, config.n_visemes, size=length)
    shown = np.where(confused, random_visemes, visemes)
    video = np.zeros((length, config.video_feat_dim))
    video[np.arange(length), shown] = 1.0

    return Utterance(utt_id=utt_id, lang_id=spec.lang_id, tokens=tokens,
                     audio_frames=audio, video_frames=video)


def _split_counts(config: CorpusConfig, languages: list[LanguageSpec]) -> dict[str, list[int]]:
    return {
        "train": [spec.train_count for spec in languages],
        "dev": [config.dev_count] * config.n_languages,
        "test": [config.test_count] * config.n_languages,
    }


def _serialize_utterance(utt: Utterance) -> bytes:
    t_a, f_a = utt.audio_frames.shape
    t_v, f_v = utt.video_frames.shape
    head = struct.pack("<6I", utt.lang_id, len(utt.tokens), t_a, f_a, t_v, f_v)
    return b"".join([
        head,
        np.ascontiguousarray(utt.tokens, dtype="<i8").tobytes(),
        np.ascontiguousarray(utt.audio_frames, dtype="<f8").tobytes(),
        np.ascontiguousarray(utt.video_frames, dtype="<f8").tobytes(),
    ])


def build_corpus(config: CorpusConfig) -> Corpus:
    """Generate all splits; bit-exactly regenerable from the same config."""
    languages = make_languages(config)
    viseme_maps = make_viseme_maps(config)
    codebook = make_codebook(config)
    root = RngState(config.seed)

    splits: dict[str, list[Utterance]] = {}
    checksums: dict[str, str] = {}
    counts = _split_counts(config, languages)
    for split in SPLITS:
        utts: list[Utterance] = []
        digest = hashlib.sha256()
        for spec in languages:
            for index in range(counts[split][spec.lang_id]):
                rng = root.derive("utt", split, spec.lang_id, index)
                utt = synthesize_utterance(
                    spec, viseme_maps[spec.lang_id], config, codebook, rng,
                    utt_id=f"{split}-l{spec.lang_id}-{index:06d}")
                utts.append(utt)
                digest.update(_serialize_utterance(utt))
        splits[split] = utts
        checksums[split] = digest.hexdigest()

    manifest = {
        "format_version": _FORMAT_VERSION,
        "config": asdict(config),
        "counts": counts,
        "checksums": checksums,
        "codebook_sha256": hashlib.sha256(
            np.ascontiguousarray(codebook, dtype="<f8").tobytes()).hexdigest(),
        "vocab_size": config.vocab_size,
    }
    return Corpus(config=config, languages=languages, viseme_maps=viseme_maps,
                  codebook=codebook, splits=splits, manifest=manifest)


def save_corpus(corpus: Corpus, out_dir, force: bool = False) -> None:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{out_dir} already holds a corpus; pass force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, utts in corpus.splits.items():
        with open(out_dir / f"{split}.records", "wb") as f:
            f.write(_RECORD_MAGIC)
            f.write(struct.pack("<Q", len(utts)))
            for utt in utts:
                f.write(_serialize_utterance(utt))
    manifest_path.write_text(json.dumps(corpus.manifest, sort_keys=True, indent=2))


def load_corpus(in_dir) -> Corpus:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    if manifest["format_version"] != _FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format {manifest['format_version']}")
    config = CorpusConfig(**manifest["config"])
    languages = make_languages(config)
    viseme_maps = make_viseme_maps(config)
    codebook = make_codebook(config)
    got = hashlib.sha256(np.ascontiguousarray(codebook, dtype="<f8").tobytes()).hexdigest()
    if got != manifest["codebook_sha256"]:
        raise ValueError("codebook regenerated from config does not match manifest")

    splits: dict[str, list[Utterance]] = {}
    for split in SPLITS:
        utts: list[Utterance] = []
        with open(in_dir / f"{split}.records", "rb") as f:
            if f.read(8) != _RECORD_MAGIC:
                raise ValueError(f"{split}.records: bad magic")
            (n_records,) = struct.unpack("<Q", f.read(8))
            per_lang_index: dict[int, int] = {}
            for _ in range(n_records):
                lang_id, length, t_a, f_a, t_v, f_v = struct.unpack("<6I", f.read(24))
                tokens = np.frombuffer(f.read(8 * length), dtype="<i8").astype(np.int64)
                audio = np.frombuffer(f.read(8 * t_a * f_a), dtype="<f8") \
                    .reshape(t_a, f_a).astype(np.float64)
                video = np.frombuffer(f.read(8 * t_v * f_v), dtype="<f8") \
                    .reshape(t_v, f_v).astype(np.float64)
                index = per_lang_index.get(lang_id, 0)
                per_lang_index[lang_id] = index + 1
                utts.append(Utterance(
                    utt_id=f"{split}-l{lang_id}-{index:06d}", lang_id=lang_id,
                    tokens=tokens, audio_frames=audio, video_frames=video))
        splits[split] = utts
    return Corpus(config=config, languages=languages, viseme_maps=viseme_maps,
                  codebook=codebook, splits=splits, manifest=manifest)


def viseme_ceiling(spec: LanguageSpec, vmap: VisemeMap) -> float:
    """Best token accuracy achievable from a noiseless viseme stream alone.

    The optimal decoder picks the highest-unigram token within the shown
    viseme class, so the ceiling is the summed max unigram mass per class.
    """
    acc = 0.0
    for v in range(vmap.n_visemes):
        mass = spec.unigram[vmap.token_to_viseme == v]
        if mass.size:
            acc += float(mass.max())
    return acc
