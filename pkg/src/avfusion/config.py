"""Run configuration: one schema-validated JSON file drives a reproduction.

Unknown keys are rejected with their full field path. All randomness flows
from the single root ``seed`` through named substreams (data / train /
noise / eval); per-section seeds may still be pinned explicitly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import CorpusConfig
from .modality import DropoutPolicy
from .model import ModelConfig
from .noise import CATEGORIES
from .tensor import derive_seed
from .train import StageConfig

__all__ = ["ConfigError", "RunConfig", "NoiseBankConfig", "EvalConfig",
           "SweepConfig", "AblateConfig", "load_run_config", "resolved_config_dict"]


class ConfigError(ValueError):
    """Schema violation; the message carries the offending field path."""


@dataclass
class NoiseBankConfig:
    bank_size: int = 200

    def __post_init__(self):
        if self.bank_size < 1:
            raise ValueError("bank_size must be positive")


@dataclass
class EvalConfig:
    noise_category: str = "babble"
    snr_db: float = 0.0
    high_resource: list[int] = field(default_factory=list)
    low_resource: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.noise_category not in CATEGORIES + ("clean",):
            raise ValueError(f"noise_category {self.noise_category!r} not in "
                             f"{CATEGORIES + ('clean',)}")


@dataclass
class SweepConfig:
    categories: list[str] = field(default_factory=lambda: list(CATEGORIES))
    snrs: list[float] = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0])

    def __post_init__(self):
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"sweep category {c!r} not in {CATEGORIES}")
        if not self.categories or not self.snrs:
            raise ValueError("sweep needs at least one category and one snr")


@dataclass
class AblateConfig:
    policies: list[list[float]] = field(default_factory=lambda: [
        [0.5, 0.0, 0.5], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])

    def __post_init__(self):
        for p in self.policies:
            DropoutPolicy.from_sequence(p)  # validates


@dataclass
class RunConfig:
    seed: int
    corpus: CorpusConfig
    model: ModelConfig
    stage1: StageConfig
    stage2: StageConfig
    noise: NoiseBankConfig
    eval: EvalConfig
    sweep: SweepConfig
    ablate: AblateConfig
    noise_seed: int = 0
    eval_seed: int = 0


_BOOL, _INT, _FLOAT, _STR = bool, int, float, str


def _check_type(value, expected, path: str):
    if expected is _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if expected is _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {type(value).__name__}")
        return value
    if expected is _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {type(value).__name__}")
        return value
    if expected is _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    raise AssertionError(f"unhandled schema type {expected}")


def _check_list(value, item_type, path: str) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected list")
    return [_check_type(v, item_type, f"{path}[{i}]") for i, v in enumerate(value)]


def _take_section(data: dict, name: str) -> dict:
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{name}: expected object")
    return dict(section)


def _build(section: dict, schema: dict, path: str) -> dict:
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    out = {}
    for key, spec in schema.items():
        if key not in section:
            continue
        value = section[key]
        if isinstance(spec, tuple) and spec[0] is list:
            out[key] = _check_list(value, spec[1], f"{path}.{key}")
        else:
            out[key] = _check_type(value, spec, f"{path}.{key}")
    return out


_CORPUS_SCHEMA = {
    "n_languages": _INT, "tokens_per_language": _INT, "n_visemes": _INT,
    "base_train_count": _INT, "imbalance_factor": _FLOAT, "dev_count": _INT,
    "test_count": _INT, "min_len": _INT, "max_len": _INT,
    "audio_feat_dim": _INT, "video_feat_dim": _INT, "audio_jitter": _FLOAT,
    "viseme_confusion": _FLOAT, "seed": _INT,
}

_MODEL_SCHEMA = {
    "vocab_size": _INT, "n_languages": _INT, "audio_feat_dim": _INT,
    "video_feat_dim": _INT, "d_model": _INT, "n_heads": _INT,
    "n_audio_enc_layers": _INT, "n_video_enc_layers": _INT,
    "n_dec_layers": _INT, "ffw_mult": _INT, "max_target_len": _INT,
}

_STAGE_SCHEMA = {
    "steps": _INT, "batch_size": _INT, "lr": _FLOAT, "beta1": _FLOAT,
    "beta2": _FLOAT, "eps": _FLOAT, "weight_decay": _FLOAT,
    "warmup_steps": _INT, "val_interval": _INT, "train_snr_db": _FLOAT,
    "dropout": (list, _FLOAT), "seed": _INT,
}

_NOISE_SCHEMA = {"bank_size": _INT}

_EVAL_SCHEMA = {
    "noise_category": _STR, "snr_db": _FLOAT,
    "high_resource": (list, _INT), "low_resource": (list, _INT),
    "seed": _INT,
}

_SWEEP_SCHEMA = {"categories": (list, _STR), "snrs": (list, _FLOAT)}

_ABLATE_SCHEMA = {"policies": (list, None)}

_TOP_KEYS = {"seed", "corpus", "model", "stage1", "stage2", "noise", "eval",
             "sweep", "ablate", "noise_seed", "eval_seed"}


def _build_stage(data: dict, stage: int, root_seed: int, path: str) -> StageConfig:
    kwargs = _build(data, _STAGE_SCHEMA, path)
    dropout = kwargs.pop("dropout", None)
    if dropout is not None:
        if stage == 1:
            raise ConfigError(f"{path}.dropout: stage 1 has no dropout policy")
        try:
            kwargs["dropout"] = DropoutPolicy.from_sequence(dropout)
        except ValueError as exc:
            raise ConfigError(f"{path}.dropout: {exc}") from exc
    kwargs.setdefault("seed", derive_seed(root_seed, f"train-stage{stage}"))
    try:
        return StageConfig(stage=stage, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_run_config(source) -> RunConfig:
    """Parse and validate a config mapping, JSON string, or file path."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        try:
            data = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    elif isinstance(source, str):
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    else:
        data = dict(source)
    if not isinstance(data, dict):
        raise ConfigError("config root: expected object")

    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    seed = _check_type(data.get("seed", 0), _INT, "seed")

    corpus_kwargs = _build(_take_section(data, "corpus"), _CORPUS_SCHEMA, "corpus")
    corpus_kwargs.setdefault("seed", derive_seed(seed, "data"))
    try:
        corpus = CorpusConfig(**corpus_kwargs)
    except ValueError as exc:
        raise ConfigError(f"corpus: {exc}") from exc

    model_kwargs = _build(_take_section(data, "model"), _MODEL_SCHEMA, "model")
    model_kwargs.setdefault("vocab_size", corpus.vocab_size)
    model_kwargs.setdefault("n_languages", corpus.n_languages)
    model_kwargs.setdefault("audio_feat_dim", corpus.audio_feat_dim)
    model_kwargs.setdefault("video_feat_dim", corpus.video_feat_dim)
    model_kwargs.setdefault("max_target_len", corpus.max_len + 5)
    try:
        model = ModelConfig(**model_kwargs)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    for name in ("vocab_size", "n_languages", "audio_feat_dim", "video_feat_dim"):
        corpus_value = getattr(corpus, name) if name != "vocab_size" else corpus.vocab_size
        if getattr(model, name) != corpus_value:
            raise ConfigError(f"model.{name}: {getattr(model, name)} does not match "
                              f"the corpus ({corpus_value})")
    if model.max_target_len < corpus.max_len + 3:
        raise ConfigError(f"model.max_target_len: {model.max_target_len} too short for "
                          f"sequences of up to {corpus.max_len} tokens plus specials")

    stage1 = _build_stage(_take_section(data, "stage1"), 1, seed, "stage1")
    stage2 = _build_stage(_take_section(data, "stage2"), 2, seed, "stage2")

    noise_kwargs = _build(_take_section(data, "noise"), _NOISE_SCHEMA, "noise")
    try:
        noise = NoiseBankConfig(**noise_kwargs)
    except ValueError as exc:
        raise ConfigError(f"noise: {exc}") from exc

    eval_section = _take_section(data, "eval")
    eval_kwargs = _build(eval_section, _EVAL_SCHEMA, "eval")
    eval_seed = eval_kwargs.pop("seed", derive_seed(seed, "eval"))
    try:
        eval_cfg = EvalConfig(**eval_kwargs)
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from exc
    others = list(range(1, corpus.n_languages))
    if not eval_cfg.high_resource and not eval_cfg.low_resource:
        half = max(1, len(others) // 2)
        eval_cfg.high_resource = others[:half]
        eval_cfg.low_resource = others[half:] or others[:half]
    for name in ("high_resource", "low_resource"):
        members = getattr(eval_cfg, name)
        if not members:
            raise ConfigError(f"eval.{name}: must not be empty")
        bad = [m for m in members if not (1 <= m < corpus.n_languages)]
        if bad:
            raise ConfigError(f"eval.{name}: language ids {bad} outside "
                              f"[1, {corpus.n_languages})")

    sweep_kwargs = _build(_take_section(data, "sweep"), _SWEEP_SCHEMA, "sweep")
    try:
        sweep_cfg = SweepConfig(**sweep_kwargs)
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from exc

    ablate_section = _take_section(data, "ablate")
    unknown = sorted(set(ablate_section) - set(_ABLATE_SCHEMA))
    if unknown:
        raise ConfigError(f"ablate.{unknown[0]}: unknown key")
    ablate_kwargs = {}
    if "policies" in ablate_section:
        policies = ablate_section["policies"]
        if not isinstance(policies, list):
            raise ConfigError("ablate.policies: expected list of 3-element lists")
        for i, p in enumerate(policies):
            if not isinstance(p, list):
                raise ConfigError(f"ablate.policies[{i}]: expected list")
            _check_list(p, _FLOAT, f"ablate.policies[{i}]")
        ablate_kwargs["policies"] = policies
    try:
        ablate_cfg = AblateConfig(**ablate_kwargs)
    except ValueError as exc:
        raise ConfigError(f"ablate.policies: {exc}") from exc

    return RunConfig(
        seed=seed, corpus=corpus, model=model, stage1=stage1, stage2=stage2,
        noise=noise, eval=eval_cfg, sweep=sweep_cfg, ablate=ablate_cfg,
        noise_seed=_check_type(data.get("noise_seed",
                                        derive_seed(seed, "noise")),
                               _INT, "noise_seed"),
        eval_seed=eval_seed,
    )


def resolved_config_dict(cfg: RunConfig) -> dict:
    """Fully-resolved config (all defaults and derived seeds filled in)."""
    out = asdict(cfg)
    if out["stage2"]["dropout"] is not None:
        out["stage2"]["dropout"] = list(cfg.stage2.dropout.as_tuple())
    return out
