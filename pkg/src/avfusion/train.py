"""Two-stage noisy training.

Stage 1 trains the audio-only model end to end on 0 dB noise-mixed audio.
Stage 2 rebuilds the gated model around the stage-1 weights, freezes the
audio backbone, and trains the gated layers plus the video encoder with
per-example decoder modality dropout. Both stages pick their checkpoint by
noisy dev token accuracy, with noise draws frozen per dev utterance so
scores are comparable across steps and stages.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, Utterance
from .modality import DropoutPolicy, apply_selection, sample_selection
from .model import (
    AvsrModel,
    EncodedStreams,
    ModelConfig,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
)
from .noise import NoiseBank, NoiseSpec, draw_noise, mix, sample_category
from .tensor import (
    AdamWState,
    RngState,
    adamw_step,
    backward,
    no_grad,
    softmax_cross_entropy,
)

__all__ = [
    "StageConfig",
    "TrainState",
    "TrainingDiverged",
    "teacher_forcing_pair",
    "noisy_audio_for",
    "validation_noise_rng",
    "validate",
    "select_best",
    "train_stage1",
    "train_stage2",
]

DEFAULT_STAGE2_DROPOUT = DropoutPolicy(0.5, 0.0, 0.5)

_PROBE_SIZE = 5


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; training aborted with a step diagnostic."""


@dataclass
class StageConfig:
    stage: int
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    val_interval: int = 200
    train_snr_db: float = 0.0
    dropout: DropoutPolicy | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 1 and self.dropout is not None:
            raise ValueError("stage 1 has no modality dropout policy")
        if self.stage == 2 and self.dropout is None:
            self.dropout = DEFAULT_STAGE2_DROPOUT
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.val_interval < 1 or self.steps % self.val_interval != 0:
            raise ValueError(
                f"val_interval {self.val_interval} must divide steps {self.steps}")


@dataclass
class TrainState:
    step: int = 0
    adamw: AdamWState | None = None
    best_step: int = -1
    best_accuracy: float = -1.0
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    val_history: list[tuple[int, float, float]] = field(default_factory=list)


def teacher_forcing_pair(utt: Utterance, special) -> tuple[np.ndarray, np.ndarray]:
    """Decoder input [bos, lang, tokens...] and next-token targets.

    The language token is given at decode time, so its target position is
    masked with pad; loss and accuracy cover the content tokens plus eos.
    """
    lang_token = special.lang_tokens[utt.lang_id]
    seq = np.concatenate([[special.bos, lang_token], utt.tokens, [special.eos]])
    inputs = seq[:-1]
    targets = seq[1:].copy()
    targets[0] = special.pad
    return inputs, targets


def noisy_audio_for(utt: Utterance, bank: NoiseBank, category: str,
                    snr_db: float, rng: RngState) -> np.ndarray:
    noise = draw_noise(bank, NoiseSpec(category, snr_db), len(utt.audio_frames),
                       rng, exclude_id=utt.utt_id)
    return mix(utt.audio_frames, noise, snr_db)


def validation_noise_rng(bank: NoiseBank, utt_id: str) -> RngState:
    """Noise stream frozen per dev utterance: step- and stage-independent."""
    return RngState(bank.seed).derive("val-noise", utt_id)


def _encode_streams(model: AvsrModel, audio: np.ndarray,
                    utt: Utterance) -> EncodedStreams:
    if model.gated:
        return model.encode(audio, utt.video_frames)
    return EncodedStreams(model.encode_audio(audio), None)


def validate(model: AvsrModel, dev_split: list[Utterance], bank: NoiseBank,
             snr_db: float) -> tuple[float, float]:
    """Teacher-forced token accuracy and loss on the noisy dev split (AV input)."""
    if not dev_split:
        raise ValueError("dev split is empty")
    total_correct = 0
    total_positions = 0
    total_loss = 0.0
    with no_grad():
        for utt in dev_split:
            rng = validation_noise_rng(bank, utt.utt_id)
            category = sample_category(rng)
            noisy = noisy_audio_for(utt, bank, category, snr_db, rng)
            streams = _encode_streams(model, noisy, utt)
            inputs, targets = teacher_forcing_pair(utt, model.special)
            logits = model.forward_teacher_forced(inputs, streams)
            loss, correct = softmax_cross_entropy(logits, targets, model.special.pad)
            kept = int((targets != model.special.pad).sum())
            total_correct += correct
            total_positions += kept
            total_loss += float(loss.data) * kept
    return total_correct / total_positions, total_loss / total_positions


def select_best(history: list[tuple[int, float]]) -> int:
    """Step with the highest accuracy; ties go to the earliest step."""
    if not history:
        raise ValueError("empty validation history")
    best_step, best_acc = history[0][0], history[0][1]
    for step, acc in history[1:]:
        if acc > best_acc:
            best_step, best_acc = step, acc
    return best_step


def _probe_digest(model: AvsrModel, corpus: Corpus) -> dict:
    """Clean-audio logits digest over a few dev utterances, for load checks."""
    utts = corpus.splits["dev"][:_PROBE_SIZE]
    h = hashlib.sha256()
    with no_grad():
        for utt in utts:
            streams = _encode_streams(model, utt.audio_frames, utt)
            inputs, _ = teacher_forcing_pair(utt, model.special)
            logits = model.forward_teacher_forced(inputs, streams)
            h.update(np.ascontiguousarray(logits.data, dtype="<f8").tobytes())
    return {"utterance_ids": [u.utt_id for u in utts], "logits_sha256": h.hexdigest()}


def verify_probe(model: AvsrModel, corpus: Corpus, probe: dict) -> bool:
    return _probe_digest(model, corpus)["logits_sha256"] == probe["logits_sha256"]


def _write_train_log(path: Path, state: TrainState) -> None:
    val_by_step = {step: (acc, loss) for step, acc, loss in state.val_history}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "dev_accuracy", "dev_loss"])
        for step, loss in state.loss_history:
            acc, vloss = val_by_step.get(step, ("", ""))
            writer.writerow([step, f"{loss:.6f}",
                             f"{acc:.6f}" if acc != "" else "",
                             f"{vloss:.6f}" if vloss != "" else ""])


def _train_loop(model: AvsrModel, corpus: Corpus, bank: NoiseBank, cfg: StageConfig,
                out_dir: Path, ckpt_name: str, extra: dict,
                make_streams) -> tuple[Path, TrainState]:
    train_split = corpus.splits["train"]
    dev_split = corpus.splits["dev"]
    trainable = [p for p in model.parameters() if p.trainable]
    if not trainable:
        raise ValueError("nothing to train: all parameters frozen")
    state = TrainState(adamw=AdamWState(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        weight_decay=cfg.weight_decay))
    stage_label = f"stage{cfg.stage}"
    rng_batch = RngState(cfg.seed).derive(stage_label, "batches")
    rng_noise = RngState(cfg.seed).derive(stage_label, "noise")
    rng_drop = RngState(cfg.seed).derive(stage_label, "dropout")
    inv_batch = 1.0 / cfg.batch_size
    best_values: dict[str, np.ndarray] | None = None

    for step in range(1, cfg.steps + 1):
        if cfg.warmup_steps > 0:
            state.adamw.lr = cfg.lr * min(1.0, step / cfg.warmup_steps)
        indices = rng_batch.integers(0, len(train_split), size=cfg.batch_size)
        model.zero_grad()
        batch_loss = 0.0
        try:
            for i in indices:
                utt = train_split[int(i)]
                category = sample_category(rng_noise)
                noisy = noisy_audio_for(utt, bank, category, cfg.train_snr_db, rng_noise)
                streams = make_streams(model, noisy, utt, rng_drop)
                inputs, targets = teacher_forcing_pair(utt, model.special)
                logits = model.forward_teacher_forced(inputs, streams)
                loss, _ = softmax_cross_entropy(logits, targets, model.special.pad)
                backward(loss * inv_batch)
                batch_loss += float(loss.data) * inv_batch
            for p in trainable:
                if p.grad is None:  # e.g. video encoder on an all-audio batch
                    p.grad = np.zeros_like(p.data)
            adamw_step(trainable, state.adamw)
        except ArithmeticError as exc:
            raise TrainingDiverged(f"{stage_label} diverged at step {step}: {exc}") from exc
        state.step = step
        state.loss_history.append((step, batch_loss))

        if step % cfg.val_interval == 0:
            acc, vloss = validate(model, dev_split, bank, cfg.train_snr_db)
            state.val_history.append((step, acc, vloss))
            if acc > state.best_accuracy:
                state.best_accuracy = acc
                state.best_step = step
                best_values = {name: p.data.copy() for name, p in model.params.items()}

    if best_values is not None:
        model.set_parameter_values(best_values, strict=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / ckpt_name
    extra = dict(extra)
    extra.update({
        "stage": cfg.stage,
        "dev_accuracy": state.best_accuracy,
        "best_step": state.best_step,
        "corpus_checksums": corpus.manifest["checksums"],
        "stage_config": {
            "stage": cfg.stage, "steps": cfg.steps, "batch_size": cfg.batch_size,
            "lr": cfg.lr, "weight_decay": cfg.weight_decay,
            "warmup_steps": cfg.warmup_steps, "val_interval": cfg.val_interval,
            "train_snr_db": cfg.train_snr_db, "seed": cfg.seed,
            "dropout": list(cfg.dropout.as_tuple()) if cfg.dropout else None,
        },
        "probe": _probe_digest(model, corpus),
    })
    save_checkpoint(ckpt_path, model, rng=rng_batch, step=state.best_step, extra=extra)
    _write_train_log(out_dir / f"{ckpt_name}.train_log.csv", state)
    return ckpt_path, state


def _stage1_streams(model: AvsrModel, noisy: np.ndarray, utt: Utterance,
                    _rng: RngState) -> EncodedStreams:
    return EncodedStreams(model.encode_audio(noisy), None)


def train_stage1(model: AvsrModel, corpus: Corpus, bank: NoiseBank,
                 cfg: StageConfig, out_dir,
                 ckpt_name: str = "stage1.avckpt") -> tuple[Path, TrainState]:
    """Fine-tune the audio-only view on noise-mixed audio."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    if model.gated:
        raise ValueError("stage 1 trains the audio-only model (gated=False)")
    for p in model.parameters():
        p.trainable = True
    return _train_loop(model, corpus, bank, cfg, Path(out_dir), ckpt_name,
                       extra={}, make_streams=_stage1_streams)


def build_stage2_model(stage1_ckpt_path) -> AvsrModel:
    """Gated model around the stage-1 weights: backbone frozen, rest fresh."""
    ckpt = load_checkpoint(stage1_ckpt_path)
    if ckpt.extra.get("stage") not in (None, 1):
        raise ValueError(f"expected a stage-1 checkpoint, got stage {ckpt.extra.get('stage')}")
    config = ModelConfig(**ckpt.header["model_config"])
    model = AvsrModel(config, gated=True, init_seed=ckpt.header["init_seed"])
    model.set_parameter_values(ckpt.values, strict=False)
    groups = parameter_groups(model)
    for name, p in model.params.items():
        p.trainable = name not in groups["audio_backbone"]
    return model


def train_stage2(stage1_ckpt_path, corpus: Corpus, bank: NoiseBank,
                 cfg: StageConfig, out_dir,
                 ckpt_name: str = "stage2.avckpt") -> tuple[Path, TrainState]:
    """Train gated layers + video encoder with decoder modality dropout."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    stage1_ckpt_path = Path(stage1_ckpt_path)
    if not stage1_ckpt_path.exists():
        raise FileNotFoundError(f"stage-1 checkpoint missing: {stage1_ckpt_path}")
    model = build_stage2_model(stage1_ckpt_path)
    policy = cfg.dropout

    def make_streams(m: AvsrModel, noisy: np.ndarray, utt: Utterance,
                     rng_drop: RngState) -> EncodedStreams:
        selection = sample_selection(policy, rng_drop)
        return apply_selection(selection, m.encode(noisy, utt.video_frames))

    extra = {"stage1_checkpoint": stage1_ckpt_path.name,
             "stage1_sha256": hashlib.sha256(stage1_ckpt_path.read_bytes()).hexdigest()}
    return _train_loop(model, corpus, bank, cfg, Path(out_dir), ckpt_name,
                       extra=extra, make_streams=make_streams)
