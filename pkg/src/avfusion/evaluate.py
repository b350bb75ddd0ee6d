"""Greedy decoding, text normalization, WER scoring, and evaluation sweeps.

Synthetic "words" are rendered token names (language + local index), so WER
here coincides with token error rate; the full text pipeline (render ->
normalize -> align) still runs so the scoring path matches a real setup.
"""

from __future__ import annotations

import csv
import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .data import Corpus, Utterance
from .modality import ModalitySelection, apply_selection
from .model import AvsrModel, EncodedStreams
from .noise import NoiseBank, NoiseSpec, draw_noise, mix
from .tensor import RngState, no_grad

__all__ = [
    "Hypothesis",
    "WerBreakdown",
    "LanguageGroups",
    "EvalReport",
    "greedy_decode",
    "normalize_text",
    "wer",
    "aggregate",
    "round_half_up",
    "render_words",
    "evaluate_model",
    "sweep",
    "ablate",
    "write_reports_csv",
    "figure_rows",
    "relative_improvement",
    "default_groups",
    "MODES",
    "SNR_LEVELS",
]

MODES = ("av", "a", "v")

SNR_LEVELS = (-10.0, -5.0, 0.0, 5.0, 10.0)


@dataclass
class Hypothesis:
    utt_id: str
    lang_id: int
    tokens: list[int]
    words: list[str]
    truncated: bool = False


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    def __post_init__(self):
        if self.ref_length < 1:
            raise ValueError("reference length must be positive")
        if self.substitutions + self.deletions > self.ref_length:
            raise ValueError("substitutions + deletions cannot exceed reference length")

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_length

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions,
                            self.deletions + other.deletions,
                            self.insertions + other.insertions,
                            self.ref_length + other.ref_length)


@dataclass(frozen=True)
class LanguageGroups:
    """Language sets for the three reported averages."""

    non_primary: tuple
    high_resource: tuple
    low_resource: tuple


@dataclass
class EvalReport:
    per_language: dict[int, WerBreakdown]
    avg_non_primary: float
    avg_high_resource: float
    avg_low_resource: float
    condition: dict = field(default_factory=dict)


def greedy_decode(model: AvsrModel, streams: EncodedStreams, lang_token: int,
                  max_len: int | None = None) -> tuple[list[int], bool]:
    """Argmax decoding from [bos, lang]; returns (content tokens, truncated)."""
    if max_len is None:
        max_len = model.config.max_target_len
    special = model.special
    seq = [special.bos, lang_token]
    truncated = False
    with no_grad():
        while True:
            if len(seq) >= max_len:
                truncated = True
                break
            logits = model.forward_teacher_forced(np.array(seq, dtype=np.int64), streams)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == special.eos:
                break
            seq.append(nxt)
    return seq[2:], truncated


_KEPT_APOSTROPHES = ("'", "’")


def normalize_text(s: str) -> str:
    """Lowercase, strip punctuation except apostrophes, collapse whitespace."""
    kept = []
    for ch in s.lower():
        if unicodedata.category(ch).startswith("P") and ch not in _KEPT_APOSTROPHES:
            continue
        kept.append(ch)
    return " ".join("".join(kept).split())


def wer(ref_words: Sequence[str], hyp_words: Sequence[str]) -> WerBreakdown:
    """Minimum-edit-distance alignment with unit substitution/del/ins costs."""
    n, m = len(ref_words), len(hyp_words)
    if n == 0:
        raise ValueError("empty reference")
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref_words[i - 1] == hyp_words[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost,
                           dp[i - 1, j] + 1,
                           dp[i, j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (
                0 if ref_words[i - 1] == hyp_words[j - 1] else 1):
            if ref_words[i - 1] != hyp_words[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(substitutions=subs, deletions=dels, insertions=ins, ref_length=n)


def aggregate(per_lang: Mapping[Hashable, float],
              groups: LanguageGroups) -> dict[str, float]:
    """Unweighted means of per-language WER over the three group sets."""
    out = {}
    for name, members in (("non_primary", groups.non_primary),
                          ("high_resource", groups.high_resource),
                          ("low_resource", groups.low_resource)):
        missing = [m for m in members if m not in per_lang]
        if missing:
            raise KeyError(f"group {name} missing languages {missing}")
        if not members:
            raise ValueError(f"group {name} is empty")
        out[name] = sum(per_lang[m] for m in members) / len(members)
    return out


def round_half_up(x: float, ndigits: int = 1) -> float:
    """Table-style rounding (0.05 -> 0.1), unlike banker's rounding."""
    scale = 10 ** ndigits
    return math.floor(x * scale + 0.5) / scale


def render_words(corpus: Corpus, tokens: Sequence[int]) -> list[str]:
    """Render content tokens as per-language word strings, e.g. ``l2w17``."""
    words = []
    for token in tokens:
        try:
            lang, local = corpus.language_of_token(int(token))
            words.append(f"l{lang}w{local}")
        except ValueError:
            words.append(f"tok{int(token)}")  # stray special: scored as an error
    return words


def default_groups(n_languages: int) -> LanguageGroups:
    """Language 0 is the high-data primary; split the rest half/half."""
    others = tuple(range(1, n_languages))
    half = len(others) // 2 if len(others) > 1 else 1
    return LanguageGroups(non_primary=others,
                          high_resource=others[:half],
                          low_resource=others[half:] or others[:half])


def _forced_mode_streams(model: AvsrModel, noisy_audio: np.ndarray,
                         utt: Utterance, mode: str) -> EncodedStreams:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not model.gated:
        if mode != "a":
            raise ValueError(f"audio-only model only evaluates in mode 'a', got {mode!r}")
        return EncodedStreams(model.encode_audio(noisy_audio), None)
    streams = model.encode(noisy_audio, utt.video_frames)
    if mode == "a":
        return apply_selection(ModalitySelection.A, streams)
    if mode == "v":
        return apply_selection(ModalitySelection.V, streams)
    return streams


def evaluate_model(model: AvsrModel, utts: list[Utterance], bank: NoiseBank,
                   noise_spec: NoiseSpec | None, mode: str, corpus: Corpus,
                   groups: LanguageGroups, eval_seed: int = 0,
                   condition: dict | None = None) -> EvalReport:
    """Decode every utterance under one noise condition and score WER.

    ``noise_spec=None`` evaluates on clean audio. Noise draws are keyed by
    (seed, condition, utterance id): rerunning a cell is bit-reproducible.
    """
    if not utts:
        raise ValueError("empty evaluation split")
    totals: dict[int, WerBreakdown] = {}
    hypotheses: list[Hypothesis] = []
    for utt in utts:
        if noise_spec is None:
            audio = utt.audio_frames
        else:
            rng = RngState(eval_seed).derive("eval-noise", noise_spec.category,
                                             repr(noise_spec.snr_db), utt.utt_id)
            noise = draw_noise(bank, noise_spec, len(utt.audio_frames), rng,
                               exclude_id=utt.utt_id)
            audio = mix(utt.audio_frames, noise, noise_spec.snr_db)
        with no_grad():
            streams = _forced_mode_streams(model, audio, utt, mode)
        lang_token = model.special.lang_tokens[utt.lang_id]
        decoded, truncated = greedy_decode(model, streams, lang_token)
        hyp_words = normalize_text(" ".join(render_words(corpus, decoded))).split()
        ref_words = normalize_text(" ".join(render_words(corpus, utt.tokens))).split()
        breakdown = wer(ref_words, hyp_words)
        hypotheses.append(Hypothesis(utt.utt_id, utt.lang_id, decoded, hyp_words,
                                     truncated))
        if utt.lang_id in totals:
            totals[utt.lang_id] = totals[utt.lang_id] + breakdown
        else:
            totals[utt.lang_id] = breakdown
    per_lang_wer = {lang: b.wer for lang, b in totals.items()}
    averages = aggregate(per_lang_wer, groups)
    cond = dict(condition or {})
    cond.setdefault("mode", mode)
    if noise_spec is not None:
        cond.setdefault("category", noise_spec.category)
        cond.setdefault("snr_db", noise_spec.snr_db)
    else:
        cond.setdefault("category", "clean")
        cond.setdefault("snr_db", None)
    return EvalReport(per_language=totals,
                      avg_non_primary=averages["non_primary"],
                      avg_high_resource=averages["high_resource"],
                      avg_low_resource=averages["low_resource"],
                      condition=cond)


def sweep(model_audio: AvsrModel, model_av: AvsrModel, utts: list[Utterance],
          bank: NoiseBank, corpus: Corpus, groups: LanguageGroups,
          categories: Sequence[str] | None = None,
          snrs: Sequence[float] = SNR_LEVELS,
          eval_seed: int = 0) -> list[EvalReport | dict]:
    """One report per (model, category, snr); failed cells become markers."""
    from .noise import CATEGORIES
    categories = tuple(categories or CATEGORIES)
    reports: list[EvalReport | dict] = []
    for tag, model, mode in (("audio_only", model_audio, "a"),
                             ("audio_visual", model_av, "av")):
        for category in categories:
            for snr in snrs:
                condition = {"model": tag, "mode": mode,
                             "category": category, "snr_db": snr}
                try:
                    reports.append(evaluate_model(
                        model, utts, bank, NoiseSpec(category, snr), mode,
                        corpus, groups, eval_seed=eval_seed, condition=condition))
                except Exception as exc:  # mark the cell, keep sweeping
                    condition["failed"] = str(exc)
                    reports.append(condition)
    return reports


def _language_columns(corpus: Corpus) -> list[int]:
    return list(range(corpus.config.n_languages))


def write_reports_csv(reports: list[EvalReport | dict], corpus: Corpus,
                      path) -> None:
    langs = _language_columns(corpus)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "mode", "category", "snr_db",
                         *[f"wer_l{i}" for i in langs],
                         "avg_non_primary", "avg_high_resource", "avg_low_resource",
                         "failed"])
        for rep in reports:
            if isinstance(rep, dict):
                writer.writerow([rep.get("model", ""), rep.get("mode", ""),
                                 rep.get("category", ""), rep.get("snr_db", ""),
                                 *["" for _ in langs], "", "", "",
                                 rep.get("failed", "unknown failure")])
                continue
            cond = rep.condition
            writer.writerow([
                cond.get("model", ""), cond.get("mode", ""),
                cond.get("category", ""), cond.get("snr_db", ""),
                *[f"{rep.per_language[i].wer:.6f}" if i in rep.per_language else ""
                  for i in langs],
                f"{rep.avg_non_primary:.6f}", f"{rep.avg_high_resource:.6f}",
                f"{rep.avg_low_resource:.6f}", ""])


def figure_rows(reports: list[EvalReport | dict],
                merge_music_natural: bool = True) -> list[dict]:
    """Mean WER over SNRs per (model, category): the noise-type comparison.

    Emits both the separate categories and the merged music+natural row.
    """
    cells: dict[tuple[str, str], list[float]] = {}
    for rep in reports:
        if isinstance(rep, dict):
            continue
        key = (rep.condition.get("model", "?"), rep.condition.get("category", "?"))
        cells.setdefault(key, []).append(rep.avg_non_primary)
    rows = []
    models = sorted({m for m, _ in cells})
    categories = sorted({c for _, c in cells})
    for model in models:
        for category in categories:
            values = cells.get((model, category), [])
            if values:
                rows.append({"model": model, "category": category,
                             "mean_wer_non_primary": sum(values) / len(values)})
        if merge_music_natural:
            merged = [v for cat in ("music", "natural")
                      for v in cells.get((model, cat), [])]
            if merged:
                rows.append({"model": model, "category": "music+natural",
                             "mean_wer_non_primary": sum(merged) / len(merged)})
    return rows


def relative_improvement(wer_baseline: float, wer_test: float) -> float:
    """Percent WER reduction of ``wer_test`` relative to the baseline."""
    if wer_baseline == 0.0:
        return 0.0
    return 100.0 * (wer_baseline - wer_test) / wer_baseline


def ablate(stage1_ckpt_path, policies, corpus: Corpus, bank: NoiseBank,
           stage2_cfg, groups: LanguageGroups,
           eval_condition: NoiseSpec | None = None,
           out_dir=None, eval_seed: int = 0) -> list[dict]:
    """Train one stage-2 model per dropout policy (same checkpoint and seed),
    evaluate all of them under one noise condition, and rank by WER."""
    from dataclasses import replace as dc_replace
    import tempfile

    from .model import load_checkpoint, model_from_checkpoint
    from .modality import DropoutPolicy
    from .train import train_stage2

    if eval_condition is None:
        eval_condition = NoiseSpec("babble", 0.0)
    own_tmp = out_dir is None
    tmp_ctx = tempfile.TemporaryDirectory() if own_tmp else None
    root = Path(tmp_ctx.name) if own_tmp else Path(out_dir)
    rows = []
    try:
        for idx, policy in enumerate(policies):
            if not isinstance(policy, DropoutPolicy):
                policy = DropoutPolicy.from_sequence(policy)
            cfg = dc_replace(stage2_cfg, dropout=policy)
            name = f"ablate_p{idx}.avckpt"
            ckpt_path, state = train_stage2(stage1_ckpt_path, corpus, bank, cfg,
                                            root, ckpt_name=name)
            model = model_from_checkpoint(load_checkpoint(ckpt_path))
            report = evaluate_model(
                model, corpus.splits["test"], bank, eval_condition, "av",
                corpus, groups, eval_seed=eval_seed,
                condition={"model": f"policy_{policy.as_tuple()}", "mode": "av"})
            rows.append({"policy": policy.as_tuple(),
                         "avg_non_primary_wer": report.avg_non_primary,
                         "dev_accuracy": state.best_accuracy,
                         "report": report,
                         "checkpoint": str(ckpt_path)})
    finally:
        if tmp_ctx is not None:
            tmp_ctx.cleanup()
    rows.sort(key=lambda r: r["avg_non_primary_wer"])
    return rows
