"""Training pipeline tests: configs, determinism, freezing, checkpoint selection."""

import math

import numpy as np
import pytest

from avfusion.data import CorpusConfig, build_corpus
from avfusion.modality import DropoutPolicy
from avfusion.model import (
    AvsrModel,
    EncodedStreams,
    ModelConfig,
    load_checkpoint,
    model_from_checkpoint,
    parameter_checksum,
    parameter_groups,
)
from avfusion.noise import NoiseBank
from avfusion.tensor import RngState, Tensor, softmax_cross_entropy
from avfusion.train import (
    StageConfig,
    TrainingDiverged,
    select_best,
    teacher_forcing_pair,
    train_stage1,
    train_stage2,
    validate,
    verify_probe,
)


@pytest.fixture(scope="module")
def micro():
    ccfg = CorpusConfig(n_languages=2, tokens_per_language=8, n_visemes=3,
                        base_train_count=30, dev_count=4, test_count=4,
                        audio_feat_dim=6, video_feat_dim=4, seed=41)
    corpus = build_corpus(ccfg)
    bank = NoiseBank.from_utterances(corpus.splits["train"], size=20, seed=41)
    mcfg = ModelConfig(vocab_size=ccfg.vocab_size, n_languages=2,
                       audio_feat_dim=6, video_feat_dim=4, d_model=16, n_heads=2,
                       n_audio_enc_layers=1, n_video_enc_layers=1, n_dec_layers=1,
                       ffw_mult=2, max_target_len=20)
    return ccfg, corpus, bank, mcfg


def quick_stage1_cfg(**overrides):
    base = dict(stage=1, steps=20, batch_size=4, val_interval=10,
                warmup_steps=5, seed=13, lr=3e-3)
    base.update(overrides)
    return StageConfig(**base)


class TestStageConfig:
    def test_stage1_rejects_dropout(self):
        with pytest.raises(ValueError, match="dropout"):
            StageConfig(stage=1, dropout=DropoutPolicy(0.5, 0.0, 0.5))

    def test_stage2_defaults_to_best_policy(self):
        cfg = StageConfig(stage=2)
        assert cfg.dropout.as_tuple() == (0.5, 0.0, 0.5)

    def test_val_interval_must_divide_steps(self):
        with pytest.raises(ValueError, match="divide"):
            StageConfig(stage=1, steps=100, val_interval=33)

    def test_unknown_stage(self):
        with pytest.raises(ValueError, match="stage"):
            StageConfig(stage=3)


class TestTeacherForcing:
    def test_pair_structure(self, micro):
        _, corpus, _, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=1)
        utt = corpus.splits["dev"][0]
        inputs, targets = teacher_forcing_pair(utt, model.special)
        assert inputs[0] == model.special.bos
        assert inputs[1] == model.special.lang_tokens[utt.lang_id]
        np.testing.assert_array_equal(inputs[2:], utt.tokens)
        assert targets[0] == model.special.pad  # language given, not scored
        np.testing.assert_array_equal(targets[1:-1], utt.tokens)
        assert targets[-1] == model.special.eos
        assert len(inputs) == len(targets) == len(utt.tokens) + 2

    def test_initial_loss_near_log_vocab(self, micro):
        ccfg, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=3)
        _, loss = validate(model, corpus.splits["dev"], bank, snr_db=0.0)
        assert abs(loss - math.log(mcfg.vocab_size)) < 0.1


class TestValidate:
    def test_empty_split_errors(self, micro):
        _, _, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=1)
        with pytest.raises(ValueError, match="empty"):
            validate(model, [], bank, 0.0)

    def test_deterministic(self, micro):
        _, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=1)
        a = validate(model, corpus.splits["dev"], bank, 0.0)
        b = validate(model, corpus.splits["dev"], bank, 0.0)
        assert a == b

    def test_random_logits_accuracy_near_chance(self):
        # uniform-random logits over vocab 40: argmax matches ~1/40 of targets
        rng = RngState(97)
        vocab, positions = 40, 5000
        logits = Tensor(rng.normal((positions, vocab)))
        targets = rng.integers(0, vocab, size=positions)
        _, correct = softmax_cross_entropy(logits, targets, ignore_id=-1)
        assert abs(correct / positions - 1.0 / vocab) <= 0.02

    def test_perfect_model_scores_one(self, micro):
        # memorize a single dev utterance, then accuracy on it must be 1.0
        ccfg, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=5)
        utt = corpus.splits["dev"][0]
        inputs, targets = teacher_forcing_pair(utt, model.special)
        from avfusion.tensor import AdamWState, adamw_step, backward
        state = AdamWState(lr=3e-3)
        for _ in range(150):
            model.zero_grad()
            streams = EncodedStreams(model.encode_audio(utt.audio_frames), None)
            logits = model.forward_teacher_forced(inputs, streams)
            loss, correct = softmax_cross_entropy(logits, targets, model.special.pad)
            if correct == int((targets != model.special.pad).sum()):
                break
            backward(loss)
            adamw_step(model.parameters(), state)
        streams = EncodedStreams(model.encode_audio(utt.audio_frames), None)
        logits = model.forward_teacher_forced(inputs, streams)
        _, correct = softmax_cross_entropy(logits, targets, model.special.pad)
        assert correct == int((targets != model.special.pad).sum())


class TestSelectBest:
    def test_single_entry(self):
        assert select_best([(200, 0.5)]) == 200

    def test_tie_breaks_earliest(self):
        assert select_best([(200, 0.5), (400, 0.9), (600, 0.9)]) == 400

    def test_increasing_takes_last(self):
        assert select_best([(200, 0.1), (400, 0.2), (600, 0.3)]) == 600

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            select_best([])


class TestStage1:
    def test_two_runs_identical(self, micro, tmp_path):
        _, corpus, bank, mcfg = micro
        runs = []
        for tag in ("a", "b"):
            model = AvsrModel(mcfg, gated=False, init_seed=9)
            path, state = train_stage1(model, corpus, bank, quick_stage1_cfg(),
                                       tmp_path / tag)
            runs.append((path.read_bytes(), state.loss_history, state.val_history))
        assert runs[0][0] == runs[1][0]  # checkpoint bytes identical
        assert runs[0][1] == runs[1][1]
        assert runs[0][2] == runs[1][2]

    def test_rejects_gated_model(self, micro, tmp_path):
        _, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=True, init_seed=9)
        with pytest.raises(ValueError, match="audio-only"):
            train_stage1(model, corpus, bank, quick_stage1_cfg(), tmp_path)

    def test_divergence_aborts_with_diagnostic(self, micro, tmp_path):
        _, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=9)
        model.params["out_proj.b"].data = np.full(mcfg.vocab_size, 1e308)
        with np.errstate(over="ignore"), pytest.raises(TrainingDiverged, match="step 1"):
            train_stage1(model, corpus, bank, quick_stage1_cfg(), tmp_path)

    def test_checkpoint_probe_verifies(self, micro, tmp_path):
        _, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=9)
        path, _ = train_stage1(model, corpus, bank, quick_stage1_cfg(), tmp_path)
        ckpt = load_checkpoint(path)
        restored = model_from_checkpoint(ckpt)
        assert verify_probe(restored, corpus, ckpt.extra["probe"])

    def test_log_csv_written(self, micro, tmp_path):
        _, corpus, bank, mcfg = micro
        model = AvsrModel(mcfg, gated=False, init_seed=9)
        path, state = train_stage1(model, corpus, bank, quick_stage1_cfg(),
                                   tmp_path / "logged")
        log = (tmp_path / "logged" / "stage1.avckpt.train_log.csv").read_text()
        lines = log.strip().splitlines()
        assert lines[0] == "step,loss,dev_accuracy,dev_loss"
        assert len(lines) == 1 + 20


@pytest.fixture(scope="module")
def stage1_ckpt(micro, tmp_path_factory):
    _, corpus, bank, mcfg = micro
    model = AvsrModel(mcfg, gated=False, init_seed=9)
    out = tmp_path_factory.mktemp("s1")
    path, state = train_stage1(model, corpus, bank,
                               quick_stage1_cfg(steps=40, val_interval=10), out)
    return path, state


class TestStage2:
    def test_missing_checkpoint_errors(self, micro, tmp_path):
        _, corpus, bank, _ = micro
        with pytest.raises(FileNotFoundError):
            train_stage2(tmp_path / "nope.avckpt", corpus, bank,
                         StageConfig(stage=2, steps=10, val_interval=10, seed=1),
                         tmp_path)

    def test_init_continuity_and_freeze_integrity(self, micro, tmp_path, stage1_ckpt):
        _, corpus, bank, _ = micro
        s1_path, _ = stage1_ckpt
        stage1_model = model_from_checkpoint(load_checkpoint(s1_path))
        ref_acc, ref_loss = validate(stage1_model, corpus.splits["dev"], bank, 0.0)

        from avfusion.train import build_stage2_model
        s2 = build_stage2_model(s1_path)
        init_acc, init_loss = validate(s2, corpus.splits["dev"], bank, 0.0)
        assert init_acc == ref_acc       # gates at zero: exact identity
        assert init_loss == ref_loss

        groups = parameter_groups(s2)
        backbone_before = parameter_checksum(s2, groups["audio_backbone"])
        cfg = StageConfig(stage=2, steps=20, batch_size=4, val_interval=10,
                          warmup_steps=5, seed=14, lr=3e-3)
        path, state = train_stage2(s1_path, corpus, bank, cfg, tmp_path / "s2")
        trained = model_from_checkpoint(load_checkpoint(path))
        assert parameter_checksum(trained, groups["audio_backbone"]) == backbone_before
        # something actually trained
        gated_before = parameter_checksum(s2, groups["gated_layers"])
        assert parameter_checksum(trained, groups["gated_layers"]) != gated_before

    def test_frozen_flags_in_checkpoint(self, micro, tmp_path, stage1_ckpt):
        _, corpus, bank, _ = micro
        s1_path, _ = stage1_ckpt
        cfg = StageConfig(stage=2, steps=10, batch_size=4, val_interval=10,
                          warmup_steps=2, seed=15, lr=3e-3)
        path, _ = train_stage2(s1_path, corpus, bank, cfg, tmp_path / "s2flags")
        ckpt = load_checkpoint(path)
        trainable = {name: t for name, _shape, t in ckpt.header["param_table"]}
        assert not trainable["token_embedding"]
        assert not trainable["decoder.block0.audio_attn.w_q"]
        assert trainable["decoder.block0.gated_xattn.g_attn"]
        assert trainable["video_in.w"]

    def test_stage2_determinism(self, micro, tmp_path, stage1_ckpt):
        _, corpus, bank, _ = micro
        s1_path, _ = stage1_ckpt
        outs = []
        for tag in ("x", "y"):
            cfg = StageConfig(stage=2, steps=10, batch_size=4, val_interval=10,
                              warmup_steps=2, seed=21, lr=3e-3)
            path, state = train_stage2(s1_path, corpus, bank, cfg, tmp_path / tag)
            outs.append((path.read_bytes(), tuple(state.loss_history)))
        assert outs[0] == outs[1]
