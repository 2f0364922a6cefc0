from dataclasses import replace
from fractions import Fraction

import pytest
import torch

from condvc import training as tr
from condvc.mode_codec import FrameOutput, VideoCodec
from condvc.video_core import FrameRole


def tiny_cfg(**overrides):
    base = dict(
        lambda1=2048.0,
        gop_n=2,
        batch_size=1,
        patch_size=16,
        stage0_steps=0,
        stage1_steps=2,
        stage2_steps=1,
        seed=0,
    )
    base.update(overrides)
    return tr.TrainConfig(**base)


def make_output(bits, recon, target_like, x_mc=None):
    return FrameOutput(
        role=FrameRole.P_FIRST if x_mc is not None else FrameRole.I,
        reconstruction=recon.clamp(0, 1),
        reconstruction_raw=recon,
        bits={"inter": torch.tensor(float(bits))},
        latents={},
        x_motion_comp=x_mc,
    )


class TestTrainConfig:
    def test_lambda2_derived_exactly(self):
        cfg = tr.TrainConfig(lambda1=2048.0)
        assert cfg.lambda2 == 20.48
        cfg = tr.TrainConfig(lambda1=256.0)
        assert cfg.lambda2 == 2.56

    def test_wrong_lambda2_rejected(self):
        with pytest.raises(ValueError, match="lambda2"):
            tr.TrainConfig(lambda1=2048.0, lambda2=10.0)

    def test_positive_fields_enforced(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(lambda1=-1.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(batch_size=0)


class TestFrameLoss:
    def test_perfect_reconstruction_zero_rate_gives_zero(self):
        target = torch.rand(1, 3, 16, 16)
        out = make_output(0.0, target.clone(), target)
        loss, parts = tr.frame_loss(1, target, out, 2048.0, 20.48)
        assert float(loss) == 0.0
        assert float(parts["mse"]) == 0.0

    def test_doubling_lambda1_doubles_distortion_term_only(self):
        target = torch.zeros(1, 3, 16, 16)
        recon = torch.full((1, 3, 16, 16), 0.1)
        out = make_output(768.0, recon, target)  # 768 bits over 256 px = 3 bpp
        l1, _ = tr.frame_loss(1, target, out, 1000.0, 10.0)
        l2, _ = tr.frame_loss(1, target, out, 2000.0, 20.0)
        mse = 0.01
        assert float(l1) == pytest.approx(3.0 + 1000.0 * mse, rel=1e-6)
        assert float(l2) == pytest.approx(3.0 + 2000.0 * mse, rel=1e-6)

    def test_motion_term_only_for_p_frames(self):
        target = torch.zeros(1, 3, 16, 16)
        recon = torch.zeros(1, 3, 16, 16)
        x_mc = torch.full((1, 3, 16, 16), 0.2)
        out_p = make_output(0.0, recon, target, x_mc=x_mc)
        loss, parts = tr.frame_loss(2, target, out_p, 100.0, 1.0)
        assert "mse_motion" in parts
        assert float(loss) == pytest.approx(1.0 * 0.04, rel=1e-6)

    def test_frame_index_is_one_based(self):
        target = torch.zeros(1, 3, 16, 16)
        with pytest.raises(ValueError, match="1-based"):
            tr.frame_loss(0, target, make_output(0.0, target, target), 1.0, 0.01)


class TestSequenceLoss:
    def test_weights_for_n5_are_fifteenths(self):
        # exact rational check of (1..5)/15
        losses = [torch.tensor(1.0 if i == k else 0.0) for k in range(5) for i in [k]][:5]
        for k in range(5):
            per_frame = [torch.tensor(1.0 if i == k else 0.0) for i in range(5)]
            got = Fraction(float(tr.sequence_loss(per_frame))).limit_denominator(10**6)
            assert got == Fraction(k + 1, 15)

    def test_single_frame_weight_is_one(self):
        assert float(tr.sequence_loss([torch.tensor(3.5)])) == 3.5

    def test_equal_losses_pass_through(self):
        per_frame = [torch.tensor(2.0)] * 7
        assert float(tr.sequence_loss(per_frame)) == pytest.approx(2.0, abs=1e-7)

    def test_weights_sum_to_one_exactly_rational(self):
        for n in range(1, 9):
            weights = [Fraction(i, n * (n + 1) // 2) for i in range(1, n + 1)]
            assert sum(weights) == 1


class TestMovingAverage:
    def test_window_mean(self):
        ma = tr.moving_average([1, 2, 3, 4], 2)
        assert ma == [1.5, 2.5, 3.5]

    def test_bad_window_rejected(self):
        with pytest.raises(ValueError):
            tr.moving_average([1.0], 2)


class TestCorpus:
    def test_clip_deterministic_across_instances(self):
        a = tr.SyntheticCorpus(tr.CorpusConfig(seed=5)).clip_tensor(3)
        b = tr.SyntheticCorpus(tr.CorpusConfig(seed=5)).clip_tensor(3)
        assert torch.equal(a, b)

    def test_different_indices_differ(self):
        corpus = tr.SyntheticCorpus(tr.CorpusConfig(seed=5))
        assert not torch.equal(corpus.clip_tensor(0), corpus.clip_tensor(1))

    def test_batch_shape(self):
        corpus = tr.SyntheticCorpus(tr.CorpusConfig(patch_size=32, clip_length=4))
        batch = corpus.batch(0, 2)
        assert batch.shape == (2, 4, 3, 32, 32)


class TestTwoStageTraining:
    def test_stage1_freezes_conditional_coders_exactly(self):
        cfg = tiny_cfg(stage0_steps=0, stage1_steps=2, stage2_steps=0)
        torch.manual_seed(cfg.seed)
        model = VideoCodec(variant=cfg.variant)
        frozen_names = set(tr.conditional_coder_parameter_names(model))
        assert frozen_names  # structural: the freeze set is nonempty
        before = {k: v.detach().clone() for k, v in model.state_dict().items()}

        tr.train_two_stage(cfg, model=model)

        after = model.state_dict()
        changed = {k for k in before if not torch.equal(before[k], after[k])}
        for name in frozen_names:
            assert name not in changed, f"frozen parameter {name} moved during stage 1"
        assert changed  # the rest of the model actually trained
        # freeze lifted afterwards
        assert all(p.requires_grad for p in model.parameters())

    def test_fixed_seed_reproduces_checkpoint_bit_exactly(self):
        cfg = tiny_cfg(stage0_steps=2, stage1_steps=2, stage2_steps=1)
        a = tr.train_two_stage(cfg)
        b = tr.train_two_stage(cfg)
        assert a.checkpoint.model_state.keys() == b.checkpoint.model_state.keys()
        for k in a.checkpoint.model_state:
            assert torch.equal(a.checkpoint.model_state[k], b.checkpoint.model_state[k]), k
        assert [r.loss for r in a.telemetry] == [r.loss for r in b.telemetry]

    def test_checkpoint_round_trip_preserves_outputs(self, tmp_path):
        cfg = tiny_cfg(stage0_steps=1, stage1_steps=1, stage2_steps=1)
        result = tr.train_two_stage(cfg)
        tr.save_checkpoint(result.checkpoint, tmp_path / "ckpt.pt")
        loaded = tr.load_checkpoint(tmp_path / "ckpt.pt")
        codec = tr.codec_from_checkpoint(loaded).eval()
        x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            want = result.model.eval().forward_iframe(x).reconstruction
            got = codec.forward_iframe(x).reconstruction
        assert torch.equal(want, got)

    def test_divergence_error_names_term(self):
        cfg = tiny_cfg(stage0_steps=0, stage1_steps=1, stage2_steps=0)
        torch.manual_seed(cfg.seed)
        model = VideoCodec()
        with torch.no_grad():
            model.intra_coder.g_s[0].weight.fill_(float("nan"))
        with pytest.raises(tr.TrainingDivergedError, match="mse"):
            tr.train_two_stage(cfg, model=model)

    def test_telemetry_csv_written(self, tmp_path):
        rows = [tr.TelemetryRow(0, "stage1", 1.25, 0.5, 30.0)]
        path = tmp_path / "telemetry.csv"
        tr.write_telemetry_csv(rows, path)
        text = path.read_text().splitlines()
        assert text[0] == "step,stage,loss,bpp,psnr"
        assert text[1].startswith("0,stage1,1.25")


class TestRateLadder:
    def test_weight_copy_before_fine_tune(self):
        cfg = tiny_cfg(stage0_steps=1, stage1_steps=1, stage2_steps=0)
        base = tr.train_two_stage(cfg).checkpoint
        copied = tr.codec_from_checkpoint(
            tr.Checkpoint(base.model_state, {**base.config, "lambda1": 256.0}, base.step)
        )
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            a = tr.codec_from_checkpoint(base).eval().forward_iframe(x).reconstruction
            b = copied.eval().forward_iframe(x).reconstruction
        assert torch.equal(a, b)

    def test_ladder_produces_four_checkpoints(self):
        cfg = tiny_cfg(stage0_steps=1, stage1_steps=1, stage2_steps=0)
        base = tr.train_two_stage(cfg).checkpoint
        ladder = tr.init_rate_ladder(base, targets=(1024.0, 512.0, 256.0), fine_tune_steps=1)
        assert sorted(ladder) == [256.0, 512.0, 1024.0, 2048.0]
        for lam, ckpt in ladder.items():
            assert ckpt.config["lambda1"] == lam
            assert ckpt.config["lambda2"] == pytest.approx(0.01 * lam)
