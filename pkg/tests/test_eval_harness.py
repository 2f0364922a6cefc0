import json
import math

import numpy as np
import pytest
import torch

from condvc import eval_harness as ev
from condvc import video_core as vc
from condvc.mode_codec import FrameOutput, encode_gop
from condvc.video_core import FrameRole


class TestPsnr:
    def test_identical_frames_hit_cap(self):
        f = torch.rand(3, 16, 16)
        assert ev.psnr_rgb(f, f.clone()) == 100.0

    def test_uniform_difference_of_point_one_gives_20db(self):
        a = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
        b = torch.full((3, 16, 16), 0.6, dtype=torch.float64)
        assert ev.psnr_rgb(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_known_mse_closed_form(self):
        a = torch.zeros(3, 8, 8)
        b = torch.zeros(3, 8, 8)
        b[0, 0, 0] = 1.0  # MSE = 1/192
        assert ev.psnr_rgb(a, b) == pytest.approx(10 * math.log10(192.0), abs=1e-9)

    def test_symmetric(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(3, 16, 16, generator=g), torch.rand(3, 16, 16, generator=g)
        assert ev.psnr_rgb(a, b) == ev.psnr_rgb(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.psnr_rgb(torch.zeros(3, 16, 16), torch.zeros(3, 8, 8))


from msssim_reference import reference_msssim as _reference_msssim


class TestMsssim:
    def test_identical_frames_score_one(self):
        f = torch.rand(3, 160, 160, generator=torch.Generator().manual_seed(1))
        assert ev.msssim_rgb(f, f.clone()) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_high_contrast_scores_near_zero(self):
        pattern = torch.zeros(3, 160, 160)
        pattern[:, ::2] = 1.0  # stripes
        score = ev.msssim_rgb(pattern, 1.0 - pattern)
        assert score < 0.05

    def test_matches_independent_reference_on_fixtures(self):
        # fixed 160x160 fixture pair, 5 scales in play
        g = torch.Generator().manual_seed(2)
        base = torch.rand(3, 160, 160, generator=g)
        blur = torch.nn.functional.avg_pool2d(base.unsqueeze(0), 3, 1, 1).squeeze(0)
        noisy = (base + 0.05 * torch.randn(3, 160, 160, generator=g)).clamp(0, 1)
        for a, b in [(base, blur), (base, noisy)]:
            mine = ev.msssim_rgb(a, b)
            ref = _reference_msssim(a.double().numpy(), b.double().numpy())
            assert mine == pytest.approx(ref, abs=1e-4)

    def test_five_scales_at_160_and_fewer_below(self):
        assert ev.msssim_scale_count(160, 160) == 5
        assert ev.msssim_scale_count(64, 64) == 4
        assert ev.msssim_scale_count(16, 16) == 2
        assert ev.msssim_scale_count(8, 8) == 1

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            ev.msssim_rgb(torch.rand(3, 4, 4), torch.rand(3, 4, 4))

    def test_symmetric(self):
        g = torch.Generator().manual_seed(3)
        a = torch.rand(3, 64, 64, generator=g)
        b = (a + 0.1 * torch.randn(3, 64, 64, generator=g)).clamp(0, 1)
        assert ev.msssim_rgb(a, b) == pytest.approx(ev.msssim_rgb(b, a), abs=1e-9)


def make_curve(label, metric, bpps, qualities):
    return ev.RDCurve(
        label, metric, tuple(ev.RDPoint(b, q, metric) for b, q in zip(bpps, qualities))
    )


class TestRDCurveValidation:
    def test_quality_drop_rejected_with_diagnostic(self):
        with pytest.raises(ValueError, match="quality drops"):
            make_curve("bad", "psnr", [0.1, 0.2, 0.3], [30.0, 29.0, 31.0])

    def test_duplicate_bpp_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            make_curve("bad", "psnr", [0.1, 0.1], [30.0, 31.0])

    def test_msssim_range_checked(self):
        with pytest.raises(ValueError, match="msssim"):
            ev.RDPoint(0.1, 1.5, "msssim")


class TestBDRate:
    def _anchor(self):
        return make_curve("anchor", "psnr", [0.1, 0.2, 0.4, 0.8], [30.0, 32.0, 34.0, 36.0])

    def test_identical_curves_give_exact_zero(self):
        a = self._anchor()
        b = make_curve("same", "psnr", [0.1, 0.2, 0.4, 0.8], [30.0, 32.0, 34.0, 36.0])
        assert ev.bd_rate(a, b) == 0.0

    def test_double_rate_gives_plus_hundred(self):
        a = self._anchor()
        b = make_curve("2x", "psnr", [0.2, 0.4, 0.8, 1.6], [30.0, 32.0, 34.0, 36.0])
        assert ev.bd_rate(a, b) == pytest.approx(100.0, abs=0.1)

    def test_half_rate_gives_minus_fifty(self):
        a = self._anchor()
        b = make_curve("half", "psnr", [0.05, 0.1, 0.2, 0.4], [30.0, 32.0, 34.0, 36.0])
        assert ev.bd_rate(a, b) == pytest.approx(-50.0, abs=0.1)

    def test_sign_antisymmetry_on_random_curves(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = np.sort(rng.uniform(28, 40, size=4))
            q += np.arange(4) * 1e-3  # keep strictly increasing
            r1 = np.sort(rng.uniform(0.05, 1.0, size=4))
            r2 = r1 * rng.uniform(0.5, 2.0)
            a = make_curve("a", "psnr", r1, q)
            b = make_curve("b", "psnr", r2, q)
            d_ab = ev.bd_rate(a, b)
            d_ba = ev.bd_rate(b, a)
            if abs(d_ab) > 1e-9:
                assert d_ab * d_ba < 0

    def test_resampling_an_analytic_curve_changes_little(self):
        # log rate linear in quality: any monotone sample set describes it
        def curve(label, qs):
            return make_curve(label, "psnr", np.exp(0.1 * np.asarray(qs) - 4.0), qs)

        a = curve("dense", [30.0, 31.5, 33.0, 34.5, 36.0])
        b = curve("sparse", [30.0, 32.1, 34.3, 36.0])
        assert ev.bd_rate(a, b) == pytest.approx(0.0, abs=0.5)

    def test_too_few_points_rejected(self):
        a = self._anchor()
        short = make_curve("short", "psnr", [0.1, 0.2, 0.4], [30.0, 31.0, 32.0])
        with pytest.raises(ValueError, match="need >= 4"):
            ev.bd_rate(a, short)

    def test_no_overlap_rejected(self):
        a = self._anchor()
        far = make_curve("far", "psnr", [0.1, 0.2, 0.4, 0.8], [40.0, 41.0, 42.0, 43.0])
        with pytest.raises(ValueError, match="overlap"):
            ev.bd_rate(a, far)


class FakeCodec:
    """Duck-typed stand-in whose rate and distortion scale with a level knob,
    so protocol outputs are orderable without training."""

    def __init__(self, level: float):
        self.level = level

    def eval(self):
        return self

    def encode_clip(self, clip, roles, mode="eval", **kwargs):
        outputs = []
        for i, role in enumerate(roles):
            x = clip[:, i]
            recon = (x + (0.05 / self.level) * torch.ones_like(x) * (0.5 - x)).clamp(0, 1)
            pixels = float(x.shape[2] * x.shape[3])
            if role == FrameRole.I:
                bits = {"intra": torch.tensor(pixels * 0.50 * self.level),
                        "hyper_intra": torch.tensor(pixels * 0.05)}
            else:
                bits = {"motion": torch.tensor(pixels * 0.02 * self.level),
                        "hyper_motion": torch.tensor(pixels * 0.01),
                        "inter": torch.tensor(pixels * 0.10 * self.level),
                        "hyper_inter": torch.tensor(pixels * 0.01)}
            outputs.append(FrameOutput(role, recon, recon, bits, {}))
        return outputs


class TestProtocol:
    def _sequences(self, n_frames=96):
        return [
            vc.synth_sequence(vc.SynthSpec("global_pan", n_frames, 32, 32, seed=7)),
            vc.synth_sequence(vc.SynthSpec("moving_texture", n_frames, 32, 32, seed=8)),
        ]

    def _ladder(self):
        return {lam: FakeCodec(level=lam / 256.0) for lam in (256.0, 512.0, 1024.0, 2048.0)}

    def test_missing_checkpoint_names_the_gap(self):
        ladder = self._ladder()
        del ladder[512.0]
        with pytest.raises(ValueError, match="512"):
            ev.run_protocol(self._sequences(8), ladder, ev.ProtocolConfig(gop_size=4, max_frames=8))

    def test_gop32_over_96_frames_counts_three_iframes(self):
        result = ev.run_protocol(self._sequences(96), self._ladder(), ev.ProtocolConfig())
        one = [r for r in result.records if r["lambda1"] == 256.0 and r["sequence"] == result.records[0]["sequence"]]
        iframes = [r for r in one if r["role"] == "I"]
        assert len(one) == 96
        assert [r["index"] for r in iframes] == [0, 32, 64]

    def test_totals_match_per_frame_records(self):
        result = ev.run_protocol(self._sequences(16), self._ladder(), ev.ProtocolConfig(gop_size=8, max_frames=16))
        for row in result.rows:
            recs = [
                r for r in result.records
                if r["sequence"] == row["sequence"] and r["lambda1"] == row["lambda1"]
            ]
            bits = sum(sum(r["streams"].values()) for r in recs)
            pixels = sum(r["pixels"] for r in recs)
            assert row["bpp"] == pytest.approx(bits / pixels, abs=1e-9)

    def test_curves_have_four_points_and_metadata_records_override(self):
        cfg = ev.ProtocolConfig(gop_size=8, max_frames=16)
        result = ev.run_protocol(self._sequences(16), self._ladder(), cfg)
        assert len(result.curve("psnr").points) == 4
        assert len(result.curve("msssim").points) == 4
        assert result.summary["protocol"]["reference_protocol"] is False
        assert result.summary["protocol"]["bd_interpolation"] == ev.BD_INTERPOLATION

    def test_jsonl_round_trip_replays_rows(self, tmp_path):
        result = ev.run_protocol(self._sequences(8), self._ladder(), ev.ProtocolConfig(gop_size=4, max_frames=8))
        path = tmp_path / "frames.jsonl"
        ev.write_frame_records(result.records, path)
        replayed = ev.summarize_records(ev.read_frame_records(path))
        assert replayed == result.rows

    def test_csv_and_plots_written(self, tmp_path):
        result = ev.run_protocol(self._sequences(8), self._ladder(), ev.ProtocolConfig(gop_size=4, max_frames=8))
        ev.write_protocol_csv(result.rows, tmp_path / "rd.csv")
        assert (tmp_path / "rd.csv").read_text().startswith("sequence,lambda1,frames,bpp,psnr,msssim")
        ev.plot_curves([result.curve("psnr")], tmp_path / "rd_psnr.png")
        assert (tmp_path / "rd_psnr.png").stat().st_size > 0

    def test_bd_table_between_fake_ladders(self):
        seqs = self._sequences(8)
        cfg = ev.ProtocolConfig(gop_size=4, max_frames=8)
        base = ev.run_protocol(seqs, self._ladder(), cfg, label="base")
        worse = ev.run_protocol(
            seqs, {lam: FakeCodec(level=2 * lam / 256.0) for lam in cfg.lambdas}, cfg, label="worse"
        )
        table = ev.bd_rate_table(base.curves, worse.curves)
        assert set(table) == {"psnr", "msssim"}
        assert table["psnr"] > 0  # the doubled-rate ladder costs more bits
