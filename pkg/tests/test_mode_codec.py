import pytest
import torch

from condvc import mode_codec as mc
from condvc import video_core as vc
from condvc.motion import FlowCoderState
from condvc.neural_coders import StubIdentityCoder


def synth_source(n_frames=6, size=32, seed=0, generator="moving_texture"):
    return vc.synth_sequence(
        vc.SynthSpec(generator, n_frames=n_frames, height=size, width=size, seed=seed)
    )


class TestModeGenerator:
    def test_zero_init_gives_half_everywhere(self):
        torch.manual_seed(0)
        net = mc.ModeGenerator()
        alpha, beta = net(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16), torch.randn(1, 2, 16, 16))
        assert torch.all(alpha == 0.5)
        assert torch.all(beta == 0.5)

    def test_output_matches_input_size(self):
        net = mc.ModeGenerator()
        for h, w in [(16, 16), (32, 48), (64, 16)]:
            alpha, beta = net(torch.rand(1, 3, h, w), torch.rand(1, 3, h, w), torch.randn(1, 2, h, w))
            assert alpha.shape == (1, 1, h, w)
            assert beta.shape == (1, 1, h, w)

    def test_deterministic_across_invocations(self):
        torch.manual_seed(1)
        net = mc.ModeGenerator()
        with torch.no_grad():
            for p in net.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        args = (torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16), torch.randn(1, 2, 16, 16))
        a1, b1 = net(*args)
        a2, b2 = net(*args)
        assert torch.equal(a1, a2)
        assert torch.equal(b1, b2)

    def test_maps_stay_in_open_interval(self):
        torch.manual_seed(2)
        net = mc.ModeGenerator()
        with torch.no_grad():
            net.proj.bias.fill_(100.0)  # would saturate the sigmoid
            alpha, beta = net(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16), torch.randn(1, 2, 16, 16))
        assert float(alpha.max()) < 1.0
        assert float(beta.min()) > 0.0

    def test_frame_level_wrapper_returns_weight_maps(self):
        seq = synth_source(2)
        net = mc.ModeGenerator()
        flow = vc.FlowMap(torch.zeros(2, 32, 32))
        alpha, beta = mc.generate_modes(seq.frames[0], seq.frames[1], flow, net)
        assert isinstance(alpha, vc.WeightMap)
        assert isinstance(beta, vc.WeightMap)

    def test_mismatched_inputs_rejected(self):
        net = mc.ModeGenerator()
        with pytest.raises(ValueError, match="disagree"):
            net(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 32, 32), torch.randn(1, 2, 16, 16))


class TestBlendPredictor:
    def test_beta_zero_copies_previous(self):
        x_mc = torch.rand(1, 3, 8, 8)
        x_prev = torch.rand(1, 3, 8, 8)
        out = mc.blend_predictor(torch.zeros(1, 1, 8, 8), x_mc, x_prev)
        assert torch.equal(out, x_prev)

    def test_beta_one_copies_motion_compensated(self):
        x_mc = torch.rand(1, 3, 8, 8)
        x_prev = torch.rand(1, 3, 8, 8)
        out = mc.blend_predictor(torch.ones(1, 1, 8, 8), x_mc, x_prev)
        assert torch.equal(out, x_mc)

    def test_half_beta_between_ones_and_zeros(self):
        out = mc.blend_predictor(
            torch.full((1, 1, 8, 8), 0.5), torch.ones(1, 3, 8, 8), torch.zeros(1, 3, 8, 8)
        )
        assert torch.all(out == 0.5)

    def test_stays_in_unit_interval_for_random_inputs(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            beta = torch.rand(1, 1, 8, 8, generator=g)
            out = mc.blend_predictor(
                beta, torch.rand(1, 3, 8, 8, generator=g), torch.rand(1, 3, 8, 8, generator=g)
            )
            assert float(out.min()) >= -1e-6
            assert float(out.max()) <= 1.0 + 1e-6


class TestInterCodingAlgebra:
    def test_stub_coder_reconstructs_masked_target_exactly(self):
        stub = StubIdentityCoder()
        g = torch.Generator().manual_seed(1)
        x_t = torch.rand(1, 3, 16, 16, generator=g)
        x_tilde = torch.rand(1, 3, 16, 16, generator=g)
        alpha = torch.rand(1, 1, 16, 16, generator=g)
        out = mc.code_inter(x_t, x_tilde, alpha, stub)
        assert torch.equal(out.reconstruction, alpha * x_t)

    def test_reconstruct_alpha_zero_is_pure_skip(self):
        x_tilde = torch.rand(1, 3, 8, 8) * 0.8 + 0.1
        out = mc.reconstruct(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8), x_tilde)
        assert torch.equal(out, x_tilde)

    def test_reconstruct_alpha_one_returns_coded_frame(self):
        x_check = torch.rand(1, 3, 8, 8)
        out = mc.reconstruct(x_check, torch.ones(1, 1, 8, 8), torch.rand(1, 3, 8, 8))
        assert torch.equal(out, x_check)

    def test_stub_pipeline_is_pixelwise_mixture(self):
        # reconstruct(code_inter_stub(...)) == alpha*x_t + (1-alpha)*x_tilde
        stub = StubIdentityCoder()
        g = torch.Generator().manual_seed(2)
        for _ in range(100):
            x_t = torch.rand(2, 3, 8, 8, generator=g)
            x_tilde = torch.rand(2, 3, 8, 8, generator=g)
            alpha = torch.rand(2, 1, 8, 8, generator=g)
            coded = mc.code_inter(x_t, x_tilde, alpha, stub)
            got = mc.reconstruct(coded.reconstruction, alpha, x_tilde)
            want = (alpha * x_t + (1 - alpha) * x_tilde).clamp(0, 1)
            assert float((got - want).abs().max()) < 1e-6


def tiny_codec(variant="conditional", seed=0):
    torch.manual_seed(seed)
    return mc.VideoCodec(variant=variant).eval()


class TestPipeline:
    def test_roles_follow_gop_schedule(self):
        codec = tiny_codec()
        source = synth_source(n_frames=5)
        result = mc.encode_gop(codec, source, vc.GopConfig(5, 5))
        assert result.roles == vc.gop_schedule(vc.GopConfig(5, 5))
        assert len(result.reconstructions) == 5

    def test_budget_one_is_single_iframe(self):
        codec = tiny_codec()
        result = mc.encode_gop(codec, synth_source(3), vc.GopConfig(32, 1))
        assert result.roles == [vc.FrameRole.I]
        assert set(result.reports[0].streams) == {"intra", "hyper_intra"}

    def test_p_frame_without_reference_rejected(self):
        codec = tiny_codec()
        x = torch.rand(1, 3, 32, 32)
        with pytest.raises(ValueError, match="reference"):
            codec.forward_pframe(x, FlowCoderState(), vc.FrameRole.P_FIRST)

    def test_p_later_without_history_rejected(self):
        codec = tiny_codec()
        state = FlowCoderState()
        state.push(torch.rand(1, 3, 32, 32), None)
        with pytest.raises(ValueError, match="3 decoded frames"):
            codec.forward_pframe(torch.rand(1, 3, 32, 32), state, vc.FrameRole.P_LATER)

    def test_no_mode_stream_ever_reported(self):
        codec = tiny_codec()
        result = mc.encode_gop(codec, synth_source(5), vc.GopConfig(5, 5))
        for report in result.reports:
            assert set(report.streams) <= set(mc.KNOWN_STREAMS)

    def test_total_bpp_accounting_identity(self):
        codec = tiny_codec()
        source = synth_source(5)
        result = mc.encode_gop(codec, source, vc.GopConfig(5, 5))
        total = result.total_report
        by_hand = sum(r.bits_total for r in result.reports)
        assert total.bits_total == pytest.approx(by_hand, abs=1e-9)
        assert total.bpp == pytest.approx(by_hand / (5 * 32 * 32), abs=1e-9)

    def test_encode_frame_matches_encode_clip(self):
        codec = tiny_codec()
        source = synth_source(5)
        cfg = vc.GopConfig(5, 5)
        roles = vc.gop_schedule(cfg)
        state = mc.FramePipelineState()
        stepwise = []
        for t, role in enumerate(roles):
            recon, report, state = mc.encode_frame(codec, source.frames[t], role, state)
            stepwise.append((recon, report))
        batch = mc.encode_gop(codec, source, cfg)
        for (ra, pa), rb, pb in zip(stepwise, batch.reconstructions, batch.reports):
            assert torch.equal(ra.data, rb.data)
            assert pa.streams == pb.streams

    def test_eval_encode_is_deterministic(self):
        codec = tiny_codec()
        source = synth_source(5)
        a = mc.encode_gop(codec, source, vc.GopConfig(5, 5))
        b = mc.encode_gop(codec, source, vc.GopConfig(5, 5))
        for fa, fb in zip(a.reconstructions, b.reconstructions):
            assert torch.equal(fa.data, fb.data)

    def test_forced_unit_maps_match_no_mode_pipeline_bit_exactly(self):
        codec = tiny_codec(seed=3)
        source = synth_source(5, seed=4)
        clip = source.tensor().unsqueeze(0)
        roles = vc.gop_schedule(vc.GopConfig(5, 5))
        with torch.no_grad():
            forced = codec.encode_clip(clip, roles, "eval", force_alpha=1.0, force_beta=1.0)
            plain = codec.encode_clip(clip, roles, "eval", use_modes=False)
        for f, p in zip(forced, plain):
            assert torch.equal(f.reconstruction, p.reconstruction)
            assert {k: float(v) for k, v in f.bits.items()} == {
                k: float(v) for k, v in p.bits.items()
            }


class TestDecoderPath:
    @pytest.mark.parametrize("variant", ["conditional", "residual"])
    def test_decode_clip_reproduces_encoder_bit_exactly(self, variant):
        codec = tiny_codec(variant, seed=5)
        source = synth_source(6, seed=6)
        roles = vc.gop_schedule(vc.GopConfig(5, 6))
        clip = source.tensor().unsqueeze(0)
        with torch.no_grad():
            enc = codec.encode_clip(clip, roles, "eval")
            dec = codec.decode_clip([o.latents for o in enc], roles)
        for e, d in zip(enc, dec):
            assert torch.equal(e.reconstruction, d.reconstruction)

    def test_mode_maps_regenerate_identically_at_decoder(self):
        codec = tiny_codec(seed=7)
        source = synth_source(5, seed=8)
        roles = vc.gop_schedule(vc.GopConfig(5, 5))
        clip = source.tensor().unsqueeze(0)
        with torch.no_grad():
            enc = codec.encode_clip(clip, roles, "eval")
            dec = codec.decode_clip([o.latents for o in enc], roles)
        for e, d in zip(enc, dec):
            if e.role != vc.FrameRole.I:
                assert torch.equal(e.alpha, d.alpha)
                assert torch.equal(e.beta, d.beta)

    def test_save_load_verify_round_trip(self, tmp_path):
        codec = tiny_codec(seed=9)
        source = synth_source(6, seed=10)
        result = mc.encode_gop(codec, source, vc.GopConfig(5, 6), collect_latents=True)
        mc.save_encoding(tmp_path / "enc", result, gop_size=5, lambda_id="2048")
        summary = mc.verify_encoding(codec, tmp_path / "enc")
        assert summary == {"frames": 6, "bit_exact": True}

    def test_verify_detects_tampered_reconstruction(self, tmp_path):
        codec = tiny_codec(seed=11)
        source = synth_source(4, seed=12)
        result = mc.encode_gop(codec, source, vc.GopConfig(5, 4), collect_latents=True)
        mc.save_encoding(tmp_path / "enc", result, gop_size=5)
        blob = torch.load(tmp_path / "enc" / "recon.pt", weights_only=True)
        blob["reconstructions"][1, 0, 0, 0] += 0.25
        torch.save(blob, tmp_path / "enc" / "recon.pt")
        with pytest.raises(ValueError, match="differs from encoder side"):
            mc.verify_encoding(codec, tmp_path / "enc")


class TestResidualVariant:
    def test_residual_pipeline_runs_and_accounts(self):
        codec = tiny_codec("residual", seed=13)
        source = synth_source(5, seed=14)
        result = mc.encode_gop(codec, source, vc.GopConfig(5, 5))
        assert len(result.reports) == 5
        for report in result.reports[1:]:
            assert set(report.streams) == {"motion", "hyper_motion", "inter", "hyper_inter"}

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            mc.VideoCodec(variant="skip_only")
