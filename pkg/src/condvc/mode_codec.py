"""Coding-mode generation, predictor blending, and the frame pipeline.

The mode generator turns decoder-available inputs (previous reconstruction,
motion-compensated frame, decoded flow) into two per-pixel gates:

    alpha  how much of each pixel is actually coded by the inter coder
           (alpha -> 0 is a SKIP-style copy, alpha -> 1 full inter coding)
    beta   how the predictor mixes the motion-compensated frame with the
           previous reconstruction

Both maps are regenerated at the decoder from the same inputs, so they cost
zero signaled bits. The predictor is

    x_tilde = beta * x_mc + (1 - beta) * x_prev

and the inter coder codes alpha * x_t conditioned on alpha * x_tilde; the
final reconstruction adds back the uncoded share:

    x_hat = clamp(x_check + (1 - alpha) * x_tilde)

Forcing alpha = beta = 1 turns the pipeline into plain conditional coding
of x_t given the motion-compensated frame (no extra modes), which the
tests use as a bit-exact reference configuration. A "residual" variant
swaps the conditional inter coder for an unconditional coder of
x_t - x_tilde, keeping everything else identical, as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import motion
from .motion import FlowCoderState, FlowExtrapolator, FlowNet
from .neural_coders import (
    CoderOutput,
    ConditionalCoder,
    HyperpriorCoder,
    RateReport,
)
from .video_core import Frame, FrameRole, GopConfig, SequenceSource, WeightMap, gop_schedule

VARIANTS = ("conditional", "residual")

# Streams that may legally appear in a rate report; mode maps never do.
KNOWN_STREAMS = ("intra", "hyper_intra", "motion", "hyper_motion", "inter", "hyper_inter")


class ModeGenerator(nn.Module):
    """Two 3x3 conv layers (32 kernels, leaky slope 0.1) plus a 1x1
    projection to the two maps, squashed by a sigmoid.

    The projection is zero-initialized: an untrained generator outputs
    alpha = beta = 0.5 everywhere. Inputs are the previous reconstruction,
    the motion-compensated frame, and the decoded flow (8 channels total),
    all decoder-available.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.c1 = nn.Conv2d(8, width, 3, stride=1, padding=1)
        self.r1 = nn.LeakyReLU(negative_slope=0.1)
        self.c2 = nn.Conv2d(width, width, 3, stride=1, padding=1)
        self.proj = nn.Conv2d(width, 2, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x_prev: torch.Tensor, x_mc: torch.Tensor, flow_hat: torch.Tensor):
        if x_prev.shape != x_mc.shape or x_prev.shape[2:] != flow_hat.shape[2:]:
            raise ValueError(
                f"mode generator inputs disagree: {tuple(x_prev.shape)}, "
                f"{tuple(x_mc.shape)}, {tuple(flow_hat.shape)}"
            )
        maps = torch.sigmoid(self.proj(self.c2(self.r1(self.c1(
            torch.cat([x_prev, x_mc, flow_hat], dim=1))))))
        # float32 sigmoid saturates to exactly 0/1 for large logits; keep the
        # maps strictly inside (0, 1) (same clamp on encoder and decoder)
        maps = maps.clamp(1e-6, 1.0 - 1e-6)
        return maps[:, 0:1], maps[:, 1:2]


def generate_modes(
    x_prev: Frame, x_mc: Frame, flow_hat, net: ModeGenerator
) -> tuple[WeightMap, WeightMap]:
    """Frame-level wrapper returning validated weight maps."""
    with torch.no_grad():
        alpha, beta = net(
            x_prev.data.unsqueeze(0), x_mc.data.unsqueeze(0), flow_hat.data.unsqueeze(0)
        )
    return WeightMap(alpha.squeeze(0)), WeightMap(beta.squeeze(0))


def blend_predictor(beta: torch.Tensor, x_mc: torch.Tensor, x_prev: torch.Tensor) -> torch.Tensor:
    """Per-pixel mixture of the motion-compensated frame and the previous
    reconstruction; beta broadcasts over the color channels. Stays in [0, 1]
    up to float rounding (deliberately unclamped to keep gradients alive)."""
    if x_mc.shape != x_prev.shape:
        raise ValueError(f"predictor inputs disagree: {tuple(x_mc.shape)} vs {tuple(x_prev.shape)}")
    return beta * x_mc + (1.0 - beta) * x_prev


def code_inter(
    x_t: torch.Tensor,
    x_tilde: torch.Tensor,
    alpha: torch.Tensor,
    coder,
    mode: str = "eval",
    generator: torch.Generator | None = None,
) -> CoderOutput:
    """Code the alpha-masked frame conditioned on the alpha-masked predictor."""
    if x_t.shape != x_tilde.shape:
        raise ValueError(f"inter inputs disagree: {tuple(x_t.shape)} vs {tuple(x_tilde.shape)}")
    return coder(alpha * x_t, alpha * x_tilde, mode, generator)


def reconstruct(x_check: torch.Tensor, alpha: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    """Final reconstruction: coded share plus the uncoded share of the
    predictor, clamped to [0, 1] as the one explicit clamp in the pipeline."""
    if x_check.shape != x_tilde.shape:
        raise ValueError(f"reconstruct inputs disagree: {tuple(x_check.shape)} vs {tuple(x_tilde.shape)}")
    return (x_check + (1.0 - alpha) * x_tilde).clamp(0.0, 1.0)


@dataclass
class FrameOutput:
    """Everything one coded frame produces.

    ``reconstruction`` is the decoder-visible frame (clamped);
    ``reconstruction_raw`` is the pre-clamp tensor used by training
    distortion so gradients survive out-of-range excursions. ``bits``
    values are 0-dim tensors, differentiable in train mode.
    """

    role: FrameRole
    reconstruction: torch.Tensor
    reconstruction_raw: torch.Tensor
    bits: dict[str, torch.Tensor]
    latents: dict[str, dict[str, torch.Tensor]]
    flow_hat: torch.Tensor | None = None
    x_motion_comp: torch.Tensor | None = None
    alpha: torch.Tensor | None = None
    beta: torch.Tensor | None = None

    def rate_report(self) -> RateReport:
        pixels = self.reconstruction.shape[0] * self.reconstruction.shape[2] * self.reconstruction.shape[3]
        return RateReport(pixels, {k: float(v) for k, v in self.bits.items()})


class VideoCodec(nn.Module):
    """The complete learned codec: intra coder, motion path, mode generator,
    and the (conditional or residual) inter coder.

    ``conditional_coder_prefixes`` names the submodules frozen during the
    first training stage.
    """

    conditional_coder_prefixes = ("cond_flow_coder", "inter_coder")

    def __init__(
        self,
        variant: str = "conditional",
        latent_channels: int = 48,
        hyper_channels: int = 32,
        flow_scale: float = motion.FLOW_SCALE,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.flow_scale = flow_scale
        self.intra_coder = HyperpriorCoder(3, latent_channels, hyper_channels, input_offset=0.5)
        self.flow_net = FlowNet()
        self.flow_coder = HyperpriorCoder(2, latent_channels, hyper_channels)
        self.flow_extrapolator = FlowExtrapolator()
        self.cond_flow_coder = ConditionalCoder(
            2, 2, latent_channels, hyper_channels, residual_skip=True
        )
        self.mode_generator = ModeGenerator()
        if variant == "conditional":
            self.inter_coder = ConditionalCoder(
                3, 3, latent_channels, hyper_channels, input_offset=0.5, residual_skip=True
            )
        else:
            # same backbone, coding the (already zero-centered) residual
            self.inter_coder = HyperpriorCoder(3, latent_channels, hyper_channels)

    # -- encoder side -------------------------------------------------

    def forward_iframe(self, x_t, mode="eval", generator=None) -> FrameOutput:
        out = self.intra_coder(x_t, mode, generator)
        return FrameOutput(
            role=FrameRole.I,
            reconstruction=out.reconstruction.clamp(0.0, 1.0),
            reconstruction_raw=out.reconstruction,
            bits={"intra": out.bits["latent"], "hyper_intra": out.bits["hyper"]},
            latents={"intra": out.latents},
        )

    def _code_flow(self, x_t, state, role, mode, generator):
        flow = self.flow_net(x_t, state.reference)
        if role == FrameRole.P_FIRST:
            return motion.code_flow_hyperprior(
                flow, self.flow_coder, mode, generator, self.flow_scale
            )
        f_c = motion.extrapolate_flow(state, self.flow_extrapolator)
        return motion.code_flow_conditional(
            flow, f_c, self.cond_flow_coder, mode, generator, self.flow_scale
        )

    def _predict_and_code(
        self, x_t, x_prev, flow_out, mode, generator,
        force_alpha=None, force_beta=None, use_modes=True,
    ):
        f_hat = flow_out.reconstruction
        x_mc = motion.warp(x_prev, f_hat)
        alpha = beta = None
        if use_modes:
            alpha, beta = self.mode_generator(x_prev, x_mc, f_hat)
            if force_alpha is not None:
                alpha = torch.full_like(alpha, force_alpha)
            if force_beta is not None:
                beta = torch.full_like(beta, force_beta)
            x_tilde = blend_predictor(beta, x_mc, x_prev)
        else:
            x_tilde = x_mc

        if self.variant == "conditional":
            if use_modes:
                inter_out = code_inter(x_t, x_tilde, alpha, self.inter_coder, mode, generator)
                raw = inter_out.reconstruction + (1.0 - alpha) * x_tilde
            else:
                inter_out = self.inter_coder(x_t, x_tilde, mode, generator)
                raw = inter_out.reconstruction
        else:
            inter_out = self.inter_coder(x_t - x_tilde, mode, generator)
            raw = x_tilde + inter_out.reconstruction
        return x_mc, alpha, beta, x_tilde, inter_out, raw

    def forward_pframe(
        self,
        x_t,
        state: FlowCoderState,
        role: FrameRole,
        mode: str = "eval",
        generator: torch.Generator | None = None,
        force_alpha: float | None = None,
        force_beta: float | None = None,
        use_modes: bool = True,
    ) -> FrameOutput:
        if role not in (FrameRole.P_FIRST, FrameRole.P_LATER):
            raise ValueError(f"forward_pframe got role {role}")
        if not state.has_reference:
            raise ValueError("P frame requires a decoded reference frame in the state")
        x_prev = state.reference
        if x_t.shape != x_prev.shape:
            raise ValueError(f"frame {tuple(x_t.shape)} vs reference {tuple(x_prev.shape)}")

        flow_out = self._code_flow(x_t, state, role, mode, generator)
        x_mc, alpha, beta, x_tilde, inter_out, raw = self._predict_and_code(
            x_t, x_prev, flow_out, mode, generator, force_alpha, force_beta, use_modes
        )
        return FrameOutput(
            role=role,
            reconstruction=raw.clamp(0.0, 1.0),
            reconstruction_raw=raw,
            bits={
                "motion": flow_out.bits["latent"],
                "hyper_motion": flow_out.bits["hyper"],
                "inter": inter_out.bits["latent"],
                "hyper_inter": inter_out.bits["hyper"],
            },
            latents={"motion": flow_out.latents, "inter": inter_out.latents},
            flow_hat=flow_out.reconstruction,
            x_motion_comp=x_mc,
            alpha=alpha,
            beta=beta,
        )

    def encode_clip(
        self,
        clip: torch.Tensor,
        roles: list[FrameRole],
        mode: str = "eval",
        generator: torch.Generator | None = None,
        **pframe_kwargs,
    ) -> list[FrameOutput]:
        """Run the pipeline over a (B, N, 3, H, W) clip, managing state.

        In train mode reconstructions carry their graph into the next
        frame, so gradients flow through the whole group of pictures.
        """
        if clip.ndim != 5 or clip.shape[1] != len(roles):
            raise ValueError(f"clip shape {tuple(clip.shape)} does not match {len(roles)} roles")
        state = FlowCoderState()
        outputs = []
        for i, role in enumerate(roles):
            x_t = clip[:, i]
            if role == FrameRole.I:
                state.reset()
                out = self.forward_iframe(x_t, mode, generator)
                state.push(out.reconstruction, None)
            else:
                out = self.forward_pframe(x_t, state, role, mode, generator, **pframe_kwargs)
                state.push(out.reconstruction, out.flow_hat)
            outputs.append(out)
        return outputs

    # -- decoder side ---------------------------------------------------

    def decode_iframe(self, latents: dict[str, dict[str, torch.Tensor]]) -> FrameOutput:
        out = self.intra_coder.decode(latents["intra"])
        return FrameOutput(
            role=FrameRole.I,
            reconstruction=out.reconstruction.clamp(0.0, 1.0),
            reconstruction_raw=out.reconstruction,
            bits={"intra": out.bits["latent"], "hyper_intra": out.bits["hyper"]},
            latents={"intra": out.latents},
        )

    def decode_pframe(
        self,
        latents: dict[str, dict[str, torch.Tensor]],
        state: FlowCoderState,
        role: FrameRole,
        force_alpha: float | None = None,
        force_beta: float | None = None,
        use_modes: bool = True,
    ) -> FrameOutput:
        """Decoder-only path: consumes quantized latents plus state, never
        the original frame. Mirrors forward_pframe operation for operation."""
        x_prev = state.reference
        if role == FrameRole.P_FIRST:
            flow_out = motion.decode_flow_hyperprior(latents["motion"], self.flow_coder, self.flow_scale)
        elif role == FrameRole.P_LATER:
            f_c = motion.extrapolate_flow(state, self.flow_extrapolator)
            flow_out = motion.decode_flow_conditional(
                latents["motion"], f_c, self.cond_flow_coder, self.flow_scale
            )
        else:
            raise ValueError(f"decode_pframe got role {role}")

        f_hat = flow_out.reconstruction
        x_mc = motion.warp(x_prev, f_hat)
        alpha = beta = None
        if use_modes:
            alpha, beta = self.mode_generator(x_prev, x_mc, f_hat)
            if force_alpha is not None:
                alpha = torch.full_like(alpha, force_alpha)
            if force_beta is not None:
                beta = torch.full_like(beta, force_beta)
            x_tilde = blend_predictor(beta, x_mc, x_prev)
        else:
            x_tilde = x_mc

        if self.variant == "conditional":
            cond = alpha * x_tilde if use_modes else x_tilde
            inter_out = self.inter_coder.decode(latents["inter"], cond)
            raw = (
                inter_out.reconstruction + (1.0 - alpha) * x_tilde
                if use_modes
                else inter_out.reconstruction
            )
        else:
            inter_out = self.inter_coder.decode(latents["inter"])
            raw = x_tilde + inter_out.reconstruction
        return FrameOutput(
            role=role,
            reconstruction=raw.clamp(0.0, 1.0),
            reconstruction_raw=raw,
            bits={
                "motion": flow_out.bits["latent"],
                "hyper_motion": flow_out.bits["hyper"],
                "inter": inter_out.bits["latent"],
                "hyper_inter": inter_out.bits["hyper"],
            },
            latents=dict(latents),
            flow_hat=f_hat,
            x_motion_comp=x_mc,
            alpha=alpha,
            beta=beta,
        )

    def decode_clip(self, frame_latents, roles, **pframe_kwargs) -> list[FrameOutput]:
        """Decode a whole clip from latents alone (plus roles)."""
        state = FlowCoderState()
        outputs = []
        for latents, role in zip(frame_latents, roles):
            if role == FrameRole.I:
                state.reset()
                out = self.decode_iframe(latents)
                state.push(out.reconstruction, None)
            else:
                out = self.decode_pframe(latents, state, role, **pframe_kwargs)
                state.push(out.reconstruction, out.flow_hat)
            outputs.append(out)
        return outputs


# ---------------------------------------------------------------------------
# Frame-level API
# ---------------------------------------------------------------------------


@dataclass
class FramePipelineState:
    """Carries everything a P frame needs from the past: the decoded-history
    buffers and, for bookkeeping, the lambda pair in effect."""

    flow_state: FlowCoderState = field(default_factory=FlowCoderState)
    lambda_pair: tuple[float, float] | None = None

    @property
    def x_prev(self) -> torch.Tensor:
        return self.flow_state.reference


def encode_frame(
    codec: VideoCodec,
    frame: Frame,
    role: FrameRole,
    state: FramePipelineState,
    mode: str = "eval",
) -> tuple[Frame, RateReport, FramePipelineState]:
    """Encode one frame, returning the reconstruction, its bit accounting,
    and the updated state. I-frames reset the history buffers."""
    x_t = frame.data.unsqueeze(0)
    with torch.no_grad():
        if role == FrameRole.I:
            state.flow_state.reset()
            out = codec.forward_iframe(x_t, mode)
            state.flow_state.push(out.reconstruction, None)
        else:
            out = codec.forward_pframe(x_t, state.flow_state, role, mode)
            state.flow_state.push(out.reconstruction, out.flow_hat)
    return Frame(out.reconstruction.squeeze(0)), out.rate_report(), state


@dataclass
class GopResult:
    reconstructions: list[Frame]
    reports: list[RateReport]
    roles: list[FrameRole]
    frame_latents: list[dict] | None = None

    @property
    def total_report(self) -> RateReport:
        return RateReport.merge(self.reports)


def encode_gop(
    codec: VideoCodec,
    source: SequenceSource,
    cfg: GopConfig,
    mode: str = "eval",
    collect_latents: bool = False,
) -> GopResult:
    """Encode up to ``cfg.frame_budget`` frames of a sequence under the GOP
    schedule, aggregating per-frame rate reports."""
    budget = min(cfg.frame_budget, len(source))
    roles = gop_schedule(GopConfig(cfg.gop_size, budget))
    clip = source.tensor()[:budget].unsqueeze(0)
    with torch.no_grad():
        outputs = codec.encode_clip(clip, roles, mode)
    return GopResult(
        reconstructions=[Frame(o.reconstruction.squeeze(0)) for o in outputs],
        reports=[o.rate_report() for o in outputs],
        roles=roles,
        frame_latents=[o.latents for o in outputs] if collect_latents else None,
    )


# ---------------------------------------------------------------------------
# Encoded-stream persistence (rate manifest + quantized latents)
# ---------------------------------------------------------------------------

MANIFEST_MAGIC = "CVC1"
MANIFEST_VERSION = 1


def _latents_to_int16(frame_latents: list[dict]) -> list[dict]:
    stored = []
    for groups in frame_latents:
        rec = {}
        for group, tensors in groups.items():
            rec[group] = {}
            for name, t in tensors.items():
                as_int = t.to(torch.int16)
                if not torch.equal(as_int.to(t.dtype), t):
                    raise ValueError(f"latent {group}/{name} does not fit int16 storage")
                rec[group][name] = as_int
        stored.append(rec)
    return stored


def _latents_from_int16(stored: list[dict], dtype=torch.float32) -> list[dict]:
    return [
        {group: {name: t.to(dtype) for name, t in tensors.items()} for group, tensors in groups.items()}
        for groups in stored
    ]


def save_encoding(
    directory,
    result: GopResult,
    gop_size: int,
    lambda_id: str = "",
    flow_scale: float = motion.FLOW_SCALE,
) -> None:
    """Persist an eval-mode encode: a JSON rate manifest (analytic bit
    counts, clearly labeled as such), the quantized latents, and the
    encoder-side reconstructions and mode maps for bit-exact verification."""
    import json
    from pathlib import Path

    if result.frame_latents is None:
        raise ValueError("encode with collect_latents=True before saving")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = result.reconstructions[0]
    manifest = {
        "magic": MANIFEST_MAGIC,
        "version": MANIFEST_VERSION,
        "kind": "rate_manifest",  # analytic bit accounting, not a range-coded stream
        "width": first.width,
        "height": first.height,
        "gop_size": gop_size,
        "lambda_id": lambda_id,
        "flow_scale": flow_scale,
        "frames": [
            {"index": i, "type": role.value, "streams": dict(report.streams)}
            for i, (role, report) in enumerate(zip(result.roles, result.reports))
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    torch.save(_latents_to_int16(result.frame_latents), directory / "latents.pt")
    torch.save(
        {"reconstructions": torch.stack([f.data for f in result.reconstructions])},
        directory / "recon.pt",
    )


def load_encoding(directory):
    """Load (manifest dict, roles, frame latents, stored reconstructions)."""
    import json
    from pathlib import Path

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("magic") != MANIFEST_MAGIC:
        raise ValueError(f"{directory}: not a condvc encoding (bad magic)")
    roles = [FrameRole(f["type"]) for f in manifest["frames"]]
    frame_latents = _latents_from_int16(torch.load(directory / "latents.pt", weights_only=True))
    recon = torch.load(directory / "recon.pt", weights_only=True)["reconstructions"]
    return manifest, roles, frame_latents, recon


def verify_encoding(codec: VideoCodec, directory) -> dict:
    """Re-run the decoder from latents + manifest only and check that every
    reconstruction matches the encoder side bit-exactly and that no stream
    carries mode-map bits. Returns a small summary dict; raises on mismatch."""
    manifest, roles, frame_latents, stored = load_encoding(directory)
    for frame in manifest["frames"]:
        unknown = set(frame["streams"]) - set(KNOWN_STREAMS)
        if unknown:
            raise ValueError(f"frame {frame['index']} carries unexpected streams {sorted(unknown)}")
    with torch.no_grad():
        outputs = codec.decode_clip(frame_latents, roles)
    for i, out in enumerate(outputs):
        if not torch.equal(out.reconstruction.squeeze(0), stored[i]):
            raise ValueError(f"frame {i}: decoder reconstruction differs from encoder side")
        recomputed = {k: float(v) for k, v in out.bits.items()}
        for name, bits in manifest["frames"][i]["streams"].items():
            if abs(recomputed[name] - bits) > 1e-4 * max(1.0, bits):
                raise ValueError(
                    f"frame {i}: stream {name} bits {recomputed[name]} != manifest {bits}"
                )
    return {"frames": len(outputs), "bit_exact": True}
