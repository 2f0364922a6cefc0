"""Optical flow estimation, bilinear warping, and flow coding.

The estimator is a small 3-level coarse-to-fine convolutional network with
zero-initialized prediction heads, so an untrained model outputs exactly
zero flow and the zero-motion case is a fixed point from step one. Flows
for the first P frames of a GOP go through a standalone hyperprior coder;
once three decoded frames and two decoded flows are buffered, later P
frames extrapolate a conditioning flow from that history (costing no bits)
and code the new flow conditionally against it.

Flows are stored in pixels; coders see them divided by ``flow_scale`` so
latent magnitudes stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .neural_coders import CoderOutput, ConditionalCoder, HyperpriorCoder

FLOW_SCALE = 20.0


def bilinear_warp(values: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``values`` at per-pixel offsets: out(p) = values(p + flow(p)).

    Explicit bilinear gather with edge replication. Exact lookups (hence a
    bit-exact identity for zero flow) at integer offsets; differentiable in
    both arguments. ``values`` is (B, C, H, W), ``flow`` is (B, 2, H, W)
    with channel 0 horizontal and channel 1 vertical, in pixels.
    """
    if values.shape[0] != flow.shape[0] or values.shape[2:] != flow.shape[2:]:
        raise ValueError(f"warp shapes differ: {tuple(values.shape)} vs {tuple(flow.shape)}")
    b, c, h, w = values.shape
    dtype, device = values.dtype, values.device

    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, 1, w) + flow[:, 0:1]
    ys = torch.arange(h, dtype=dtype, device=device).view(1, 1, h, 1) + flow[:, 1:2]
    x0 = xs.floor()
    y0 = ys.floor()
    wx = xs - x0
    wy = ys - y0

    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)

    flat = values.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    out = (
        (1 - wy) * ((1 - wx) * gather(y0i, x0i) + wx * gather(y0i, x1i))
        + wy * ((1 - wx) * gather(y1i, x0i) + wx * gather(y1i, x1i))
    )
    return out


def warp(reference: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Motion compensation of a frame tensor, output clamped to [0, 1]."""
    return bilinear_warp(reference, flow).clamp(0.0, 1.0)


def _zero_init(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class FlowNet(nn.Module):
    """3-level coarse-to-fine flow estimator.

    Each level refines the 2x-upsampled coarser flow from (current frame,
    warped reference, incoming flow). Prediction heads are zero-initialized.
    """

    def __init__(self, levels: int = 3, width: int = 24):
        super().__init__()
        self.levels = levels
        act = lambda: nn.LeakyReLU(inplace=True)
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(8, width, 3, padding=1), act(),
                nn.Conv2d(width, width, 3, padding=1), act(),
                _zero_init(nn.Conv2d(width, 2, 3, padding=1)),
            )
            for _ in range(levels)
        )

    def forward(self, current: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        if current.shape != reference.shape:
            raise ValueError(f"frame shapes differ: {tuple(current.shape)} vs {tuple(reference.shape)}")
        pyr_c, pyr_r = [current], [reference]
        for _ in range(self.levels - 1):
            pyr_c.append(nn.functional.avg_pool2d(pyr_c[-1], 2))
            pyr_r.append(nn.functional.avg_pool2d(pyr_r[-1], 2))

        flow = torch.zeros_like(pyr_c[-1][:, :2])
        for level in range(self.levels - 1, -1, -1):
            if level != self.levels - 1:
                flow = 2.0 * nn.functional.interpolate(
                    flow, scale_factor=2, mode="bilinear", align_corners=False
                )
            warped = bilinear_warp(pyr_r[level], flow)
            flow = flow + self.stages[level](torch.cat([pyr_c[level], warped, flow], dim=1))
        return flow


class FlowExtrapolator(nn.Module):
    """Predicts a conditioning flow from decoded history alone.

    History frames are pre-aligned to the most recent one by warping with
    the decoded flows (the two-step flow is composed by warping), then a
    small convolutional stack regresses the next flow. Zero-initialized
    head: an untrained extrapolator predicts exactly zero flow.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        act = lambda: nn.LeakyReLU(inplace=True)
        self.net = nn.Sequential(
            nn.Conv2d(13, width, 3, padding=1), act(),
            nn.Conv2d(width, width, 3, padding=1), act(),
            _zero_init(nn.Conv2d(width, 2, 3, padding=1)),
        )

    def forward(self, frames: list[torch.Tensor], flows: list[torch.Tensor]) -> torch.Tensor:
        x3, x2, x1 = frames  # oldest first
        f2, f1 = flows
        f_comp = f1 + bilinear_warp(f2, f1)
        inp = torch.cat([x1, bilinear_warp(x2, f1), bilinear_warp(x3, f_comp), f1, f_comp], dim=1)
        return self.net(inp)


@dataclass
class FlowCoderState:
    """Decoded history for motion coding: up to 3 frames and 2 flows.

    Reset at every I-frame; no P frame ever reads history across an
    I-frame boundary. Tensors are (B, C, H, W) reconstructions.
    """

    frames: list[torch.Tensor] = field(default_factory=list)
    flows: list[torch.Tensor] = field(default_factory=list)

    def reset(self) -> None:
        self.frames.clear()
        self.flows.clear()

    def push(self, frame: torch.Tensor, flow: torch.Tensor | None) -> None:
        self.frames.append(frame)
        del self.frames[:-3]
        if flow is not None:
            self.flows.append(flow)
            del self.flows[:-2]

    @property
    def has_reference(self) -> bool:
        return len(self.frames) >= 1

    @property
    def full(self) -> bool:
        return len(self.frames) == 3 and len(self.flows) == 2

    @property
    def reference(self) -> torch.Tensor:
        if not self.frames:
            raise ValueError("no decoded reference frame available")
        return self.frames[-1]


def extrapolate_flow(state: FlowCoderState, extrapolator: FlowExtrapolator) -> torch.Tensor:
    """Conditioning flow from decoder-available history; costs zero bits."""
    if not state.full:
        raise ValueError(
            f"flow extrapolation needs 3 decoded frames and 2 decoded flows, "
            f"have {len(state.frames)} and {len(state.flows)}"
        )
    return extrapolator(state.frames, state.flows)


def code_flow_hyperprior(
    flow: torch.Tensor,
    coder: HyperpriorCoder,
    mode: str = "eval",
    generator: torch.Generator | None = None,
    flow_scale: float = FLOW_SCALE,
) -> CoderOutput:
    """Standalone flow coding for the first P frames of a GOP."""
    out = coder(flow / flow_scale, mode, generator)
    return CoderOutput(out.reconstruction * flow_scale, out.bits, out.latents)


def decode_flow_hyperprior(
    latents: dict[str, torch.Tensor],
    coder: HyperpriorCoder,
    flow_scale: float = FLOW_SCALE,
) -> CoderOutput:
    out = coder.decode(latents)
    return CoderOutput(out.reconstruction * flow_scale, out.bits, out.latents)


def code_flow_conditional(
    flow: torch.Tensor,
    condition: torch.Tensor,
    coder: ConditionalCoder,
    mode: str = "eval",
    generator: torch.Generator | None = None,
    flow_scale: float = FLOW_SCALE,
) -> CoderOutput:
    """Flow coding relative to an extrapolated conditioning flow."""
    if flow.shape != condition.shape:
        raise ValueError(f"flow {tuple(flow.shape)} and condition {tuple(condition.shape)} differ")
    out = coder(flow / flow_scale, condition / flow_scale, mode, generator)
    return CoderOutput(out.reconstruction * flow_scale, out.bits, out.latents)


def decode_flow_conditional(
    latents: dict[str, torch.Tensor],
    condition: torch.Tensor,
    coder: ConditionalCoder,
    flow_scale: float = FLOW_SCALE,
) -> CoderOutput:
    out = coder.decode(latents, condition / flow_scale)
    return CoderOutput(out.reconstruction * flow_scale, out.bits, out.latents)
