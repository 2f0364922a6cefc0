"""Quantization, entropy models, and the hyperprior / conditional coders.

Rates are analytic repo-wide: bits are -log2 of the model probability of
the quantized symbols, never counted from an actual bitstream (a range
coder backend exists separately and must agree with these numbers). Train
mode replaces rounding with additive uniform noise so everything stays
differentiable; eval mode rounds to nearest integer with ties to even and
is a pure function of (inputs, weights).

The conditional coder concatenates the condition at the analysis input and
feeds condition features to both the synthesis transform and the entropy
parameters, so the decoder, which owns the condition bit-exactly, can
reproduce everything from the quantized latents alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

LATENT_CHANNELS = 48
HYPER_CHANNELS = 32
SCALE_FLOOR = 0.11
PROB_FLOOR = 2.0**-16
_INV_SQRT2 = 0.7071067811865476


class _LowerBoundFn(torch.autograd.Function):
    """clamp_min with gradients that can push a clamped value back up."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


def quantize(
    values: torch.Tensor,
    mode: str,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Rounding proxy: additive uniform noise in train mode, ties-to-even
    rounding in eval mode. ``noise`` overrides the drawn perturbation so
    finite-difference checks can hold it fixed."""
    if mode == "eval":
        return torch.round(values)
    if mode == "train":
        if noise is None:
            noise = (
                torch.rand(
                    values.shape, generator=generator, dtype=values.dtype, device=values.device
                )
                - 0.5
            )
        return values + noise
    raise ValueError(f"quantize mode must be 'train' or 'eval', got {mode!r}")


def _normal_cdf(z: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-z * _INV_SQRT2)


def gaussian_bin_mass(y_hat: torch.Tensor, mean: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Probability of the unit bin centered at y_hat under N(mean, scale^2),
    with the scale floored at SCALE_FLOOR and the mass at PROB_FLOOR."""
    scale = lower_bound(scale, SCALE_FLOOR)
    upper = _normal_cdf((y_hat + 0.5 - mean) / scale)
    lower = _normal_cdf((y_hat - 0.5 - mean) / scale)
    return lower_bound(upper - lower, PROB_FLOOR)


def rate_gaussian(
    latent: torch.Tensor,
    mean: torch.Tensor,
    scale: torch.Tensor,
    reduce: bool = True,
) -> torch.Tensor:
    """Bits for latents under the integrated (mean, scale) Gaussian model."""
    bits = -torch.log2(gaussian_bin_mass(latent, mean, scale))
    return bits.sum() if reduce else bits


class FactorizedEntropyModel(nn.Module):
    """Learned non-parametric factorized CDF, one density per channel.

    A stack of monotone 1-D maps (softplus-positive matrices, tanh
    gating) whose sigmoid is the CDF; symbol probability is the CDF
    difference across the unit bin.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = float(torch.log(torch.expm1(torch.tensor(1.0 / scale / dims[i + 1]))))
            self._matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            bias = torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cumulative(self, inputs: torch.Tensor) -> torch.Tensor:
        # inputs: (C, 1, N)
        logits = inputs
        for i, matrix in enumerate(self._matrices):
            logits = torch.bmm(F.softplus(matrix), logits) + self._biases[i]
            if i < len(self._factors):
                logits = logits + torch.tanh(self._factors[i]) * torch.tanh(logits)
        return logits

    def bin_mass(self, values: torch.Tensor) -> torch.Tensor:
        """Per-element unit-bin probability; values shaped (B, C, H, W)."""
        b, c, h, w = values.shape
        flat = values.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits_cumulative(flat - 0.5)
        upper = self._logits_cumulative(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        mass = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        mass = lower_bound(mass, PROB_FLOOR)
        return mass.reshape(c, b, h, w).permute(1, 0, 2, 3)


def rate_factorized(latent: torch.Tensor, model: FactorizedEntropyModel, reduce: bool = True) -> torch.Tensor:
    """Bits for (hyper-)latents under the learned factorized model."""
    bits = -torch.log2(model.bin_mass(latent))
    return bits.sum() if reduce else bits


@dataclass(frozen=True)
class RateReport:
    """Analytic bit accounting for one coded frame (or one coded signal).

    ``streams`` maps stream names (motion, hyper_motion, inter, hyper_inter,
    intra, hyper_intra) to bits. Mode weight maps never appear here: they
    cost zero signaled bits by construction.
    """

    pixel_count: int
    streams: Mapping[str, float]

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ValueError("pixel_count must be positive")
        clean = {}
        for name, bits in dict(self.streams).items():
            bits = float(bits)
            if bits < 0.0:
                raise ValueError(f"stream {name!r} has negative bits {bits}")
            clean[name] = bits
        object.__setattr__(self, "streams", clean)

    @property
    def bits_total(self) -> float:
        return sum(self.streams.values())

    @property
    def bpp(self) -> float:
        return self.bits_total / self.pixel_count

    @staticmethod
    def merge(reports: list["RateReport"]) -> "RateReport":
        """Aggregate accounting over frames; bits add, pixels add."""
        if not reports:
            raise ValueError("nothing to merge")
        streams: dict[str, float] = {}
        for r in reports:
            for name, bits in r.streams.items():
                streams[name] = streams.get(name, 0.0) + bits
        return RateReport(sum(r.pixel_count for r in reports), streams)


@dataclass
class CoderOutput:
    """One coding pass: reconstruction, per-stream bits, quantized latents.

    ``bits`` values are 0-dim tensors (differentiable in train mode);
    ``latents`` holds what a decoder needs alongside the condition.
    """

    reconstruction: torch.Tensor
    bits: dict[str, torch.Tensor]
    latents: dict[str, torch.Tensor] = field(default_factory=dict)

    def bits_float(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.bits.items()}


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


def _deconv(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, kernel_size=3, stride=2, padding=1, output_padding=1)


def _init_scale_half(conv: nn.Conv2d, latent_channels: int) -> None:
    # The conv emits (mean, scale) halves; bias the scale half to ~1 so the
    # scale floor starts inactive and early rates are sane.
    with torch.no_grad():
        conv.bias[latent_channels:] += 1.0


def _check_coder_input(x: torch.Tensor, in_channels: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"coder input must be (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != in_channels:
        raise ValueError(f"coder expects {in_channels} channels, got {x.shape[1]}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ValueError(f"coder input dims must be divisible by 16, got {tuple(x.shape[2:])}")


class HyperpriorCoder(nn.Module):
    """Autoencoder with a hyperprior: latents at /4, hyper-latents at /16.

    The hyper-latent is coded with the factorized model and decoded into
    per-element (mean, scale) for the Gaussian model of the main latent.
    ``input_offset`` centers the input before analysis (0.5 for [0, 1]
    frames) and is added back after synthesis.
    """

    def __init__(
        self,
        in_channels: int,
        latent_channels: int = LATENT_CHANNELS,
        hyper_channels: int = HYPER_CHANNELS,
        input_offset: float = 0.0,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.input_offset = input_offset
        lc, hc = latent_channels, hyper_channels
        act = lambda: nn.LeakyReLU(inplace=True)
        self.g_a = nn.Sequential(_conv(in_channels, lc, 2), act(), _conv(lc, lc), act(), _conv(lc, lc, 2))
        self.g_s = nn.Sequential(_deconv(lc, lc), act(), _conv(lc, lc), act(), _deconv(lc, in_channels))
        self.h_a = nn.Sequential(_conv(lc, hc, 2), act(), _conv(hc, hc, 2))
        self.h_s = nn.Sequential(_deconv(hc, lc), act(), _deconv(lc, lc), act(), nn.Conv2d(lc, 2 * lc, 1))
        _init_scale_half(self.h_s[-1], lc)
        self.hyper_model = FactorizedEntropyModel(hc)

    def forward(
        self,
        x: torch.Tensor,
        mode: str = "eval",
        generator: torch.Generator | None = None,
        noise: dict[str, torch.Tensor] | None = None,
    ) -> CoderOutput:
        _check_coder_input(x, self.in_channels)
        noise = noise or {}
        y = self.g_a(x - self.input_offset)
        z = self.h_a(y)
        z_hat = quantize(z, mode, generator, noise.get("z"))
        mean, scale = self.h_s(z_hat).chunk(2, dim=1)
        y_hat = quantize(y, mode, generator, noise.get("y"))
        bits = {
            "latent": rate_gaussian(y_hat, mean, scale),
            "hyper": rate_factorized(z_hat, self.hyper_model),
        }
        return CoderOutput(self.g_s(y_hat) + self.input_offset, bits, {"y": y_hat, "z": z_hat})

    def decode(self, latents: dict[str, torch.Tensor]) -> CoderOutput:
        """Pure decoder path: reconstruction and rates from quantized latents."""
        y_hat, z_hat = latents["y"], latents["z"]
        mean, scale = self.h_s(z_hat).chunk(2, dim=1)
        bits = {
            "latent": rate_gaussian(y_hat, mean, scale),
            "hyper": rate_factorized(z_hat, self.hyper_model),
        }
        return CoderOutput(self.g_s(y_hat) + self.input_offset, bits, dict(latents))


class ConditionalCoder(nn.Module):
    """Hyperprior autoencoder that codes a target given a decoder-side condition.

    The analysis transform sees (target, condition); the synthesis and the
    entropy parameters see condition features computed by a shared stack, so
    encoder and decoder agree bit-exactly. With ``residual_skip`` the
    synthesis output is a correction added to the condition, so an untrained
    coder already reconstructs something close to the predictor.
    """

    def __init__(
        self,
        in_channels: int,
        cond_channels: int,
        latent_channels: int = LATENT_CHANNELS,
        hyper_channels: int = HYPER_CHANNELS,
        input_offset: float = 0.0,
        residual_skip: bool = False,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.cond_channels = cond_channels
        self.input_offset = input_offset
        self.residual_skip = residual_skip
        lc, hc = latent_channels, hyper_channels
        act = lambda: nn.LeakyReLU(inplace=True)
        self.cond_net = nn.Sequential(_conv(cond_channels, lc, 2), act(), _conv(lc, lc, 2))
        self.g_a = nn.Sequential(
            _conv(in_channels + cond_channels, lc, 2), act(), _conv(lc, lc), act(), _conv(lc, lc, 2)
        )
        self.g_s = nn.Sequential(_deconv(2 * lc, lc), act(), _conv(lc, lc), act(), _deconv(lc, in_channels))
        self.h_a = nn.Sequential(_conv(lc, hc, 2), act(), _conv(hc, hc, 2))
        self.h_s = nn.Sequential(_deconv(hc, lc), act(), _deconv(lc, lc))
        self.entropy_params = nn.Sequential(
            nn.Conv2d(2 * lc, 2 * lc, 1), act(), nn.Conv2d(2 * lc, 2 * lc, 1)
        )
        _init_scale_half(self.entropy_params[-1], lc)
        self.hyper_model = FactorizedEntropyModel(hc)

    def _params_and_recon(self, y_hat, z_hat, cond):
        cond_feat = self.cond_net(cond - self.input_offset)
        mean, scale = self.entropy_params(torch.cat([self.h_s(z_hat), cond_feat], dim=1)).chunk(2, dim=1)
        correction = self.g_s(torch.cat([y_hat, cond_feat], dim=1))
        recon = cond + correction if self.residual_skip else correction + self.input_offset
        return mean, scale, recon

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        mode: str = "eval",
        generator: torch.Generator | None = None,
        noise: dict[str, torch.Tensor] | None = None,
    ) -> CoderOutput:
        _check_coder_input(x, self.in_channels)
        _check_coder_input(cond, self.cond_channels)
        if x.shape[2:] != cond.shape[2:]:
            raise ValueError(f"target {tuple(x.shape[2:])} and condition {tuple(cond.shape[2:])} differ")
        noise = noise or {}
        y = self.g_a(torch.cat([x - self.input_offset, cond - self.input_offset], dim=1))
        z = self.h_a(y)
        z_hat = quantize(z, mode, generator, noise.get("z"))
        y_hat = quantize(y, mode, generator, noise.get("y"))
        mean, scale, recon = self._params_and_recon(y_hat, z_hat, cond)
        bits = {
            "latent": rate_gaussian(y_hat, mean, scale),
            "hyper": rate_factorized(z_hat, self.hyper_model),
        }
        return CoderOutput(recon, bits, {"y": y_hat, "z": z_hat})

    def decode(self, latents: dict[str, torch.Tensor], cond: torch.Tensor) -> CoderOutput:
        y_hat, z_hat = latents["y"], latents["z"]
        mean, scale, recon = self._params_and_recon(y_hat, z_hat, cond)
        bits = {
            "latent": rate_gaussian(y_hat, mean, scale),
            "hyper": rate_factorized(z_hat, self.hyper_model),
        }
        return CoderOutput(recon, bits, dict(latents))


class StubIdentityCoder(nn.Module):
    """Test double honoring the conditional-coder interface: reconstructs the
    target exactly and reports zero bits. Its "latent" is the target itself,
    so the decoder path stays well-defined in algebra tests."""

    def forward(self, x, cond=None, mode="eval", generator=None, noise=None) -> CoderOutput:
        zero = torch.zeros((), dtype=x.dtype, device=x.device)
        return CoderOutput(x, {"latent": zero.clone(), "hyper": zero.clone()}, {"y": x})

    def decode(self, latents, cond=None) -> CoderOutput:
        y = latents["y"]
        zero = torch.zeros((), dtype=y.dtype, device=y.device)
        return CoderOutput(y, {"latent": zero.clone(), "hyper": zero.clone()}, dict(latents))
