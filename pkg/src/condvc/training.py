"""Loss assembly, the two-stage training schedule, and checkpoints.

The per-clip loss is a position-weighted sum of per-frame RD losses,

    L = sum_i (i / sum_j j) * L_i,        i = 1..N,

so later frames, whose references are themselves reconstructions, weigh
more. Each L_i charges the frame's analytic bits-per-pixel plus
``lambda1 * MSE(reconstruction, target)`` and, for P frames, a small
``lambda2 = 0.01 * lambda1`` auxiliary penalty on the motion-compensated
frame that keeps the flow path honest.

Training runs in three phases: a stage-0 warm-up that pretrains the coders
standalone (so the conditional coders have meaningful weights to freeze),
stage 1 which trains everything *except* the conditional coders, and
stage 2 which fine-tunes the whole system end-to-end at a lower rate.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .mode_codec import FrameOutput, VideoCodec
from .video_core import GopConfig, SynthSpec, gop_schedule, synth_sequence

LAMBDA_LADDER = (256.0, 512.0, 1024.0, 2048.0)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term stops being finite; names the term."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale training configuration.

    ``lambda2`` must equal ``0.01 * lambda1`` exactly. Step budgets are
    explicit; the full-scale schedule (5 epochs per stage over a large
    corpus) maps onto the same two stages.
    """

    lambda1: float = 2048.0
    lambda2: float | None = None
    gop_n: int = 5
    batch_size: int = 4
    patch_size: int = 64
    stage0_steps: int = 80
    stage1_steps: int = 60
    stage2_steps: int = 60
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-5
    seed: int = 0
    variant: str = "conditional"
    # desk-scale flows are a few pixels; the full-scale default of 20 would
    # crush them below quantization resolution
    flow_scale: float = 4.0

    def __post_init__(self):
        if self.lambda2 is None:
            object.__setattr__(self, "lambda2", 0.01 * self.lambda1)
        if self.lambda2 != 0.01 * self.lambda1:
            raise ValueError(f"lambda2 must be 0.01 * lambda1, got {self.lambda2}")
        for name in ("lambda1", "gop_n", "batch_size", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.stage0_steps, self.stage1_steps, self.stage2_steps) < 0:
            raise ValueError("step budgets must be nonnegative")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    patch_size: int = 64
    clip_length: int = 5
    seed: int = 0
    max_displacement: float = 3.0
    generators: tuple[str, ...] = ("moving_texture", "global_pan", "moving_square")


class SyntheticCorpus:
    """Deterministic, indexable stream of synthetic training clips.

    Clip ``i`` is fully determined by (config, i); training step t of a run
    consumes indices [t*B, (t+1)*B). A held-out split is just a corpus with
    a different base seed.
    """

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg

    def clip_spec(self, index: int) -> SynthSpec:
        child_seed = int(np.random.SeedSequence([self.cfg.seed, index]).generate_state(1)[0])
        generator = self.cfg.generators[index % len(self.cfg.generators)]
        return SynthSpec(
            generator=generator,
            n_frames=self.cfg.clip_length,
            height=self.cfg.patch_size,
            width=self.cfg.patch_size,
            seed=child_seed,
            max_displacement=self.cfg.max_displacement,
        )

    def clip(self, index: int):
        return synth_sequence(self.clip_spec(index))

    def clip_tensor(self, index: int) -> torch.Tensor:
        return self.clip(index).tensor()

    def batch(self, start_index: int, batch_size: int) -> torch.Tensor:
        return torch.stack([self.clip_tensor(start_index + k) for k in range(batch_size)])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def frame_loss(
    frame_index: int,
    target: torch.Tensor,
    output: FrameOutput,
    lambda1: float,
    lambda2: float,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """RD loss of one training frame: bpp + lambda1 * MSE, plus the
    lambda2-weighted motion-compensation MSE on P frames.

    Returns the scalar loss and its named parts for diagnostics. Distortion
    uses the pre-clamp reconstruction so gradients survive early training.
    """
    if frame_index < 1:
        raise ValueError(f"frame_index is 1-based, got {frame_index}")
    pixels = target.shape[0] * target.shape[2] * target.shape[3]
    parts: dict[str, torch.Tensor] = {}
    bpp = sum(output.bits.values()) / pixels
    parts["bpp"] = bpp
    parts["mse"] = (output.reconstruction_raw - target).pow(2).mean()
    loss = bpp + lambda1 * parts["mse"]
    if output.x_motion_comp is not None:
        parts["mse_motion"] = (output.x_motion_comp - target).pow(2).mean()
        loss = loss + lambda2 * parts["mse_motion"]
    return loss, parts


def sequence_loss(per_frame: list[torch.Tensor]) -> torch.Tensor:
    """Position-weighted clip loss with weights (1..N)/(N(N+1)/2)."""
    n = len(per_frame)
    if n < 1:
        raise ValueError("need at least one frame loss")
    denom = n * (n + 1) / 2
    total = per_frame[0] * (1.0 / denom)
    for i, loss in enumerate(per_frame[1:], start=2):
        total = total + loss * (i / denom)
    return total


def moving_average(values, window: int) -> list[float]:
    if window < 1 or window > len(values):
        raise ValueError(f"window {window} incompatible with {len(values)} values")
    sums = np.cumsum(np.concatenate([[0.0], np.asarray(values, dtype=np.float64)]))
    return list((sums[window:] - sums[:-window]) / window)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    step: int
    optimizer_state: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    torch.save(
        {
            "model_state": ckpt.model_state,
            "config": ckpt.config,
            "step": ckpt.step,
            "optimizer_state": ckpt.optimizer_state,
        },
        path,
    )


def load_checkpoint(path) -> Checkpoint:
    blob = torch.load(path, weights_only=True)
    return Checkpoint(
        model_state=blob["model_state"],
        config=blob["config"],
        step=blob["step"],
        optimizer_state=blob.get("optimizer_state"),
    )


def build_codec(config: dict) -> VideoCodec:
    from . import motion

    return VideoCodec(
        variant=config.get("variant", "conditional"),
        flow_scale=config.get("flow_scale", motion.FLOW_SCALE),
    )


def codec_from_checkpoint(ckpt: Checkpoint) -> VideoCodec:
    codec = build_codec(ckpt.config)
    codec.load_state_dict(ckpt.model_state)
    return codec


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TelemetryRow:
    step: int
    stage: str
    loss: float
    bpp: float
    psnr: float


def write_telemetry_csv(rows: list[TelemetryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss", "bpp", "psnr"])
        for r in rows:
            writer.writerow([r.step, r.stage, f"{r.loss:.6f}", f"{r.bpp:.6f}", f"{r.psnr:.4f}"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    telemetry: list[TelemetryRow]
    model: VideoCodec


def _check_finite(parts: dict[str, torch.Tensor], step: int, frame_index: int) -> None:
    for name, value in parts.items():
        if not bool(torch.isfinite(value)):
            raise TrainingDivergedError(
                f"non-finite loss term {name!r} on frame {frame_index} at step {step}"
            )


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def _smooth_flow_batch(shape, generator, max_mag=3.0):
    """Random near-constant flows with gentle spatial variation, as a stand-in
    distribution for stage-0 flow-coder pretraining."""
    b, _, h, w = shape
    base = (torch.rand(b, 2, 1, 1, generator=generator) * 2 - 1) * max_mag
    ripple = torch.nn.functional.interpolate(
        torch.randn(b, 2, h // 8, w // 8, generator=generator) * 0.3,
        size=(h, w),
        mode="bilinear",
        align_corners=False,
    )
    return base + ripple


def _smooth_mask(shape, generator) -> torch.Tensor:
    """Per-pixel gates in (0, 1) resembling what the mode generator emits."""
    b, _, h, w = shape
    coarse = torch.rand(b, 1, h // 8, w // 8, generator=generator) * 1.6 - 0.3
    mask = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
    return mask.clamp(0.05, 1.0)


def pretrain_coders(
    model: VideoCodec,
    corpus: SyntheticCorpus,
    cfg: TrainConfig,
    steps: int,
    noise_generator: torch.Generator,
    telemetry: list[TelemetryRow],
    start_step: int = 0,
) -> int:
    """Stage 0: train each coder (and the flow extrapolator) standalone so
    the later freeze holds meaningful weights.

    Inputs imitate what the pipeline will feed each piece: gate-masked frame
    pairs for the inter coder, flows with a spread of condition accuracies
    for the conditional flow coder, and ground-truth motion histories for
    the extrapolator.
    """
    if steps == 0:
        return start_step
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage1_lr)
    lam = cfg.lambda1
    for k in range(steps):
        step = start_step + k
        sources = [corpus.clip(step * cfg.batch_size + j) for j in range(cfg.batch_size)]
        clips = torch.stack([s.tensor() for s in sources])
        cur, prev = clips[:, 1], clips[:, 0]
        flows = _smooth_flow_batch(
            (cfg.batch_size, 2, cfg.patch_size, cfg.patch_size), noise_generator
        )

        total = torch.zeros(())
        pixels = cur.shape[0] * cur.shape[2] * cur.shape[3]
        parts = {}
        # intra coder on single frames
        out = model.intra_coder(cur, "train", noise_generator)
        parts["intra"] = (out.bits["latent"] + out.bits["hyper"]) / pixels + lam * (
            out.reconstruction - cur
        ).pow(2).mean()
        # standalone flow coder on synthetic flows
        fout = model.flow_coder(flows / model.flow_scale, "train", noise_generator)
        parts["flow"] = (fout.bits["latent"] + fout.bits["hyper"]) / pixels + lam * (
            fout.reconstruction - flows / model.flow_scale
        ).pow(2).mean()
        # conditional flow coder across a spread of condition accuracies,
        # from near-perfect extrapolation to uninformative
        sigma = (0.05, 0.5, 2.0)[k % 3]
        noisy = flows + torch.randn(flows.shape, generator=noise_generator) * sigma
        cout = model.cond_flow_coder(
            flows / model.flow_scale, noisy / model.flow_scale, "train", noise_generator
        )
        parts["cond_flow"] = (cout.bits["latent"] + cout.bits["hyper"]) / pixels + lam * (
            cout.reconstruction - flows / model.flow_scale
        ).pow(2).mean()
        # inter coder: code a gated current frame given the gated predictor,
        # the shape of its pipeline inputs
        if model.variant == "conditional":
            mask = _smooth_mask(cur.shape, noise_generator)
            iout = model.inter_coder(mask * cur, mask * prev, "train", noise_generator)
            recon = iout.reconstruction
            target = mask * cur
        else:
            iout = model.inter_coder(cur - prev, "train", noise_generator)
            recon = prev + iout.reconstruction
            target = cur
        parts["inter"] = (iout.bits["latent"] + iout.bits["hyper"]) / pixels + lam * (
            recon - target
        ).pow(2).mean()
        # flow extrapolator supervised on ground-truth motion histories
        have_flows = [s for s in sources if s.gt_flows and all(f is not None for f in s.gt_flows[1:4])]
        if len(have_flows) == cfg.batch_size and clips.shape[1] >= 4:
            hist_frames = [clips[:, 0], clips[:, 1], clips[:, 2]]
            f1 = torch.stack([s.gt_flows[1].data for s in have_flows])
            f2 = torch.stack([s.gt_flows[2].data for s in have_flows])
            f3 = torch.stack([s.gt_flows[3].data for s in have_flows])
            f_c = model.flow_extrapolator(hist_frames, [f1, f2])
            parts["extrapolator"] = (f_c - f3).pow(2).mean()

        for name, value in parts.items():
            if not bool(torch.isfinite(value)):
                raise TrainingDivergedError(f"non-finite pretraining term {name!r} at step {step}")
            total = total + value

        opt.zero_grad()
        total.backward()
        opt.step()
        telemetry.append(TelemetryRow(step, "stage0", float(total.detach()), 0.0, 0.0))
    return start_step + steps


def set_conditional_coders_trainable(model: VideoCodec, trainable: bool) -> None:
    for prefix in model.conditional_coder_prefixes:
        for p in getattr(model, prefix).parameters():
            p.requires_grad_(trainable)


def conditional_coder_parameter_names(model: VideoCodec) -> list[str]:
    return [
        name
        for name, _ in model.named_parameters()
        if name.startswith(model.conditional_coder_prefixes)
    ]


def run_training_stage(
    model: VideoCodec,
    corpus: SyntheticCorpus,
    cfg: TrainConfig,
    stage: str,
    steps: int,
    lr: float,
    noise_generator: torch.Generator,
    telemetry: list[TelemetryRow],
    start_step: int = 0,
) -> int:
    """One optimization stage over full GOP clips; returns the next step index."""
    if steps == 0:
        return start_step
    roles = gop_schedule(GopConfig(cfg.gop_n, cfg.gop_n))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    for k in range(steps):
        step = start_step + k
        batch = corpus.batch(step * cfg.batch_size, cfg.batch_size)
        outputs = model.encode_clip(batch, roles, "train", noise_generator)
        losses = []
        mses = []
        bpps = []
        for i, out in enumerate(outputs):
            li, parts = frame_loss(i + 1, batch[:, i], out, cfg.lambda1, cfg.lambda2)
            _check_finite(parts, step, i + 1)
            losses.append(li)
            mses.append(float(parts["mse"].detach()))
            bpps.append(float(parts["bpp"].detach()))
        loss = sequence_loss(losses)
        if not bool(torch.isfinite(loss)):
            raise TrainingDivergedError(f"non-finite sequence loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        telemetry.append(
            TelemetryRow(
                step,
                stage,
                float(loss.detach()),
                float(np.mean(bpps)),
                _psnr_from_mse(float(np.mean(mses))),
            )
        )
    return start_step + steps


def train_two_stage(
    cfg: TrainConfig,
    corpus: SyntheticCorpus | None = None,
    model: VideoCodec | None = None,
) -> TrainResult:
    """Full schedule: stage-0 coder pretraining, stage 1 with the conditional
    coders frozen at their pretrained weights, stage 2 end-to-end."""
    torch.manual_seed(cfg.seed)
    if model is None:
        model = VideoCodec(variant=cfg.variant, flow_scale=cfg.flow_scale)
    if corpus is None:
        corpus = SyntheticCorpus(
            CorpusConfig(patch_size=cfg.patch_size, clip_length=cfg.gop_n, seed=cfg.seed)
        )
    noise_generator = torch.Generator().manual_seed(cfg.seed + 1)
    telemetry: list[TelemetryRow] = []

    step = pretrain_coders(model, corpus, cfg, cfg.stage0_steps, noise_generator, telemetry)

    set_conditional_coders_trainable(model, False)
    step = run_training_stage(
        model, corpus, cfg, "stage1", cfg.stage1_steps, cfg.stage1_lr,
        noise_generator, telemetry, step,
    )
    set_conditional_coders_trainable(model, True)
    step = run_training_stage(
        model, corpus, cfg, "stage2", cfg.stage2_steps, cfg.stage2_lr,
        noise_generator, telemetry, step,
    )

    ckpt = Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=asdict(cfg),
        step=step,
    )
    return TrainResult(ckpt, telemetry, model)


def init_rate_ladder(
    base: Checkpoint,
    targets: tuple[float, ...] = (1024.0, 512.0, 256.0),
    corpus: SyntheticCorpus | None = None,
    fine_tune_steps: int = 60,
    fine_tune_lr: float = 1e-4,
) -> dict[float, Checkpoint]:
    """Lower-rate models initialized from the highest-rate checkpoint and
    fine-tuned with their own lambda pair. Returns {lambda1: checkpoint},
    including the base itself."""
    base_cfg = TrainConfig(**base.config)
    ladder: dict[float, Checkpoint] = {base_cfg.lambda1: base}
    for lam in targets:
        cfg = replace(base_cfg, lambda1=float(lam), lambda2=0.01 * float(lam))
        model = codec_from_checkpoint(base)
        cor = corpus or SyntheticCorpus(
            CorpusConfig(patch_size=cfg.patch_size, clip_length=cfg.gop_n, seed=cfg.seed)
        )
        noise_generator = torch.Generator().manual_seed(cfg.seed + int(lam))
        telemetry: list[TelemetryRow] = []
        run_training_stage(
            model, cor, cfg, f"ladder_{int(lam)}", fine_tune_steps, fine_tune_lr,
            noise_generator, telemetry, start_step=base.step,
        )
        ladder[float(lam)] = Checkpoint(
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            config=asdict(cfg),
            step=base.step + fine_tune_steps,
        )
    return ladder
