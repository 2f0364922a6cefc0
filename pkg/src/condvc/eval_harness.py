"""Quality metrics, BD-Rate, and the RD evaluation protocol.

PSNR and MS-SSIM are computed on RGB in [0, 1]. MS-SSIM uses the standard
5-scale weights with an 11x11 Gaussian window (sigma 1.5), computed per
color channel and averaged; windows are applied with reflect padding so a
160x160 frame still supports all five scales. Below that, the scale count
degrades (halving while the smallest side stays >= 6) and is recorded in
protocol metadata, never silently mixed with full-scale numbers.

BD-Rate integrates piecewise-cubic-hermite (PCHIP) interpolants of log-rate
over the overlapping quality range; the interpolation variant is recorded
in every report because published deltas differ slightly across variants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .mode_codec import VideoCodec, encode_gop
from .neural_coders import RateReport
from .video_core import Frame, FrameRole, GopConfig, SequenceSource

PSNR_CAP_DB = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WINDOW = 11
MSSSIM_SIGMA = 1.5
_MIN_SIDE_PER_SCALE = 6  # reflect padding needs dim > window // 2
BD_INTERPOLATION = "pchip-log-rate"


def _as_tensor(frame) -> torch.Tensor:
    if isinstance(frame, Frame):
        return frame.data
    return frame


def psnr_rgb(a, b) -> float:
    """10 log10(1 / MSE) over all pixels and channels, capped at 100 dB."""
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"frame shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float((ta.double() - tb.double()).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(dtype) -> torch.Tensor:
    coords = torch.arange(MSSSIM_WINDOW, dtype=dtype) - (MSSSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * MSSSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _windowed(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    pad = MSSSIM_WINDOW // 2
    c = x.shape[1]
    kernel = window.expand(c, 1, -1, -1)
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), kernel, groups=c)


def msssim_scale_count(height: int, width: int) -> int:
    """How many of the 5 scales fit: halve while the short side stays >= 6."""
    side = min(height, width)
    count = 0
    while count < len(MSSSIM_WEIGHTS) and side >= _MIN_SIDE_PER_SCALE:
        count += 1
        side //= 2
    return count


def msssim_rgb(a, b) -> float:
    """Multi-scale structural similarity on RGB frames, in [0, 1]."""
    ta, tb = _as_tensor(a).double().unsqueeze(0), _as_tensor(b).double().unsqueeze(0)
    if ta.shape != tb.shape:
        raise ValueError(f"frame shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    scales = msssim_scale_count(ta.shape[2], ta.shape[3])
    if scales == 0:
        raise ValueError(
            f"frame {tuple(ta.shape[2:])} too small for even one scale "
            f"(needs min side >= {_MIN_SIDE_PER_SCALE})"
        )
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    window = _gaussian_window(torch.float64)
    c1 = 0.01**2
    c2 = 0.03**2

    values = []
    x, y = ta, tb
    for k in range(scales):
        mu_x = _windowed(x, window)
        mu_y = _windowed(y, window)
        sigma_x = _windowed(x * x, window) - mu_x * mu_x
        sigma_y = _windowed(y * y, window) - mu_y * mu_y
        sigma_xy = _windowed(x * y, window) - mu_x * mu_y
        cs_map = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
        if k == scales - 1:
            lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
            values.append(float((lum * cs_map).mean().clamp(min=0.0)))
        else:
            values.append(float(cs_map.mean().clamp(min=0.0)))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    score = 1.0
    for v, w in zip(values, weights):
        score *= v ** float(w)
    return min(max(score, 0.0), 1.0)


# ---------------------------------------------------------------------------
# RD curves and BD-Rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric: str  # "psnr" or "msssim"

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError(f"bpp must be nonnegative, got {self.bpp}")
        if self.metric == "msssim" and not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"msssim quality must be in [0, 1], got {self.quality}")


@dataclass(frozen=True)
class RDCurve:
    label: str
    metric: str
    points: tuple[RDPoint, ...]

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        if len(pts) < 2:
            raise ValueError(f"curve {self.label!r} needs at least 2 points, got {len(pts)}")
        for a, b in zip(pts, pts[1:]):
            if b.bpp <= a.bpp:
                raise ValueError(f"curve {self.label!r}: bpp not strictly increasing at {b.bpp}")
            if b.quality < a.quality:
                raise ValueError(
                    f"curve {self.label!r}: quality drops from {a.quality:.4f} to "
                    f"{b.quality:.4f} as bpp rises from {a.bpp:.4f} to {b.bpp:.4f}"
                )
            if any(p.metric != self.metric for p in pts):
                raise ValueError(f"curve {self.label!r}: mixed metrics")
        object.__setattr__(self, "points", pts)

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference of ``test`` vs ``anchor`` in percent over
    the overlapping quality range; negative means the test codec saves bits.
    """
    from scipy.interpolate import PchipInterpolator

    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ValueError(f"curve {curve.label!r} has {len(curve.points)} points, need >= 4")
        if np.any(np.diff(curve.qualities) <= 0):
            raise ValueError(f"curve {curve.label!r}: quality must be strictly increasing for BD-Rate")
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not lo < hi:
        raise ValueError(
            f"no quality overlap between {anchor.label!r} "
            f"[{anchor.qualities.min():.4f}, {anchor.qualities.max():.4f}] and "
            f"{test.label!r} [{test.qualities.min():.4f}, {test.qualities.max():.4f}]"
        )
    integrals = []
    for curve in (anchor, test):
        interp = PchipInterpolator(curve.qualities, np.log(curve.bpps))
        integrals.append(float(interp.antiderivative()(hi) - interp.antiderivative()(lo)))
    mean_log_diff = (integrals[1] - integrals[0]) / (hi - lo)
    return 100.0 * (math.exp(mean_log_diff) - 1.0)


# ---------------------------------------------------------------------------
# Test protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    """96 frames at GOP 32 is the reference protocol; desk-scale overrides
    are allowed and recorded in the output metadata."""

    gop_size: int = 32
    max_frames: int = 96
    dataset: str = "synthetic"
    lambdas: tuple[float, ...] = (256.0, 512.0, 1024.0, 2048.0)


@dataclass
class ProtocolResult:
    config: ProtocolConfig
    records: list[dict]
    rows: list[dict]                 # one per (sequence, lambda)
    summary: dict
    curves: dict[str, RDCurve]       # metric -> curve

    def curve(self, metric: str) -> RDCurve:
        return self.curves[metric]


def frame_record(sequence: str, lambda1: float, index: int, role: FrameRole,
                 report: RateReport, psnr: float, msssim: float) -> dict:
    return {
        "sequence": sequence,
        "lambda1": lambda1,
        "index": index,
        "role": role.value,
        "streams": dict(report.streams),
        "pixels": report.pixel_count,
        "psnr": psnr,
        "msssim": msssim,
    }


def write_frame_records(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_frame_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def summarize_records(records: list[dict]) -> list[dict]:
    """Replay aggregation from per-frame records alone: one row per
    (sequence, lambda) with bpp, mean psnr and mean msssim."""
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        groups.setdefault((rec["sequence"], rec["lambda1"]), []).append(rec)
    rows = []
    for (sequence, lam), recs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        bits = sum(sum(r["streams"].values()) for r in recs)
        pixels = sum(r["pixels"] for r in recs)
        rows.append(
            {
                "sequence": sequence,
                "lambda1": lam,
                "frames": len(recs),
                "bpp": bits / pixels,
                "psnr": float(np.mean([r["psnr"] for r in recs])),
                "msssim": float(np.mean([r["msssim"] for r in recs])),
            }
        )
    return rows


def _encode_one(codec, source, seq_name, lam, cfg) -> list[dict]:
    budget = min(cfg.max_frames, len(source))
    result = encode_gop(codec, source, GopConfig(cfg.gop_size, budget))
    return [
        frame_record(
            seq_name, lam, t, role, report,
            psnr_rgb(source.frames[t], recon),
            msssim_rgb(source.frames[t], recon),
        )
        for t, (recon, report, role) in enumerate(
            zip(result.reconstructions, result.reports, result.roles)
        )
    ]


def run_protocol(
    sequences: list[SequenceSource],
    codecs: dict[float, VideoCodec],
    cfg: ProtocolConfig = ProtocolConfig(),
    label: str = "condvc",
    jobs: int = 1,
) -> ProtocolResult:
    """Encode every sequence under every rate point and aggregate RD curves.

    ``codecs`` maps lambda1 to an eval-ready codec; every lambda in
    ``cfg.lambdas`` must be present. Sequences are independent, so ``jobs``
    may encode them concurrently (weights are read-only); records are
    collected in deterministic (lambda, sequence) order either way.
    """
    missing = [lam for lam in cfg.lambdas if lam not in codecs]
    if missing:
        raise ValueError(f"rate ladder incomplete: missing checkpoints for lambda1 = {missing}")
    if not sequences:
        raise ValueError("no sequences to evaluate")

    tasks = [
        (codecs[lam].eval(), source, source.provenance or f"seq{seq_idx}", lam)
        for lam in cfg.lambdas
        for seq_idx, source in enumerate(sequences)
    ]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(lambda t: _encode_one(t[0], t[1], t[2], t[3], cfg), tasks))
    else:
        chunks = [_encode_one(codec, src, name, lam, cfg) for codec, src, name, lam in tasks]
    records: list[dict] = [rec for chunk in chunks for rec in chunk]

    rows = summarize_records(records)
    per_lambda: dict[float, dict] = {}
    for lam in cfg.lambdas:
        mine = [r for r in rows if r["lambda1"] == lam]
        per_lambda[lam] = {
            "bpp": float(np.mean([r["bpp"] for r in mine])),
            "psnr": float(np.mean([r["psnr"] for r in mine])),
            "msssim": float(np.mean([r["msssim"] for r in mine])),
        }

    curves = {
        "psnr": RDCurve(
            label,
            "psnr",
            tuple(RDPoint(per_lambda[lam]["bpp"], per_lambda[lam]["psnr"], "psnr") for lam in cfg.lambdas),
        ),
        "msssim": RDCurve(
            label,
            "msssim",
            tuple(
                RDPoint(per_lambda[lam]["bpp"], per_lambda[lam]["msssim"], "msssim")
                for lam in cfg.lambdas
            ),
        ),
    }
    first = sequences[0]
    summary = {
        "label": label,
        "dataset": cfg.dataset,
        "protocol": {
            "gop_size": cfg.gop_size,
            "max_frames": cfg.max_frames,
            "reference_protocol": cfg.gop_size == 32 and cfg.max_frames == 96,
            "bd_interpolation": BD_INTERPOLATION,
            "msssim_scales": msssim_scale_count(first.height, first.width),
        },
        "points": {str(lam): per_lambda[lam] for lam in cfg.lambdas},
    }
    return ProtocolResult(cfg, records, rows, summary, curves)


def write_protocol_csv(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "lambda1", "frames", "bpp", "psnr", "msssim"])
        for r in rows:
            writer.writerow(
                [r["sequence"], r["lambda1"], r["frames"],
                 f"{r['bpp']:.6f}", f"{r['psnr']:.4f}", f"{r['msssim']:.6f}"]
            )


def plot_curves(curves: list[RDCurve], path, title: str = "") -> None:
    """Static RD plot, quality vs bits per pixel."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for curve in curves:
        ax.plot(curve.bpps, curve.qualities, marker="o", label=curve.label)
    metric = curves[0].metric if curves else ""
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("RGB-PSNR (dB)" if metric == "psnr" else "RGB-MS-SSIM")
    ax.grid(True, alpha=0.4)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bd_rate_table(anchors: dict[str, RDCurve], tests: dict[str, RDCurve]) -> dict[str, float]:
    """BD-Rate of test vs anchor per metric (keys shared by both sides)."""
    return {
        metric: bd_rate(anchors[metric], tests[metric])
        for metric in sorted(set(anchors) & set(tests))
    }
