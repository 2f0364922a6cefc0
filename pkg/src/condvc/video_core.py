"""Core video data model: frames, flows, weight maps, GOP structure, I/O.

Frames are RGB float tensors in [0, 1], shape (3, H, W); YUV exists only at
the file boundary (8-bit 4:2:0, full-range BT.601). Synthetic generators
emit their own ground-truth flow fields so the flow estimator can be tested
against exact motion.

Flow convention used repo-wide: a flow map F aligned with frame t stores,
per pixel p, the displacement to the sample position in the reference
frame, i.e. ``warp(reference, F)(p) = reference(p + F(p))`` reconstructs
frame t. Channel 0 is horizontal (x), channel 1 vertical (y), in pixels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DEFAULT_STRIDE = 4
SUPPORTED_FORMATS = ("rgb24", "yuv420")


def _check_spatial(height: int, width: int, stride: int) -> None:
    if height < 8 or width < 8:
        raise ValueError(f"frame dimensions {height}x{width} below the 8x8 minimum")
    if height % stride or width % stride:
        raise ValueError(f"frame dimensions {height}x{width} not divisible by stride {stride}")


@dataclass(frozen=True)
class Frame:
    """One RGB frame, values in [0, 1], tensor shape (3, H, W).

    Treat the tensor as immutable once wrapped; every operation in this
    package returns new frames instead of mutating.
    """

    data: torch.Tensor
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        t = self.data
        if t.ndim != 3 or t.shape[0] != 3:
            raise ValueError(f"frame tensor must be (3, H, W), got {tuple(t.shape)}")
        if not t.is_floating_point():
            raise ValueError("frame tensor must be floating point")
        _check_spatial(t.shape[1], t.shape[2], self.stride)
        if float(t.min()) < 0.0 or float(t.max()) > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def pixel_count(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class FlowMap:
    """Dense 2-channel displacement field in pixel units, shape (2, H, W)."""

    data: torch.Tensor

    def __post_init__(self):
        t = self.data
        if t.ndim != 3 or t.shape[0] != 2:
            raise ValueError(f"flow tensor must be (2, H, W), got {tuple(t.shape)}")
        if not t.is_floating_point():
            raise ValueError("flow tensor must be floating point")
        if not bool(torch.isfinite(t).all()):
            raise ValueError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class WeightMap:
    """Per-pixel coding-mode weight in the open interval (0, 1), shape (1, H, W).

    Single channel by design; it broadcasts over the three color channels
    when multiplied into a frame.
    """

    data: torch.Tensor

    def __post_init__(self):
        t = self.data
        if t.ndim != 3 or t.shape[0] != 1:
            raise ValueError(f"weight map tensor must be (1, H, W), got {tuple(t.shape)}")
        if float(t.min()) <= 0.0 or float(t.max()) >= 1.0:
            raise ValueError("weight map values must lie strictly inside (0, 1)")


class FrameRole(str, enum.Enum):
    I = "I"
    P_FIRST = "P_first"
    P_LATER = "P_later"


@dataclass(frozen=True)
class GopConfig:
    """Group-of-pictures layout: frame 0 of each GOP is intra-coded."""

    gop_size: int
    frame_budget: int

    def __post_init__(self):
        if self.gop_size < 1:
            raise ValueError(f"gop_size must be >= 1, got {self.gop_size}")
        if self.frame_budget < 1:
            raise ValueError(f"frame_budget must be >= 1, got {self.frame_budget}")


def gop_schedule(cfg: GopConfig) -> list[FrameRole]:
    """Frame roles for a whole encode.

    The first two P frames of each GOP use the standalone motion path while
    the decoded-history buffers (3 frames, 2 flows) fill; every later P
    frame can run the extrapolation-conditioned path.
    """
    roles = []
    for t in range(cfg.frame_budget):
        pos = t % cfg.gop_size
        if pos == 0:
            roles.append(FrameRole.I)
        elif pos <= 2:
            roles.append(FrameRole.P_FIRST)
        else:
            roles.append(FrameRole.P_LATER)
    return roles


@dataclass
class SequenceSource:
    """An ordered run of same-sized frames plus where they came from.

    ``gt_flows`` aligns with frames: entry t (t >= 1) is the flow warping
    frame t-1 into frame t; entry 0 is always None. Only synthetic
    generators populate it.
    """

    frames: list[Frame]
    provenance: str
    gt_flows: list[FlowMap | None] | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        h, w = self.frames[0].height, self.frames[0].width
        for i, f in enumerate(self.frames):
            if (f.height, f.width) != (h, w):
                raise ValueError(f"frame {i} is {f.height}x{f.width}, expected {h}x{w}")
        if self.gt_flows is not None and len(self.gt_flows) != len(self.frames):
            raise ValueError("gt_flows must align 1:1 with frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def tensor(self) -> torch.Tensor:
        """All frames stacked as (N, 3, H, W)."""
        return torch.stack([f.data for f in self.frames])


# ---------------------------------------------------------------------------
# Raw file I/O
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceDescriptor:
    width: int
    height: int
    pix_fmt: str
    frame_count: int

    def __post_init__(self):
        if self.pix_fmt not in SUPPORTED_FORMATS:
            raise ValueError(
                f"unsupported format {self.pix_fmt!r}; supported formats: {', '.join(SUPPORTED_FORMATS)}"
            )
        if self.width < 1 or self.height < 1 or self.frame_count < 1:
            raise ValueError("descriptor dimensions and frame_count must be positive")
        if self.pix_fmt == "yuv420" and (self.width % 2 or self.height % 2):
            raise ValueError("yuv420 requires even dimensions")

    @property
    def frame_bytes(self) -> int:
        if self.pix_fmt == "rgb24":
            return self.width * self.height * 3
        return self.width * self.height * 3 // 2


_DESCRIPTOR_KEYS = {"width", "height", "format", "frame_count"}


def parse_descriptor(path: str | Path) -> SequenceDescriptor:
    """Read a plain key=value descriptor (width, height, format, frame_count)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _DESCRIPTOR_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    missing = _DESCRIPTOR_KEYS - values.keys()
    if missing:
        raise ValueError(f"{path}: missing descriptor keys: {sorted(missing)}")
    return SequenceDescriptor(
        width=int(values["width"]),
        height=int(values["height"]),
        pix_fmt=values["format"],
        frame_count=int(values["frame_count"]),
    )


def write_descriptor(desc: SequenceDescriptor, path: str | Path) -> None:
    Path(path).write_text(
        f"width={desc.width}\nheight={desc.height}\n"
        f"format={desc.pix_fmt}\nframe_count={desc.frame_count}\n"
    )


# Full-range BT.601 (8-bit offsets handled directly in 0..255 space).
_YUV_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Full-range BT.601 conversion of 0..255 planes to RGB in [0, 1]."""
    yuv = np.stack([y, u - 128.0, v - 128.0], axis=-1)
    rgb = yuv @ _YUV_TO_RGB.T
    return np.clip(rgb / 255.0, 0.0, 1.0)


def rgb_to_yuv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of yuv_to_rgb on [0, 1] RGB, returning 0..255 float planes."""
    r, g, b = rgb[..., 0] * 255.0, rgb[..., 1] * 255.0, rgb[..., 2] * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = (b - y) * (0.5 / (1.0 - 0.114)) + 128.0
    v = (r - y) * (0.5 / (1.0 - 0.299)) + 128.0
    return y, u, v


def _frames_from_rgb24(data: bytes, desc: SequenceDescriptor) -> list[Frame]:
    arr = np.frombuffer(data, dtype=np.uint8).reshape(
        desc.frame_count, desc.height, desc.width, 3
    )
    out = []
    for t in range(desc.frame_count):
        rgb = arr[t].astype(np.float32) / 255.0
        out.append(Frame(torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))))
    return out


def _frames_from_yuv420(data: bytes, desc: SequenceDescriptor) -> list[Frame]:
    w, h = desc.width, desc.height
    luma, chroma = w * h, (w // 2) * (h // 2)
    out = []
    raw = np.frombuffer(data, dtype=np.uint8)
    for t in range(desc.frame_count):
        base = t * desc.frame_bytes
        y = raw[base : base + luma].reshape(h, w).astype(np.float64)
        u = raw[base + luma : base + luma + chroma].reshape(h // 2, w // 2).astype(np.float64)
        v = raw[base + luma + chroma : base + luma + 2 * chroma].reshape(h // 2, w // 2)
        # nearest-neighbor chroma upsampling
        u_full = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
        v_full = np.repeat(np.repeat(v.astype(np.float64), 2, axis=0), 2, axis=1)
        rgb = yuv_to_rgb(y, u_full, v_full).astype(np.float32)
        out.append(Frame(torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))))
    return out


def load_sequence(path: str | Path, desc: SequenceDescriptor) -> SequenceSource:
    """Load a raw video file; frames come out normalized to [0, 1] RGB."""
    data = Path(path).read_bytes()
    expected = desc.frame_bytes * desc.frame_count
    if len(data) < expected:
        raise ValueError(
            f"{path}: truncated file, expected {expected} bytes but found {len(data)}"
        )
    if desc.pix_fmt == "rgb24":
        frames = _frames_from_rgb24(data[:expected], desc)
    else:
        frames = _frames_from_yuv420(data[:expected], desc)
    return SequenceSource(frames=frames, provenance=str(path))


def save_sequence(seq: SequenceSource, path: str | Path, pix_fmt: str = "rgb24") -> SequenceDescriptor:
    """Write frames as 8-bit raw video and return the matching descriptor."""
    desc = SequenceDescriptor(seq.width, seq.height, pix_fmt, len(seq))
    chunks = []
    for frame in seq.frames:
        rgb = frame.data.permute(1, 2, 0).numpy().astype(np.float64)
        if pix_fmt == "rgb24":
            chunks.append(np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).tobytes())
        else:
            y, u, v = rgb_to_yuv(rgb)
            u = u.reshape(desc.height // 2, 2, desc.width // 2, 2).mean(axis=(1, 3))
            v = v.reshape(desc.height // 2, 2, desc.width // 2, 2).mean(axis=(1, 3))
            for plane in (y, u, v):
                chunks.append(np.clip(np.rint(plane), 0, 255).astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))
    return desc


def save_frame_png(frame: Frame, path: str | Path) -> None:
    from PIL import Image

    rgb = np.clip(np.rint(frame.data.permute(1, 2, 0).numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_frame_png(path: str | Path) -> Frame:
    from PIL import Image

    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return Frame(torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))))


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------

GENERATORS = ("moving_square", "moving_texture", "global_pan")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic clip.

    ``displacement`` is the per-frame motion (dx, dy) of the moving element;
    None draws it from the seed, bounded by ``max_displacement``.
    """

    generator: str
    n_frames: int
    height: int = 64
    width: int = 64
    seed: int = 0
    max_displacement: float = 3.0
    displacement: tuple[float, float] | None = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(
                f"unknown generator {self.generator!r}; known generators: {', '.join(GENERATORS)}"
            )
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        _check_spatial(self.height, self.width, DEFAULT_STRIDE)
        if self.displacement is not None:
            dx, dy = self.displacement
            if max(abs(dx), abs(dy)) > self.max_displacement:
                raise ValueError(
                    f"displacement {self.displacement} exceeds max_displacement {self.max_displacement}"
                )


def _smooth_texture(rng: np.random.Generator, height: int, width: int, blur: float = 3.0) -> np.ndarray:
    """A colorful band-limited texture in [0.05, 0.95], shape (H, W, 3)."""
    from scipy.ndimage import gaussian_filter

    tex = rng.standard_normal((height, width, 3))
    for c in range(3):
        tex[..., c] = gaussian_filter(tex[..., c], sigma=blur, mode="wrap")
    lo, hi = tex.min(), tex.max()
    return 0.05 + 0.9 * (tex - lo) / max(hi - lo, 1e-9)


def _sample_texture(tex: np.ndarray, y0: float, x0: float, height: int, width: int) -> np.ndarray:
    """Bilinear crop of a (wrapping) texture at a possibly fractional offset."""
    ys = (np.arange(height) + y0)[:, None]
    xs = (np.arange(width) + x0)[None, :]
    y_floor = np.floor(ys).astype(int)
    x_floor = np.floor(xs).astype(int)
    wy = ys - y_floor
    wx = xs - x_floor
    th, tw = tex.shape[:2]
    out = np.zeros((height, width, 3))
    for dy, dx, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        out += w[..., None] * tex[(y_floor + dy) % th, (x_floor + dx) % tw]
    return out


def _to_frame(rgb: np.ndarray) -> Frame:
    arr = np.clip(rgb, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)
    return Frame(torch.from_numpy(np.ascontiguousarray(arr)))


def _constant_flow(dx: float, dy: float, height: int, width: int) -> FlowMap:
    flow = torch.zeros(2, height, width)
    flow[0].fill_(dx)
    flow[1].fill_(dy)
    return FlowMap(flow)


def _draw_displacement(rng: np.random.Generator, spec: SynthSpec, integer: bool) -> tuple[float, float]:
    if spec.displacement is not None:
        return spec.displacement
    m = spec.max_displacement
    if integer:
        hi = max(int(m), 1)
        dx, dy = int(rng.integers(-hi, hi + 1)), int(rng.integers(-hi, hi + 1))
    else:
        dx, dy = rng.uniform(-m, m), rng.uniform(-m, m)
    return float(dx), float(dy)


def _gen_global_pan(spec: SynthSpec, rng: np.random.Generator):
    dx, dy = _draw_displacement(rng, spec, integer=False)
    pad = int(np.ceil(spec.max_displacement * spec.n_frames)) + 4
    tex = _smooth_texture(rng, spec.height + 2 * pad, spec.width + 2 * pad)
    frames, flows = [], [None]
    for t in range(spec.n_frames):
        frames.append(_to_frame(_sample_texture(tex, pad + t * dy, pad + t * dx, spec.height, spec.width)))
        if t > 0:
            flows.append(_constant_flow(dx, dy, spec.height, spec.width))
    return frames, flows


def _gen_moving_square(spec: SynthSpec, rng: np.random.Generator):
    dx, dy = _draw_displacement(rng, spec, integer=True)
    background = _smooth_texture(rng, spec.height, spec.width, blur=6.0)
    side = int(rng.integers(spec.height // 4, spec.height // 2))
    color = rng.uniform(0.1, 0.9, size=3)
    margin = int(np.ceil(abs(dx) * spec.n_frames)) + 1, int(np.ceil(abs(dy) * spec.n_frames)) + 1
    x0 = int(rng.integers(margin[0], max(spec.width - side - margin[0], margin[0] + 1)))
    y0 = int(rng.integers(margin[1], max(spec.height - side - margin[1], margin[1] + 1)))
    frames, flows = [], [None]
    for t in range(spec.n_frames):
        rgb = background.copy()
        sx = int(round(x0 + t * dx))
        sy = int(round(y0 + t * dy))
        sx = min(max(sx, 0), spec.width - side)
        sy = min(max(sy, 0), spec.height - side)
        rgb[sy : sy + side, sx : sx + side] = color
        frames.append(_to_frame(rgb))
        if t > 0:
            flow = torch.zeros(2, spec.height, spec.width)
            flow[0, sy : sy + side, sx : sx + side] = -dx
            flow[1, sy : sy + side, sx : sx + side] = -dy
            flows.append(FlowMap(flow))
    return frames, flows


def _gen_moving_texture(spec: SynthSpec, rng: np.random.Generator):
    dx, dy = _draw_displacement(rng, spec, integer=False)
    background = _smooth_texture(rng, spec.height, spec.width, blur=8.0)
    # cap the patch so it never leaves the frame over the clip's travel
    travel_x = abs(dx) * (spec.n_frames - 1)
    travel_y = abs(dy) * (spec.n_frames - 1)
    max_side = int(min(spec.width - 4 - travel_x, spec.height - 4 - travel_y))
    if max_side < 6:  # frame too small for this motion: scale the motion down
        shrink = (min(spec.height, spec.width) - 10.0) / max(travel_x, travel_y, 1e-9)
        dx, dy = dx * max(shrink, 0.0), dy * max(shrink, 0.0)
        travel_x, travel_y = abs(dx) * (spec.n_frames - 1), abs(dy) * (spec.n_frames - 1)
        max_side = int(min(spec.width - 4 - travel_x, spec.height - 4 - travel_y))
    patch_side = int(min(int(rng.integers(spec.height // 3, 2 * spec.height // 3)), max_side))
    patch_side = max(patch_side, 4)
    patch_tex = _smooth_texture(rng, patch_side * 2, patch_side * 2, blur=1.5)
    x0 = rng.uniform(2, max(spec.width - patch_side - 2 - travel_x, 2.0) + 1e-9)
    y0 = rng.uniform(2, max(spec.height - patch_side - 2 - travel_y, 2.0) + 1e-9)
    if dx < 0:
        x0 += travel_x
    if dy < 0:
        y0 += travel_y
    x0 = float(np.clip(x0, 0, spec.width - patch_side))
    y0 = float(np.clip(y0, 0, spec.height - patch_side))
    frames, flows = [], [None]
    for t in range(spec.n_frames):
        rgb = background.copy()
        px = x0 + t * dx
        py = y0 + t * dy
        ix, iy = int(np.floor(px)), int(np.floor(py))
        patch = _sample_texture(patch_tex, py - iy, px - ix, patch_side, patch_side)
        x_lo, y_lo = max(ix, 0), max(iy, 0)
        x_hi, y_hi = min(ix + patch_side, spec.width), min(iy + patch_side, spec.height)
        rgb[y_lo:y_hi, x_lo:x_hi] = patch[y_lo - iy : y_hi - iy, x_lo - ix : x_hi - ix]
        frames.append(_to_frame(rgb))
        if t > 0:
            flow = torch.zeros(2, spec.height, spec.width)
            flow[0, y_lo:y_hi, x_lo:x_hi] = -dx
            flow[1, y_lo:y_hi, x_lo:x_hi] = -dy
            flows.append(FlowMap(flow))
    return frames, flows


def synth_sequence(spec: SynthSpec) -> SequenceSource:
    """Deterministic synthetic clip with exact ground-truth flow."""
    rng = np.random.default_rng(spec.seed)
    if spec.generator == "global_pan":
        frames, flows = _gen_global_pan(spec, rng)
    elif spec.generator == "moving_square":
        frames, flows = _gen_moving_square(spec, rng)
    else:
        frames, flows = _gen_moving_texture(spec, rng)
    provenance = (
        f"synthetic:{spec.generator}(seed={spec.seed},n={spec.n_frames},"
        f"{spec.width}x{spec.height})"
    )
    return SequenceSource(frames=frames, provenance=provenance, gt_flows=flows)
