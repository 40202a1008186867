"""Synthetic moving-shape video clips with exact ground-truth motion.

Each clip shows one soft-edged shape (gaussian blob, rectangle, or bar)
translating along a bouncing random-walk trajectory inside a margin box
that keeps its support inside the frame. Frames are rendered by
evaluating the shape function analytically at continuous coordinates, so
the recorded inter-frame displacement is exact rather than estimated.

Also defines the on-disk dataset format (magic "TDV1", little-endian)
and the three epoch iteration modes used by the training variants.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, DataFormatError

KIND_BLOB = "gaussian_blob"
KIND_RECT = "rectangle"
KIND_BAR = "bar"
KINDS = (KIND_BLOB, KIND_RECT, KIND_BAR)

MODE_IID = "iid_frames"
MODE_SEQ = "sequence_preserving"
MODE_WINDOWED = "windowed"
MODES = (MODE_IID, MODE_SEQ, MODE_WINDOWED)

_MAGIC = b"TDV1"
_VERSION = 1


@dataclass
class ClipSpec:
    """Full recipe for one clip: shape parameters plus trajectory.

    speeds[k] is the commanded displacement magnitude (pixels) between
    frames k and k+1; turns[k] the heading increment (radians). The
    realized trajectory reflects off the margin box, so actual per-step
    displacements can differ from the command near walls; Clip records
    the realized motion.
    """

    n_frames: int
    height: int
    width: int
    kind: str
    amp: float
    sigma: float          # blob std dev (blob kind)
    half_u: float         # rect/bar half extents along rotated axes
    half_v: float
    edge: float           # soft-edge width (rect/bar)
    rot0: float
    rot_rate: float       # radians per frame
    start_y: float
    start_x: float
    heading0: float
    speeds: np.ndarray    # (n_frames - 1,)
    turns: np.ndarray     # (n_frames - 1,)


@dataclass
class Clip:
    frames: np.ndarray     # (n_frames, C, H, W) float64 in [0, 1]
    true_disp: np.ndarray  # (n_frames - 1, 2) float64, rows (dy, dx)


@dataclass
class WindowRef:
    """One admissible training window plus its provenance.

    index is the canonical position in clip-major enumeration order and
    is what corruption seeding keys on, so the noise a window receives
    never depends on shuffle order or batch assembly.
    """

    index: int
    clip_index: int
    start: int
    frames: np.ndarray  # (K, C, H, W)


def _margin(spec: ClipSpec) -> float:
    if spec.kind == KIND_BLOB:
        return 3.5 * spec.sigma
    # rotated box diagonal plus the soft-edge tail
    return math.hypot(spec.half_u, spec.half_v) + 3.0 * spec.edge


def _reflect(p: float, lo: float, hi: float, v: float) -> tuple[float, float]:
    # billiard bounce, looped in case one step overshoots the whole box
    p = p + v
    while p < lo or p > hi:
        if p < lo:
            p = 2.0 * lo - p
        else:
            p = 2.0 * hi - p
        v = -v
    return p, v


def trajectory(spec: ClipSpec) -> np.ndarray:
    """Realized center positions (n_frames, 2), rows (y, x)."""
    m = _margin(spec)
    lo_y, hi_y = m, spec.height - 1 - m
    lo_x, hi_x = m, spec.width - 1 - m
    if lo_y >= hi_y or lo_x >= hi_x:
        raise ConfigError(
            f"shape margin {m:.2f} leaves no room in a "
            f"{spec.height}x{spec.width} frame")
    pos = np.empty((spec.n_frames, 2))
    pos[0] = (spec.start_y, spec.start_x)
    heading = spec.heading0
    fy, fx = 1.0, 1.0  # bounce sign flips applied to the commanded heading
    for k in range(spec.n_frames - 1):
        heading += spec.turns[k]
        vy = spec.speeds[k] * math.sin(heading) * fy
        vx = spec.speeds[k] * math.cos(heading) * fx
        y, vy2 = _reflect(pos[k, 0], lo_y, hi_y, vy)
        x, vx2 = _reflect(pos[k, 1], lo_x, hi_x, vx)
        fy *= math.copysign(1.0, vy2 * vy) if vy != 0.0 else 1.0
        fx *= math.copysign(1.0, vx2 * vx) if vx != 0.0 else 1.0
        pos[k + 1] = (y, x)
    return pos


def _render_frame(spec: ClipSpec, cy: float, cx: float, rot: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(spec.height, dtype=np.float64),
                         np.arange(spec.width, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    if spec.kind == KIND_BLOB:
        img = spec.amp * np.exp(-(dy * dy + dx * dx) / (2.0 * spec.sigma ** 2))
    else:
        c, s = math.cos(rot), math.sin(rot)
        u = c * dy + s * dx
        v = -s * dy + c * dx
        su = 1.0 / (1.0 + np.exp(-(spec.half_u - np.abs(u)) / spec.edge))
        sv = 1.0 / (1.0 + np.exp(-(spec.half_v - np.abs(v)) / spec.edge))
        img = spec.amp * su * sv
    return np.clip(img, 0.0, 1.0)[None]  # (1, H, W)


def render_clip(spec: ClipSpec) -> Clip:
    """Render a spec into frames and record the realized displacements."""
    pos = trajectory(spec)
    frames = np.stack([
        _render_frame(spec, pos[k, 0], pos[k, 1], spec.rot0 + k * spec.rot_rate)
        for k in range(spec.n_frames)
    ])
    return Clip(frames=frames, true_disp=np.diff(pos, axis=0))


def sample_spec(g: np.random.Generator, n_frames: int, height: int,
                width: int, max_speed: float = 3.0) -> ClipSpec:
    """Draw one clip recipe. Per-clip base speed spans [0, max_speed] so
    the dataset contains both near-static and fast clips. Shape extents
    are kept in a narrow band and edges soft: footprints of similar area
    make the mean flow magnitude track displacement rather than shape
    size, and soft edges give the block matcher a smooth error surface.
    """
    kind = KINDS[int(g.integers(len(KINDS)))]
    base = g.uniform(0.0, max_speed)
    speeds = np.clip(base + 0.3 * g.standard_normal(n_frames - 1),
                     0.0, max_speed)
    return ClipSpec(
        n_frames=n_frames, height=height, width=width, kind=kind,
        amp=g.uniform(0.6, 1.0),
        sigma=g.uniform(1.2, 1.5),
        half_u=g.uniform(2.0, 2.6) if kind == KIND_RECT else g.uniform(0.9, 1.1),
        half_v=g.uniform(2.0, 2.6) if kind == KIND_RECT else g.uniform(2.8, 3.6),
        edge=0.8,
        rot0=g.uniform(0.0, math.tau),
        rot_rate=g.uniform(-0.03, 0.03),
        start_y=0.0, start_x=0.0,  # placed below once the margin is known
        heading0=g.uniform(0.0, math.tau),
        speeds=speeds,
        turns=0.4 * g.standard_normal(n_frames - 1),
    )


def _place_start(spec: ClipSpec, g: np.random.Generator) -> ClipSpec:
    m = _margin(spec)
    if m >= spec.height - 1 - m or m >= spec.width - 1 - m:
        raise ConfigError(
            f"shape margin {m:.2f} leaves no room in a "
            f"{spec.height}x{spec.width} frame")
    spec.start_y = g.uniform(m, spec.height - 1 - m)
    spec.start_x = g.uniform(m, spec.width - 1 - m)
    return spec


def generate_clips(n_clips: int, n_frames: int = 10, height: int = 16,
                   width: int = 16, seed: int = 0,
                   max_speed: float = 3.0) -> list[Clip]:
    if n_clips < 1:
        raise ConfigError(f"need n_clips >= 1, got {n_clips}")
    if n_frames < 1 or height < 8 or width < 8:
        raise ConfigError("need n_frames >= 1 and frames at least 8x8")
    clips = []
    for c in range(n_clips):
        g = rng.substream(seed, rng.GEN, c)
        spec = _place_start(sample_spec(g, n_frames, height, width, max_speed), g)
        clips.append(render_clip(spec))
    return clips


def generate_dataset(path: str, n_clips: int, n_frames: int = 10,
                     height: int = 16, width: int = 16, seed: int = 0,
                     max_speed: float = 3.0) -> list[Clip]:
    clips = generate_clips(n_clips, n_frames, height, width, seed, max_speed)
    save_dataset(path, clips)
    return clips


def save_dataset(path: str, clips: list[Clip]) -> None:
    """Write clips in the TDV1 container (see load_dataset for layout)."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(clips))]
    for clip in clips:
        n, c, h, w = clip.frames.shape
        parts.append(struct.pack("<IHHH", n, h, w, c))
        parts.append(np.ascontiguousarray(
            np.clip(clip.frames, 0.0, 1.0), dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(
            clip.true_disp, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as e:
        raise DataFormatError(f"cannot write dataset {path}: {e}") from e


def load_dataset(path: str) -> list[Clip]:
    """Read a TDV1 dataset file.

    Layout, little-endian, no compression: magic "TDV1", u32 version=1,
    u32 n_clips; then per clip u32 n_frames, u16 H, u16 W, u16 C,
    n_frames*C*H*W f32 pixels in [0, 1], (n_frames-1)*2 f32 ground-truth
    displacements in (dy, dx) order. Pixels are promoted to float64.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise DataFormatError(f"cannot read dataset {path}: {e}") from e
    if len(buf) < 12 or buf[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a TDV1 dataset file")
    version, n_clips = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off = 12
    clips = []
    for c in range(n_clips):
        if off + 10 > len(buf):
            raise DataFormatError(f"{path}: truncated at clip {c} header")
        n, h, w, ch = struct.unpack_from("<IHHH", buf, off)
        off += 10
        if n < 1 or h < 1 or w < 1 or ch < 1:
            raise DataFormatError(f"{path}: bad clip {c} dimensions")
        npix = n * ch * h * w
        ndisp = (n - 1) * 2
        need = 4 * (npix + ndisp)
        if off + need > len(buf):
            raise DataFormatError(f"{path}: truncated in clip {c} payload")
        pixels = np.frombuffer(buf, dtype="<f4", count=npix, offset=off)
        off += 4 * npix
        disp = np.frombuffer(buf, dtype="<f4", count=ndisp, offset=off)
        off += 4 * ndisp
        frames = pixels.astype(np.float64).reshape(n, ch, h, w)
        if not np.all(np.isfinite(frames)):
            raise DataFormatError(f"{path}: non-finite pixels in clip {c}")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise DataFormatError(f"{path}: clip {c} pixels outside [0, 1]")
        clips.append(Clip(frames=frames,
                          true_disp=disp.astype(np.float64).reshape(n - 1, 2)))
    if off != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return clips


def count_windows(clips: list[Clip], K: int) -> int:
    return sum(max(c.frames.shape[0] - K + 1, 0) for c in clips)


def iterate_windows(clips: list[Clip], K: int, mode: str, seed: int,
                    epoch: int) -> list[WindowRef]:
    """One epoch's visit order over the dataset.

    iid_frames: every frame exactly once, globally shuffled (K forced 1).
    sequence_preserving: clips shuffled, frames kept in clip order (K=1).
    windowed: every stride-1 window of K consecutive frames within each
    clip, globally shuffled; windows never cross clip boundaries.

    The same (seed, epoch) always yields the same order.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown iteration mode {mode!r}")
    if K < 1:
        raise ConfigError(f"need K >= 1, got {K}")
    g = rng.substream(seed, rng.DATA, epoch)
    refs: list[WindowRef] = []
    if mode == MODE_WINDOWED:
        shortest = min(c.frames.shape[0] for c in clips)
        if K > shortest:
            raise ConfigError(
                f"window K={K} exceeds shortest clip length {shortest}")
        idx = 0
        for ci, clip in enumerate(clips):
            for s in range(clip.frames.shape[0] - K + 1):
                refs.append(WindowRef(idx, ci, s, clip.frames[s:s + K]))
                idx += 1
        order = g.permutation(len(refs))
        return [refs[i] for i in order]
    # single-frame modes
    idx = 0
    per_clip: list[list[WindowRef]] = []
    for ci, clip in enumerate(clips):
        group = []
        for s in range(clip.frames.shape[0]):
            group.append(WindowRef(idx, ci, s, clip.frames[s:s + 1]))
            idx += 1
        per_clip.append(group)
        refs.extend(group)
    if mode == MODE_IID:
        order = g.permutation(len(refs))
        return [refs[i] for i in order]
    out: list[WindowRef] = []
    for ci in g.permutation(len(clips)):
        out.extend(per_clip[ci])
    return out
