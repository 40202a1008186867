"""Frame-pair proximity measures and the Laplacian edge weights w = phi(pi).

Two proximity paths:

  flow:        pi = mean squared magnitude of a block-matching optical
               flow field between the clean frames; w = 1/(pi + delta).
  divergence:  pi = symmetric finite difference, in diffusion time, of
               the corrupted inter-frame distance
                   d_s = ||x_s^i - x_s^j||^2 / (C*H*W)
               evaluated with the window's shared noise at s = t +- dt;
               w = 1/(eps_w + sqrt(|pi|)).

Under shared noise d_s = alpha_bar_s * ||x_i - x_j||^2 / (C*H*W), so the
divergence path has the closed form
    pi = ||x_i - x_j||^2 * (abar_hi - abar_lo) / ((hi - lo) * C*H*W),
nonpositive because alpha_bar decreases; the tests hold the
implementation to that form at 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, corrupt_independent
from .errors import ConfigError

KIND_FLOW = "flow"
KIND_DIV = "divergence"
KIND_UNIFORM = "uniform"

DEFAULT_BLOCK = 4
DEFAULT_RADIUS = 3
DEFAULT_DELTA = 1e-3
DEFAULT_EPS_W = 1e-3
DEFAULT_DT = 50


@dataclass
class FlowField:
    vectors: np.ndarray  # (H, W, 2), rows (dy, dx), constant per block
    method: str = "block_match"


@dataclass
class ProximityWeight:
    pi: float
    w: float
    kind: str


def _as_chw(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3:
        raise ConfigError(f"expected a (C, H, W) frame, got shape {frame.shape}")
    return frame


def estimate_flow(frame_i: np.ndarray, frame_j: np.ndarray,
                  block: int = DEFAULT_BLOCK,
                  radius: int = DEFAULT_RADIUS) -> FlowField:
    """Exhaustive per-block SSD search over integer displacements.

    For each block of frame_i the displacement (dy, dx) within the search
    radius minimizing the SSD against frame_j is selected; candidates that
    would read outside the frame are skipped. Ties break toward the
    smallest |d|^2, then lexicographic (dy, dx), so the zero vector wins
    on featureless blocks.
    """
    a = _as_chw(frame_i)
    b = _as_chw(frame_j)
    if a.shape != b.shape:
        raise ConfigError(f"frame shapes differ: {a.shape} vs {b.shape}")
    c, h, w = a.shape
    if block < 1 or h % block or w % block:
        raise ConfigError(f"block {block} must divide frame size {h}x{w}")
    if radius < 0:
        raise ConfigError(f"search radius must be nonnegative, got {radius}")
    cands = sorted(((dy, dx) for dy in range(-radius, radius + 1)
                    for dx in range(-radius, radius + 1)),
                   key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    # pad frame_j with +inf so out-of-frame candidate windows score inf
    # and drop out of the argmin; the zero candidate is always finite
    bp = np.full((c, h + 2 * radius, w + 2 * radius), np.inf)
    bp[:, radius:radius + h, radius:radius + w] = b
    nby, nbx = h // block, w // block
    ssd = np.empty((len(cands), nby, nbx))
    for k, (dy, dx) in enumerate(cands):
        diff = a - bp[:, radius + dy:radius + dy + h,
                      radius + dx:radius + dx + w]
        sq = diff * diff
        ssd[k] = sq.reshape(c, nby, block, nbx, block).sum(axis=(0, 2, 4))
    # argmin keeps the first (best-ranked) candidate on exact ties
    best = np.argmin(ssd, axis=0)
    carr = np.asarray(cands, dtype=np.float64)
    per_block = carr[best]  # (nby, nbx, 2)
    vectors = np.repeat(np.repeat(per_block, block, axis=0), block, axis=1)
    return FlowField(vectors=vectors)


def pi_flow(frame_i: np.ndarray, frame_j: np.ndarray,
            block: int = DEFAULT_BLOCK, radius: int = DEFAULT_RADIUS) -> float:
    """Mean squared flow magnitude: (1/(H*W)) * sum_p ||F(p)||^2."""
    field = estimate_flow(frame_i, frame_j, block, radius)
    return float(np.mean(np.sum(field.vectors ** 2, axis=2)))


def pi_divergence(frame_i: np.ndarray, frame_j: np.ndarray, t: int, dt: int,
                  eps: np.ndarray, sched: NoiseSchedule) -> float:
    """Finite-difference divergence rate of the corrupted pair distance.

    Evaluates d_s at s = t - dt and s = t + dt with the same eps, clamped
    to [0, T-1]; the difference is divided by the actual step gap, which
    is 2*dt away from the boundary and smaller one-sided near it.
    """
    a = _as_chw(frame_i)
    b = _as_chw(frame_j)
    if a.shape != b.shape:
        raise ConfigError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if dt <= 0 or dt >= sched.T:
        raise ConfigError(f"need 0 < dt < T={sched.T}, got {dt}")
    if not 0 <= t < sched.T:
        raise ConfigError(f"timestep {t} outside schedule range")
    lo = max(0, t - dt)
    hi = min(sched.T - 1, t + dt)
    if hi == lo:
        raise ConfigError("degenerate step gap; schedule too short for dt")
    nrm = a.size
    d = []
    for s in (lo, hi):
        diff = corrupt_independent(a, s, eps, sched) - corrupt_independent(b, s, eps, sched)
        d.append(float(np.sum(diff * diff)) / nrm)
    return (d[1] - d[0]) / (hi - lo)


def weight(pi: float, kind: str, delta: float = DEFAULT_DELTA,
           eps_w: float = DEFAULT_EPS_W) -> ProximityWeight:
    """Map proximity to a positive edge weight, decreasing in |pi|."""
    if kind == KIND_UNIFORM:
        return ProximityWeight(pi=0.0, w=1.0, kind=kind)
    if not np.isfinite(pi):
        raise ConfigError(f"non-finite proximity {pi!r}")
    if kind == KIND_FLOW:
        if delta <= 0.0:
            raise ConfigError(f"flow floor delta must be positive, got {delta}")
        if pi < 0.0:
            raise ConfigError(f"flow proximity must be nonnegative, got {pi}")
        return ProximityWeight(pi=float(pi), w=1.0 / (pi + delta), kind=kind)
    if kind == KIND_DIV:
        if eps_w <= 0.0:
            raise ConfigError(f"divergence floor eps_w must be positive, got {eps_w}")
        return ProximityWeight(pi=float(pi),
                               w=1.0 / (eps_w + np.sqrt(abs(pi))), kind=kind)
    raise ConfigError(f"unknown weight kind {kind!r}")
