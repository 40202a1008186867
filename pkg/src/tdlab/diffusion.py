"""Forward diffusion process and deterministic DDIM sampling.

Implements the tabulated linear-beta noise schedule, the closed-form
forward corruption

    x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps,

its shared-noise window variant (a single (tau, eps) pair injected into
every frame of a window of consecutive frames), and the eta = 0 DDIM
reverse trajectory. Everything here is a pure function of its inputs in
double precision; all randomness enters through explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Tabulated forward-process coefficients.

    beta[t] is the per-step noise rate and alpha_bar[t] the running
    product prod_{s<=t} (1 - beta[s]); alpha_bar is strictly decreasing
    with alpha_bar[0] > alpha_bar[T-1] > 0.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray


@dataclass
class FrameWindow:
    """K consecutive frames plus the shared corruption applied to them.

    All noisy frames in one window are produced with the identical
    (tau, eps) pair, so differences between them depend only on the clean
    content: noisy[i] - noisy[j] = sqrt(abar_tau) * (frames[i] - frames[j]).
    """

    frames: np.ndarray                 # (K, C, H, W) clean, float
    tau: int | None = None
    eps: np.ndarray | None = None      # (C, H, W) standard normal field
    noisy: np.ndarray | None = None    # (K, C, H, W)


def build_schedule(T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule: beta[t] interpolates beta_start..beta_end.

    alpha_bar is computed in one cumulative-product sweep over
    (1 - beta[t]).
    """
    if int(T) != T or T < 2:
        raise ConfigError(f"schedule needs an integer T >= 2, got {T!r}")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise ConfigError("beta bounds must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    t = np.arange(T, dtype=np.float64)
    beta = beta_start + t * (beta_end - beta_start) / (T - 1)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def corrupt_independent(frame: np.ndarray, t: int, eps: np.ndarray,
                        sched: NoiseSchedule) -> np.ndarray:
    """Forward-corrupt one frame at step t with the given noise field."""
    frame = np.asarray(frame, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if frame.shape != eps.shape:
        raise ConfigError(
            f"noise shape {eps.shape} does not match frame shape {frame.shape}")
    if not 0 <= t < sched.T:
        raise ConfigError(f"timestep {t} outside schedule range [0, {sched.T})")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * frame + np.sqrt(1.0 - ab) * eps


def corrupt_window(window: FrameWindow, sched: NoiseSchedule,
                   rng_seed: int | tuple[int, ...]) -> FrameWindow:
    """Corrupt every frame of a window with one shared (tau, eps) pair.

    tau is drawn uniformly from {0..T-1} and eps elementwise standard
    normal, both from the substream keyed by rng_seed; the same seed always
    reproduces the same (tau, eps, noisy) triple.
    """
    if window.frames.ndim != 4 or window.frames.shape[0] < 1:
        raise ConfigError("window.frames must be a nonempty (K, C, H, W) array")
    key = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    g = rng.substream(*key, rng.CORRUPT)
    tau = int(g.integers(sched.T))
    eps = g.standard_normal(window.frames.shape[1:])
    noisy = np.stack([corrupt_independent(f, tau, eps, sched)
                      for f in window.frames])
    return replace(window, tau=tau, eps=eps, noisy=noisy)


def ddim_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    """Descending timestep sequence for a uniform-stride DDIM trajectory."""
    if int(steps) != steps or steps < 1:
        raise ConfigError(f"sampling needs an integer steps >= 1, got {steps!r}")
    steps = int(steps)
    if steps > sched.T:
        raise ConfigError(f"steps {steps} exceeds schedule length {sched.T}")
    if sched.T % steps != 0:
        raise ConfigError(
            f"steps {steps} must stride the schedule uniformly (T={sched.T})")
    stride = sched.T // steps
    return [sched.T - 1 - k * stride for k in range(steps)]


def ddim_sample(model, sched: NoiseSchedule, steps: int = 100,
                rng_seed: int | tuple[int, ...] = 0, n: int = 1,
                x0_range: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling from pure noise.

    At each visited step t the model's noise prediction gives the clean
    estimate x0 = (x - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t), and the
    state is re-noised to the next (smaller) step. The final update uses
    abar = 1, i.e. returns the last x0 estimate. Identical (seed, model,
    steps) always produces identical samples.

    x0_range clips the clean estimate to the data domain before
    re-noising (the noise direction is re-derived from the clipped
    estimate). Without it, 1/sqrt(abar) at early steps amplifies small
    prediction errors by orders of magnitude and samples explode; the
    clip is exact for on-domain data, so a perfect predictor still
    inverts the corruption. Pass None for the unclipped trajectory.

    `model` is anything with a predict(x_batch, t) -> eps_hat method.
    """
    ts = ddim_timesteps(sched, steps)
    shape = model.arch.frame_shape
    key = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    g = rng.substream(*key, rng.SAMPLE)
    x = g.standard_normal((n, *shape))
    for k, t in enumerate(ts):
        eps_hat = model.predict(x, t)
        ab = sched.alpha_bar[t]
        x0 = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        if x0_range is not None:
            x0 = np.clip(x0, x0_range[0], x0_range[1])
            eps_hat = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        ab_next = sched.alpha_bar[ts[k + 1]] if k + 1 < len(ts) else 1.0
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat
    return x
