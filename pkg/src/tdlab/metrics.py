"""Desk-scale generative-quality metrics.

A fixed randomly-initialized convolutional feature map (never trained,
fully determined by its seed) embeds frames into 64 dimensions; sample
quality is the Frechet distance between Gaussian fits of two embedded
sets, and diversity is the mean pairwise embedded distance over a seeded
pair subsample. Absolute values are only comparable between runs sharing
the extractor seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .errors import ConfigError, DivergenceError

FEATURE_DIM = 64
MIN_FID_SAMPLES = 500
MIN_DIVERSITY_SAMPLES = 100
DIVERSITY_PAIRS = 1000


def _conv_s2p1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1. x: (N, Cin, H, W)."""
    n, cin, h, wd = x.shape
    xp = np.zeros((n, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    return np.einsum("nchwij,ocij->nohw", win, w) + b[None, :, None, None]


class FeatureExtractor:
    """Two strided random conv layers with tanh, then a random projection
    to 64 features. Weights come only from the seed."""

    def __init__(self, seed: int, channels: int = 1, height: int = 16,
                 width: int = 16):
        if height % 4 or width % 4 or height < 8 or width < 8:
            raise ConfigError("extractor needs frame sides divisible by 4, >= 8")
        self.seed = int(seed)
        self.frame_shape = (channels, height, width)
        g = rng.substream(self.seed, rng.FEAT)
        self.w1 = g.standard_normal((8, channels, 3, 3)) / np.sqrt(9 * channels)
        self.b1 = g.standard_normal(8) * 0.1
        self.w2 = g.standard_normal((16, 8, 3, 3)) / np.sqrt(9 * 8)
        self.b2 = g.standard_normal(16) * 0.1
        flat = 16 * (height // 4) * (width // 4)
        self.proj = g.standard_normal((flat, FEATURE_DIM)) / np.sqrt(flat)

    def extract(self, samples: np.ndarray) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.frame_shape:
            raise ConfigError(f"expected (N, {self.frame_shape}) samples, "
                              f"got {x.shape}")
        h = np.tanh(_conv_s2p1(x - 0.5, self.w1, self.b1))
        h = np.tanh(_conv_s2p1(h, self.w2, self.b2))
        return h.reshape(x.shape[0], -1) @ self.proj


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def fit_gaussian(features: np.ndarray) -> GaussianFit:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ConfigError("need at least 2 feature rows")
    mean = f.mean(axis=0)
    dev = f - mean
    cov = dev.T @ dev / (f.shape[0] - 1)
    return GaussianFit(mean=mean, cov=(cov + cov.T) / 2.0, n=f.shape[0])


def frechet(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses sqrt(S_a), symmetrizes sqrt(S_a) S_b sqrt(S_a),
    and clips small negative eigenvalues to zero.
    """
    dmu = a.mean - b.mean
    va, ea = np.linalg.eigh(a.cov)
    ra = (ea * np.sqrt(np.clip(va, 0.0, None))) @ ea.T
    m = ra @ b.cov @ ra
    m = (m + m.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(m), 0.0, None)
    fid = float(dmu @ dmu + np.trace(a.cov) + np.trace(b.cov)
                - 2.0 * np.sum(np.sqrt(vals)))
    if not np.isfinite(fid):
        raise DivergenceError("degenerate covariance in Frechet distance")
    return fid


def desk_fid(samples_a: np.ndarray, samples_b: np.ndarray,
             extractor: FeatureExtractor) -> float:
    """Frechet feature distance between two sample sets (>= 500 each)."""
    for name, s in (("a", samples_a), ("b", samples_b)):
        if len(s) < MIN_FID_SAMPLES:
            raise ConfigError(
                f"set {name} has {len(s)} samples, need >= {MIN_FID_SAMPLES}")
    return frechet(fit_gaussian(extractor.extract(samples_a)),
                   fit_gaussian(extractor.extract(samples_b)))


def diversity(samples: np.ndarray, extractor: FeatureExtractor,
              n_pairs: int = DIVERSITY_PAIRS) -> float:
    """Mean pairwise feature distance over a seeded pair subsample."""
    if len(samples) < MIN_DIVERSITY_SAMPLES:
        raise ConfigError(f"need >= {MIN_DIVERSITY_SAMPLES} samples, "
                          f"got {len(samples)}")
    feats = extractor.extract(samples)
    n = feats.shape[0]
    g = rng.substream(extractor.seed, rng.PAIRS)
    i = g.integers(n, size=n_pairs)
    j = g.integers(n - 1, size=n_pairs)
    j = j + (j >= i)  # skip the diagonal without rejection sampling
    return float(np.mean(np.linalg.norm(feats[i] - feats[j], axis=1)))
