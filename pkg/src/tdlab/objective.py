"""Composite training loss: denoising MSE + proximity-weighted temporal
regularizer (+ the dispersive-baseline term).

Conventions, fixed across the package:

  l_mse  = mean over frames of ||eps - f_i||^2 / (C*H*W)
  l_reg  = sum over the K-1 window edges of w_i * ||f_i - f_{i+1}||^2 / (C*H*W)
  l_disp = log( (1/(B(B-1))) * sum_{i != j} exp(-||h_i - h_j||^2 / temp) )
           on the first-hidden-layer activations of the batch
  l_total = l_mse + lam * l_reg + lam_disp * l_disp

Norms are per-element normalized (divide by C*H*W) so lam keeps its
meaning across resolutions; l_reg sums rather than averages over edges.
When a batch holds several windows the mse and reg components are means
over windows, while l_disp couples all frames in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .denoiser import DenoiserModel
from .diffusion import FrameWindow
from .errors import ConfigError, DivergenceError
from .proximity import ProximityWeight

VARIANT_BASELINE = "baseline"
VARIANT_SEQ = "seq_preserving"
VARIANT_ADJACENT = "adjacent_uniform"
VARIANT_DISPERSIVE = "dispersive"
VARIANT_FLOW = "flow"
VARIANT_DIV = "divergence"
VARIANTS = (VARIANT_BASELINE, VARIANT_SEQ, VARIANT_ADJACENT,
            VARIANT_DISPERSIVE, VARIANT_FLOW, VARIANT_DIV)

# variants whose windows carry K > 1 frames and a regularizer edge set
WINDOWED_VARIANTS = (VARIANT_ADJACENT, VARIANT_FLOW, VARIANT_DIV)

DEFAULT_LAMBDA = 0.1
DEFAULT_LAMBDA_DISP = 0.005
DEFAULT_DISP_TEMPERATURE = 0.5


@dataclass
class LossBreakdown:
    l_mse: float
    l_reg: float
    l_disp: float
    lam: float
    l_total: float


def _weight_values(weights: Sequence) -> np.ndarray:
    vals = np.array([w.w if isinstance(w, ProximityWeight) else float(w)
                     for w in weights], dtype=np.float64)
    if vals.size and vals.min() <= 0.0:
        raise ConfigError("edge weights must be positive")
    return vals


def loss_mse(predictions: np.ndarray, eps: np.ndarray) -> float:
    """Mean over window frames of the per-element squared error."""
    predictions = np.asarray(predictions, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if predictions.shape[1:] != eps.shape:
        raise ConfigError(
            f"prediction frames {predictions.shape[1:]} vs noise {eps.shape}")
    return float(np.mean((predictions - eps[None]) ** 2))


def loss_reg(predictions: np.ndarray, weights: Sequence) -> float:
    """Weighted Dirichlet energy over the window's adjacent-frame edges."""
    predictions = np.asarray(predictions, dtype=np.float64)
    k = predictions.shape[0]
    if k < 2:
        raise ConfigError("regularizer needs a window of K >= 2 frames")
    vals = _weight_values(weights)
    if vals.shape != (k - 1,):
        raise ConfigError(f"need {k - 1} edge weights, got {vals.shape}")
    diffs = predictions[:-1] - predictions[1:]
    per_edge = np.mean(diffs.reshape(k - 1, -1) ** 2, axis=1)
    return float(np.sum(vals * per_edge))


def loss_dispersive(hidden: np.ndarray,
                    temperature: float = DEFAULT_DISP_TEMPERATURE) -> float:
    """Log mean pairwise Gaussian affinity of the hidden activations."""
    hidden = np.asarray(hidden, dtype=np.float64)
    b = hidden.shape[0]
    if b < 2:
        raise ConfigError("dispersive loss needs a batch of at least 2")
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    sq = np.sum((hidden[:, None, :] - hidden[None, :, :]) ** 2, axis=2)
    e = np.exp(-sq / temperature)
    np.fill_diagonal(e, 0.0)
    s = float(e.sum())
    if s <= 0.0:
        raise DivergenceError("dispersive affinities underflowed to zero")
    return float(np.log(s / (b * (b - 1))))


def _dispersive_grad(hidden: np.ndarray, temperature: float
                     ) -> tuple[float, np.ndarray]:
    """Value and d l_disp / d hidden; row i gets
    (-4 / (temp * S)) * sum_j e_ij (h_i - h_j)."""
    b = hidden.shape[0]
    if b < 2:
        raise ConfigError("dispersive loss needs a batch of at least 2")
    sq = np.sum((hidden[:, None, :] - hidden[None, :, :]) ** 2, axis=2)
    e = np.exp(-sq / temperature)
    np.fill_diagonal(e, 0.0)
    s = float(e.sum())
    if s <= 0.0:
        raise DivergenceError("dispersive affinities underflowed to zero")
    row = e.sum(axis=1)
    grad = (-4.0 / (temperature * s)) * (row[:, None] * hidden - e @ hidden)
    return float(np.log(s / (b * (b - 1)))), grad


def loss_total(variant: str, windows, model: DenoiserModel,
               weights: Sequence[Sequence] | None = None,
               lam: float = DEFAULT_LAMBDA,
               lam_disp: float = DEFAULT_LAMBDA_DISP,
               disp_temperature: float = DEFAULT_DISP_TEMPERATURE,
               ) -> tuple[LossBreakdown, np.ndarray]:
    """Composite loss and its exact parameter gradient for one batch.

    windows: a corrupted FrameWindow or a list of them; mse/reg terms are
    averaged over windows. weights: per window, the K-1 edge weights
    (required for the windowed variants, ignored otherwise).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if isinstance(windows, FrameWindow):
        windows = [windows]
    if not windows:
        raise ConfigError("empty batch")
    for w in windows:
        if w.noisy is None or w.eps is None or w.tau is None:
            raise ConfigError("windows must be corrupted before loss evaluation")
    reg_active = variant in WINDOWED_VARIANTS
    if reg_active:
        if weights is None or len(weights) != len(windows):
            raise ConfigError("windowed variants need per-window edge weights")
        wvals = [_weight_values(w) for w in weights]
        for win, wv in zip(windows, wvals):
            if wv.shape != (win.frames.shape[0] - 1,):
                raise ConfigError("edge weight count must be K - 1")

    sizes = [w.frames.shape[0] for w in windows]
    x = np.concatenate([w.noisy for w in windows])
    t = np.concatenate([np.full(k, w.tau, dtype=np.float64)
                        for w, k in zip(windows, sizes)])
    target = np.concatenate([np.broadcast_to(w.eps, w.noisy.shape)
                             for w in windows])
    cache, out = model.forward(x, t)

    n_win = len(windows)
    d = out[0].size
    flat_out = out.reshape(out.shape[0], d)
    flat_tgt = target.reshape(out.shape[0], d)
    resid = flat_out - flat_tgt

    # mse: mean over windows of (mean over the window's frames)
    mse_terms = []
    dout = np.zeros_like(flat_out)
    off = 0
    for k in sizes:
        r = resid[off:off + k]
        mse_terms.append(float(np.mean(r * r)))
        dout[off:off + k] += (2.0 / (n_win * k * d)) * r
        off += k
    l_mse = float(np.mean(mse_terms))

    l_reg = 0.0
    if reg_active:
        reg_terms = []
        off = 0
        for k, wv in zip(sizes, wvals):
            p = flat_out[off:off + k]
            diffs = p[:-1] - p[1:]
            per_edge = np.mean(diffs * diffs, axis=1)
            reg_terms.append(float(np.sum(wv * per_edge)))
            coeff = (lam * 2.0 / (n_win * d)) * wv[:, None]
            dout[off:off + k - 1] += coeff * diffs
            dout[off + 1:off + k] -= coeff * diffs
            off += k
        l_reg = float(np.mean(reg_terms))

    l_disp = 0.0
    dh1 = None
    if variant == VARIANT_DISPERSIVE:
        l_disp, gh = _dispersive_grad(cache["h1"], disp_temperature)
        dh1 = lam_disp * gh

    grad = model.backward(cache, dout, dh1_extra=dh1)
    l_total = l_mse + lam * l_reg + lam_disp * l_disp
    if not np.isfinite(l_total):
        raise DivergenceError(f"non-finite loss (mse={l_mse}, reg={l_reg}, "
                              f"disp={l_disp})")
    return LossBreakdown(l_mse=l_mse, l_reg=l_reg, l_disp=l_disp, lam=lam,
                         l_total=l_total), grad
