"""Small fully-connected epsilon predictor with exact reverse-mode math.

Architecture, fixed up to layer widths:

    flatten(frame) ++ sinusoidal_embedding(t)
        -> affine -> silu -> affine -> silu -> affine -> reshape(frame)

The network is evaluated and differentiated with closed-form numpy
expressions rather than a general tape: this file owns the forward pass,
the batched backward pass, per-sample gradients, and full d x P Jacobian
extraction (the latter two via the same einsum path, so they agree by
construction). All math is float64.

Parameter layout in the flat vector: W1, b1, W2, b2, W3, b3, each in
C-order. Presets: "base" (hidden 128/128, embedding 32) for training,
"tiny" (hidden 8/8, embedding 16, under 5k parameters) for Jacobian
studies.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, DataFormatError, DivergenceError

PRESETS = {
    "base": dict(hidden=(128, 128), emb_dim=32),
    "tiny": dict(hidden=(8, 8), emb_dim=16),
}

# refuse full-Jacobian extraction above this d * P size
JACOBIAN_BUDGET = 2_000_000

_CKPT_MAGIC = b"TDCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class MlpArch:
    channels: int
    height: int
    width: int
    hidden: tuple[int, int]
    emb_dim: int

    def __post_init__(self):
        if self.emb_dim < 2 or self.emb_dim % 2 != 0:
            raise ConfigError(f"emb_dim must be even and >= 2, got {self.emb_dim}")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError(f"hidden must be two positive widths, got {self.hidden}")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("frame dimensions must be positive")

    @property
    def d(self) -> int:
        return self.channels * self.height * self.width

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def in_dim(self) -> int:
        return self.d + self.emb_dim

    @property
    def param_count(self) -> int:
        h1, h2 = self.hidden
        return ((self.in_dim + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * self.d)

    def descriptor(self) -> str:
        return (f"mlp1;c={self.channels};h={self.height};w={self.width};"
                f"hidden={self.hidden[0]},{self.hidden[1]};emb={self.emb_dim}")


def arch_from_descriptor(desc: str) -> MlpArch:
    try:
        parts = dict(p.split("=", 1) for p in desc.split(";")[1:])
        if not desc.startswith("mlp1;"):
            raise ValueError("unknown family")
        hid = tuple(int(v) for v in parts["hidden"].split(","))
        return MlpArch(channels=int(parts["c"]), height=int(parts["h"]),
                       width=int(parts["w"]), hidden=(hid[0], hid[1]),
                       emb_dim=int(parts["emb"]))
    except (KeyError, ValueError, IndexError) as e:
        raise DataFormatError(f"bad architecture descriptor {desc!r}: {e}") from e


def make_arch(preset: str, channels: int = 1, height: int = 16,
              width: int = 16) -> MlpArch:
    if preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}")
    p = PRESETS[preset]
    return MlpArch(channels, height, width, tuple(p["hidden"]), p["emb_dim"])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _dsilu(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def time_embedding(t, emb_dim: int) -> np.ndarray:
    """Sinusoidal embedding of (integer) timesteps; t scalar or (N,)."""
    half = emb_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if np.isscalar(t) or np.ndim(t) == 0 else emb


class DenoiserModel:
    """Flat parameter vector plus architecture; all methods are pure."""

    def __init__(self, arch: MlpArch, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.param_count,):
            raise ConfigError(
                f"parameter vector has shape {params.shape}, "
                f"architecture needs ({arch.param_count},)")
        self.arch = arch
        self.params = params

    def unpack(self, params: np.ndarray | None = None):
        """Views (W1, b1, W2, b2, W3, b3) into the flat vector."""
        p = self.params if params is None else params
        a = self.arch
        h1, h2 = a.hidden
        shapes = [(a.in_dim, h1), (h1,), (h1, h2), (h2,), (h2, a.d), (a.d,)]
        out, off = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(p[off:off + n].reshape(s))
            off += n
        return out

    def _embed_inputs(self, x: np.ndarray, t) -> np.ndarray:
        a = self.arch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != a.frame_shape:
            raise ConfigError(f"input shape {x.shape[1:]} does not match "
                              f"model frame shape {a.frame_shape}")
        n = x.shape[0]
        tv = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (n,))
        emb = time_embedding(tv, a.emb_dim)
        return np.concatenate([x.reshape(n, a.d), emb], axis=1)

    def forward(self, x: np.ndarray, t) -> tuple[dict, np.ndarray]:
        """Returns (cache, out) with out shaped (N, C, H, W)."""
        W1, b1, W2, b2, W3, b3 = self.unpack()
        z0 = self._embed_inputs(x, t)
        a1 = z0 @ W1 + b1
        h1 = _silu(a1)
        a2 = h1 @ W2 + b2
        h2 = _silu(a2)
        out = h2 @ W3 + b3
        if not np.all(np.isfinite(out)):
            raise DivergenceError("non-finite activations in forward pass")
        cache = dict(z0=z0, a1=a1, h1=h1, a2=a2, h2=h2)
        return cache, out.reshape(-1, *self.arch.frame_shape)

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        return self.forward(x, t)[1]

    def backward(self, cache: dict, dout: np.ndarray,
                 dh1_extra: np.ndarray | None = None) -> np.ndarray:
        """Gradient of sum_n <dout_n, out_n> (+ sum_n <dh1_extra_n, h1_n>)
        with respect to the flat parameters."""
        W1, b1, W2, b2, W3, b3 = self.unpack()
        dout = dout.reshape(dout.shape[0], self.arch.d)
        dh2 = dout @ W3.T
        gW3 = cache["h2"].T @ dout
        gb3 = dout.sum(axis=0)
        da2 = dh2 * _dsilu(cache["a2"])
        gW2 = cache["h1"].T @ da2
        gb2 = da2.sum(axis=0)
        dh1 = da2 @ W2.T
        if dh1_extra is not None:
            dh1 = dh1 + dh1_extra
        da1 = dh1 * _dsilu(cache["a1"])
        gW1 = cache["z0"].T @ da1
        gb1 = da1.sum(axis=0)
        return np.concatenate([g.ravel() for g in (gW1, gb1, gW2, gb2, gW3, gb3)])

    def _per_row_backward(self, cache: dict, dout: np.ndarray) -> np.ndarray:
        """Per-row gradients: row n gets the gradient of <dout_n, out_n>.
        Returns (N, P). Shared path for per-sample grads and Jacobians."""
        W1, b1, W2, b2, W3, b3 = self.unpack()
        n = dout.shape[0]
        dout = dout.reshape(n, self.arch.d)
        dh2 = dout @ W3.T
        gW3 = np.einsum("nk,nj->nkj", cache["h2"], dout)
        da2 = dh2 * _dsilu(cache["a2"])
        gW2 = np.einsum("nk,nj->nkj", cache["h1"], da2)
        dh1 = da2 @ W2.T
        da1 = dh1 * _dsilu(cache["a1"])
        gW1 = np.einsum("nk,nj->nkj", cache["z0"], da1)
        return np.concatenate(
            [gW1.reshape(n, -1), da1, gW2.reshape(n, -1), da2,
             gW3.reshape(n, -1), dout], axis=1)

    def per_sample_grads(self, cache: dict, dout: np.ndarray) -> np.ndarray:
        return self._per_row_backward(cache, dout)

    def jacobian(self, x: np.ndarray, t) -> np.ndarray:
        """Exact d x P Jacobian of the output at one input, computed as d
        reverse passes with identity cotangents."""
        a = self.arch
        if a.d * a.param_count > JACOBIAN_BUDGET:
            raise ConfigError(
                f"Jacobian size d*P = {a.d * a.param_count} exceeds the "
                f"budget {JACOBIAN_BUDGET}; use the tiny preset")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] != 1:
            raise ConfigError("jacobian takes a single frame")
        cache, _ = self.forward(x, t)
        rep = {k: np.repeat(v, a.d, axis=0) for k, v in cache.items()}
        return self._per_row_backward(rep, np.eye(a.d))


@dataclass
class GradientBundle:
    """Per-sample gradient data for one corrupted window or batch."""

    per_sample_grads: np.ndarray          # (N, P)
    mean_grad: np.ndarray                 # (P,)
    outputs: np.ndarray                   # (N, C, H, W)
    losses: np.ndarray                    # (N,)
    jacobians: np.ndarray | None = None   # (N, d, P)

    @property
    def grad_variance(self) -> float:
        dev = self.per_sample_grads - self.mean_grad
        return float(np.mean(np.sum(dev * dev, axis=1)))


def init_params(arch: MlpArch, seed: int | tuple[int, ...]) -> np.ndarray:
    """Uniform fan-in initialization, variance-preserving through SiLU.

    Hidden weights from U(-3/sqrt(fan_in), 3/sqrt(fan_in)): the variance
    gain of 3 cancels SiLU's ~0.58x std shrinkage, so activations keep
    unit scale at depth and plain SGD gets usable gradients from step one.
    The output layer uses U(-1/sqrt(fan_in), ..) so initial predictions
    stay modest; biases start at zero.
    """
    key = seed if isinstance(seed, tuple) else (seed,)
    g = rng.substream(*key, rng.INIT)
    h1, h2 = arch.hidden
    chunks = []
    for fan_in, fan_out, gain in (
        (arch.in_dim, h1, 3.0),
        (h1, h2, 3.0),
        (h2, arch.d, 1.0),
    ):
        bound = gain / math.sqrt(fan_in)
        chunks.append(g.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def per_sample_gradients(model: DenoiserModel, noisy: np.ndarray, t,
                         eps: np.ndarray, loss_scale: float = 1.0,
                         with_jacobians: bool = False) -> GradientBundle:
    """Per-sample gradients of l_n = loss_scale * ||eps - f_n||^2.

    The default matches the squared-error training term; loss_scale=0.5
    gives the gradient J_n^T (f_n - eps) whose pairwise difference obeys
    the first-order decomposition with unit constants (used by analysis).
    eps may be one shared field (C, H, W) or per-sample (N, C, H, W).
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.ndim == 3:
        noisy = noisy[None]
    n = noisy.shape[0]
    eps = np.asarray(eps, dtype=np.float64)
    eps_b = np.broadcast_to(eps, noisy.shape)
    cache, out = model.forward(noisy, t)
    resid = (out - eps_b).reshape(n, -1)
    losses = loss_scale * np.sum(resid * resid, axis=1)
    grads = model.per_sample_grads(cache, 2.0 * loss_scale * resid)
    jac = None
    if with_jacobians:
        tv = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        jac = np.stack([model.jacobian(noisy[i], tv[i]) for i in range(n)])
    return GradientBundle(per_sample_grads=grads,
                          mean_grad=grads.mean(axis=0),
                          outputs=out, losses=losses, jacobians=jac)


def save_checkpoint(path: str, model: DenoiserModel, ema_params: np.ndarray,
                    step: int) -> None:
    """TDCK container: magic, u32 version, u64 P, length-prefixed arch
    descriptor, P f64 params, P f64 EMA params, u64 step."""
    desc = model.arch.descriptor().encode()
    p = model.arch.param_count
    if ema_params.shape != (p,):
        raise ConfigError("EMA vector shape does not match parameter count")
    blob = b"".join([
        _CKPT_MAGIC,
        struct.pack("<IQ", _CKPT_VERSION, p),
        struct.pack("<I", len(desc)), desc,
        np.ascontiguousarray(model.params, dtype="<f8").tobytes(),
        np.ascontiguousarray(ema_params, dtype="<f8").tobytes(),
        struct.pack("<Q", int(step)),
    ])
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as e:
        raise DataFormatError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> tuple[DenoiserModel, np.ndarray, int]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(buf) < 20 or buf[:4] != _CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a TDCK checkpoint")
    version, p = struct.unpack_from("<IQ", buf, 4)
    if version != _CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<I", buf, 16)
    off = 20
    if off + dlen + 16 * p + 8 > len(buf):
        raise DataFormatError(f"{path}: truncated checkpoint")
    arch = arch_from_descriptor(buf[off:off + dlen].decode())
    off += dlen
    if arch.param_count != p:
        raise DataFormatError(
            f"{path}: descriptor implies {arch.param_count} params, header says {p}")
    params = np.frombuffer(buf, dtype="<f8", count=p, offset=off).copy()
    off += 8 * p
    ema = np.frombuffer(buf, dtype="<f8", count=p, offset=off).copy()
    off += 8 * p
    (step,) = struct.unpack_from("<Q", buf, off)
    if off + 8 != len(buf):
        raise DataFormatError(f"{path}: trailing bytes after checkpoint")
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(ema))):
        raise DataFormatError(f"{path}: non-finite parameters")
    return DenoiserModel(arch, params), ema, int(step)
