"""Training harness: configuration, the SGD + EMA loop, variant dispatch,
checkpointing, CSV metrics, sampling, evaluation, and run comparison.

A run is fully determined by its RunConfig: dataset iteration order,
corruption draws, initialization, probe windows, and sampling noise are
all derived from config fields through fixed-key substreams, so repeating
a run reproduces every output byte (the wall_seconds CSV column is the
one exception).

Metrics CSV schema (exact column order, empty fields where a quantity is
not computed at that step):

  step, variant, seed, loss_mse, loss_reg, loss_disp, loss_total,
  grad_norm, grad_variance, e_s, e_g, lambda2, bound_rhs, mean_d_ij,
  param_travel, fid_train, fid_val, diversity, wall_seconds

The file starts with a "# config_hash=..." comment tying every row to
the run configuration.
"""

from __future__ import annotations

import glob
import hashlib
import os
import time
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import analysis, metrics, proximity, rng, synthgen
from .denoiser import (DenoiserModel, init_params, load_checkpoint, make_arch,
                       save_checkpoint)
from .diffusion import (FrameWindow, build_schedule, corrupt_independent,
                        corrupt_window, ddim_sample)
from .errors import ConfigError, DataFormatError, DivergenceError
from .objective import (VARIANT_ADJACENT, VARIANT_DIV, VARIANT_FLOW,
                        VARIANT_SEQ, VARIANTS, WINDOWED_VARIANTS, loss_total)

CSV_COLUMNS = ("step", "variant", "seed", "loss_mse", "loss_reg", "loss_disp",
               "loss_total", "grad_norm", "grad_variance", "e_s", "e_g",
               "lambda2", "bound_rhs", "mean_d_ij", "param_travel",
               "fid_train", "fid_val", "diversity", "wall_seconds")


@dataclass
class RunConfig:
    """One training run's full configuration; see the module docstring on
    determinism. Defaults follow the reference training protocol (lam,
    ema_decay, dt, batch sizes, lr, dispersive settings, sampling steps);
    desk-scale experiment configs in configs/ override the budget-bound
    fields (lr, steps, intervals, ema_decay)."""

    variant: str = "baseline"
    seed: int = 0
    data: str = ""
    val_data: str = ""
    out_dir: str = ""
    epochs: int = 1000000          # upper bound; max_steps is the real budget
    max_steps: int = 2000
    batch_size: int = 0            # 0 -> 128 windowed / 256 single-frame
    lr: float = 1e-4
    lam: float = 0.1
    lam_disp: float = 0.005
    disp_temperature: float = 0.5
    ema_decay: float = 0.9995
    K: int = 3
    dt: int = 50
    delta: float = 1e-3
    eps_w: float = 1e-3
    flow_block: int = 4
    flow_radius: int = 3
    preset: str = "base"
    hidden: str = ""               # "a,b" overrides the preset widths
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    optimizer: str = "sgd"
    checkpoint_interval: int = 500
    log_interval: int = 50
    evaluate: bool = True          # FID/diversity at checkpoints
    sample_count: int = 500
    sample_steps: int = 100
    extractor_seed: int = 7
    probe_count: int = 8
    probe_seed: int = 1234


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    out_dir: str
    metrics_path: str
    checkpoint_paths: list[str]
    epoch_seconds: list[float]


def _coerce(name: str, ftype, raw):
    if isinstance(raw, str):
        raw = raw.strip()
        try:
            if ftype is bool:
                low = raw.lower()
                if low in ("true", "1", "yes"):
                    return True
                if low in ("false", "0", "no"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            return ftype(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {name}: {e}") from e
    if ftype is bool:
        return bool(raw)
    return ftype(raw)


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment; blank lines ignored."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise DataFormatError(f"cannot read config {path}: {e}") from e
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def make_config(file: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Defaults, then config file entries, then explicit overrides."""
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field annotations are strings under future-annotations
    py = {"str": str, "int": int, "float": float, "bool": bool}
    ftypes = {k: py[v] if isinstance(v, str) else v for k, v in ftypes.items()}
    cfg = RunConfig()
    merged = {}
    if file:
        merged.update(parse_config_file(file))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, raw in merged.items():
        if key not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        cfg = replace(cfg, **{key: _coerce(key, ftypes[key], raw)})
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    blob = "\n".join(f"{f.name}={getattr(cfg, f.name)!r}"
                     for f in sorted(fields(RunConfig), key=lambda f: f.name))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def validate_config(cfg: RunConfig, for_training: bool = True) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    if for_training and not cfg.data:
        raise ConfigError("config needs a dataset path (data)")
    if for_training and not cfg.out_dir:
        raise ConfigError("config needs an output directory (out_dir)")
    if cfg.lr < 0 or not np.isfinite(cfg.lr):
        raise ConfigError(f"bad learning rate {cfg.lr}")
    if not 0.0 <= cfg.ema_decay <= 1.0:
        raise ConfigError(f"ema_decay must be in [0, 1], got {cfg.ema_decay}")
    if cfg.K < 1:
        raise ConfigError(f"need K >= 1, got {cfg.K}")
    if cfg.variant in WINDOWED_VARIANTS and cfg.K < 2:
        raise ConfigError("windowed variants need K >= 2")
    if cfg.max_steps < 0 or cfg.epochs < 1:
        raise ConfigError("bad step/epoch budget")
    if cfg.log_interval < 1 or cfg.checkpoint_interval < 1:
        raise ConfigError("intervals must be >= 1")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.hidden:
        _parse_hidden(cfg.hidden)


def _parse_hidden(spec: str) -> tuple[int, int]:
    try:
        widths = tuple(int(p) for p in spec.split(","))
    except ValueError as e:
        raise ConfigError(f"bad hidden widths {spec!r}: {e}") from e
    if len(widths) != 2 or min(widths) < 1:
        raise ConfigError(f"hidden must be two positive widths, got {spec!r}")
    return widths


def _arch_for(cfg: RunConfig, ch: int, h: int, w: int):
    arch = make_arch(cfg.preset, ch, h, w)
    if cfg.hidden:
        arch = replace(arch, hidden=_parse_hidden(cfg.hidden))
    return arch


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def _csv_row(values: dict) -> str:
    return ",".join(_fmt(values.get(c)) for c in CSV_COLUMNS) + "\n"


def read_metrics(path: str) -> tuple[str, list[dict]]:
    """Parse a metrics CSV back into (config_hash, row dicts). Numeric
    fields come back as floats, empty fields as None."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read metrics {path}: {e}") from e
    chash = ""
    rows = []
    header = None
    for line in lines:
        if line.startswith("#"):
            if "config_hash=" in line:
                chash = line.split("config_hash=", 1)[1].strip()
            continue
        if header is None:
            header = line.split(",")
            if tuple(header) != CSV_COLUMNS:
                raise DataFormatError(f"{path}: unexpected metrics schema")
            continue
        parts = line.split(",")
        row = {}
        for key, val in zip(header, parts):
            if val == "":
                row[key] = None
            elif key in ("variant",):
                row[key] = val
            elif key in ("step", "seed"):
                row[key] = int(val)
            else:
                row[key] = float(val)
        rows.append(row)
    return chash, rows


class _FlowWeightCache:
    """Lazily computed flow weights per adjacent clean-frame pair; pure
    function of the clips, so safe to share across epochs."""

    def __init__(self, clips, cfg: RunConfig):
        self.clips = clips
        self.cfg = cfg
        self.cache: dict[tuple[int, int], proximity.ProximityWeight] = {}

    def edge(self, clip_index: int, frame_index: int) -> proximity.ProximityWeight:
        key = (clip_index, frame_index)
        hit = self.cache.get(key)
        if hit is None:
            fr = self.clips[clip_index].frames
            pi = proximity.pi_flow(fr[frame_index], fr[frame_index + 1],
                                   self.cfg.flow_block, self.cfg.flow_radius)
            hit = proximity.weight(pi, proximity.KIND_FLOW, delta=self.cfg.delta)
            self.cache[key] = hit
        return hit


def window_weights(variant: str, ref: synthgen.WindowRef, win: FrameWindow,
                   cfg: RunConfig, sched, flow_cache) -> list:
    """Edge weights for one corrupted window under the given variant."""
    k = win.frames.shape[0]
    if variant == VARIANT_ADJACENT:
        return [proximity.weight(0.0, proximity.KIND_UNIFORM)] * (k - 1)
    if variant == VARIANT_FLOW:
        return [flow_cache.edge(ref.clip_index, ref.start + i)
                for i in range(k - 1)]
    if variant == VARIANT_DIV:
        out = []
        for i in range(k - 1):
            pi = proximity.pi_divergence(win.frames[i], win.frames[i + 1],
                                         win.tau, cfg.dt, win.eps, sched)
            out.append(proximity.weight(pi, proximity.KIND_DIV, eps_w=cfg.eps_w))
        return out
    raise ConfigError(f"variant {variant!r} has no window weights")


def build_probes(clips, cfg: RunConfig, sched, flow_cache=None
                 ) -> list[tuple[FrameWindow, list]]:
    """Fixed probe windows for training-dynamics analysis.

    Window choice and corruption depend only on (dataset, probe_seed, K,
    T), never on the run seed or variant, so probe-level quantities are
    comparable across runs. Weights follow the run's variant; runs
    without a regularizer use uniform weights on the probe graph.
    """
    k = max(cfg.K, 2)
    eligible = [(ci, s) for ci, c in enumerate(clips)
                for s in range(c.frames.shape[0] - k + 1)]
    if not eligible:
        raise ConfigError(f"no clip admits a probe window of K={k}")
    g = rng.substream(cfg.probe_seed, rng.PROBE)
    count = min(cfg.probe_count, len(eligible))
    chosen = sorted(g.choice(len(eligible), size=count, replace=False).tolist())
    probes = []
    for pi_idx, ei in enumerate(chosen):
        ci, s = eligible[ei]
        frames = clips[ci].frames[s:s + k]
        gg = rng.substream(cfg.probe_seed, rng.PROBE, pi_idx)
        tau = int(gg.integers(sched.T))
        eps = gg.standard_normal(frames.shape[1:])
        noisy = np.stack([corrupt_independent(f, tau, eps, sched)
                          for f in frames])
        win = FrameWindow(frames=frames, tau=tau, eps=eps, noisy=noisy)
        if cfg.variant in WINDOWED_VARIANTS:
            ref = synthgen.WindowRef(index=-1, clip_index=ci, start=s,
                                     frames=frames)
            wts = window_weights(cfg.variant, ref, win, cfg, sched, flow_cache)
        else:
            wts = [proximity.weight(0.0, proximity.KIND_UNIFORM)] * (k - 1)
        probes.append((win, wts))
    return probes


def _probe_row(model: DenoiserModel, probes, theta0: np.ndarray) -> dict:
    arch = model.arch
    use_jac = arch.d * arch.param_count <= 2_000_000
    reports = [analysis.analyze_window(model, win, wts, with_jacobians=use_jac)
               for win, wts in probes]
    row = {
        "grad_variance": float(np.mean([r.grad_variance for r in reports])),
        "e_s": float(np.mean([r.e_s for r in reports])),
        "lambda2": float(np.mean([r.lambda2 for r in reports])),
        "param_travel": float(np.linalg.norm(model.params - theta0)),
    }
    if use_jac:
        row["e_g"] = float(np.mean([r.e_g for r in reports]))
        row["bound_rhs"] = float(np.mean([r.bound_rhs for r in reports]))
        row["mean_d_ij"] = float(np.mean([np.mean(r.d_ij_norms)
                                          for r in reports]))
    return row


def _frames_of(clips) -> np.ndarray:
    return np.concatenate([c.frames for c in clips])


def _eval_row(arch, ema: np.ndarray, sched, cfg: RunConfig, extractor,
              train_frames, val_frames, step: int) -> dict:
    em = DenoiserModel(arch, ema.copy())
    samples = ddim_sample(em, sched, cfg.sample_steps,
                          rng_seed=(cfg.seed, step), n=cfg.sample_count)
    samples = np.clip(samples, 0.0, 1.0)
    row = {}
    if train_frames is not None and len(train_frames) >= metrics.MIN_FID_SAMPLES:
        row["fid_train"] = metrics.desk_fid(samples, train_frames, extractor)
    if val_frames is not None and len(val_frames) >= metrics.MIN_FID_SAMPLES:
        row["fid_val"] = metrics.desk_fid(samples, val_frames, extractor)
    row["diversity"] = metrics.diversity(samples, extractor)
    return row


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class _Adam:
    """Available for exploratory runs; the reference experiments use SGD."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


def train(cfg: RunConfig) -> RunRecord:
    validate_config(cfg)
    chash = config_hash(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w") as fh:
        fh.write(serialize_config(cfg))

    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    clips = synthgen.load_dataset(cfg.data)
    shapes = {c.frames.shape[1:] for c in clips}
    if len(shapes) != 1:
        raise ConfigError(f"dataset mixes frame shapes: {sorted(shapes)}")
    ch, h, w = shapes.pop()
    train_frames = _frames_of(clips)
    val_frames = _frames_of(synthgen.load_dataset(cfg.val_data)) \
        if cfg.val_data else None

    arch = _arch_for(cfg, ch, h, w)
    params = init_params(arch, cfg.seed)
    model = DenoiserModel(arch, params)
    ema = params.copy()
    theta0 = params.copy()
    extractor = metrics.FeatureExtractor(cfg.extractor_seed, ch, h, w) \
        if cfg.evaluate else None

    windowed = cfg.variant in WINDOWED_VARIANTS
    mode = synthgen.MODE_WINDOWED if windowed else (
        synthgen.MODE_SEQ if cfg.variant == VARIANT_SEQ else synthgen.MODE_IID)
    k = cfg.K if windowed else 1
    batch = cfg.batch_size or (128 if windowed else 256)
    n_windows = synthgen.count_windows(clips, k)
    if batch > n_windows:
        raise ConfigError(f"batch_size {batch} exceeds the {n_windows} "
                          f"available windows")
    flow_cache = _FlowWeightCache(clips, cfg) \
        if cfg.variant == VARIANT_FLOW else None
    probes = build_probes(clips, cfg, sched, flow_cache)

    opt = _Sgd(cfg.lr) if cfg.optimizer == "sgd" else _Adam(cfg.lr)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_paths: list[str] = []
    epoch_seconds: list[float] = []
    t0 = time.monotonic()

    def save_ckpt(step: int) -> None:
        path = os.path.join(cfg.out_dir, f"ckpt_{step:07d}.tdck")
        save_checkpoint(path, model, ema, step)
        ckpt_paths.append(path)

    def checkpoint_extras(step: int) -> dict:
        row = _probe_row(model, probes, theta0)
        if cfg.evaluate:
            row.update(_eval_row(arch, ema, sched, cfg, extractor,
                                 train_frames, val_frames, step))
        return row

    with open(metrics_path, "w") as mf:
        mf.write(f"# config_hash={chash}\n")
        mf.write(",".join(CSV_COLUMNS) + "\n")

        def emit(step: int, extra: dict) -> None:
            row = {"step": step, "variant": cfg.variant, "seed": cfg.seed,
                   "wall_seconds": round(time.monotonic() - t0, 3)}
            row.update(extra)
            mf.write(_csv_row(row))
            mf.flush()

        save_ckpt(0)
        emit(0, checkpoint_extras(0))

        step = 0
        acc = {"loss_mse": 0.0, "loss_reg": 0.0, "loss_disp": 0.0,
               "loss_total": 0.0, "grad_norm": 0.0, "n": 0}
        done = False
        for epoch in range(cfg.epochs):
            if done:
                break
            e0 = time.monotonic()
            refs = synthgen.iterate_windows(clips, k, mode, cfg.seed, epoch)
            for b0 in range(0, len(refs) - batch + 1, batch):
                batch_refs = refs[b0:b0 + batch]
                windows, weights = [], []
                for ref in batch_refs:
                    win = corrupt_window(FrameWindow(frames=ref.frames), sched,
                                         (cfg.seed, epoch, ref.index))
                    windows.append(win)
                    if windowed:
                        weights.append(window_weights(
                            cfg.variant, ref, win, cfg, sched, flow_cache))
                breakdown, grad = loss_total(
                    cfg.variant, windows, model,
                    weights=weights if windowed else None,
                    lam=cfg.lam, lam_disp=cfg.lam_disp,
                    disp_temperature=cfg.disp_temperature)
                opt.step(params, grad)
                if not np.all(np.isfinite(params)):
                    raise DivergenceError(
                        f"non-finite parameters at step {step + 1} "
                        f"(loss {breakdown.l_total:.6g})")
                ema *= cfg.ema_decay
                ema += (1.0 - cfg.ema_decay) * params
                step += 1
                acc["loss_mse"] += breakdown.l_mse
                acc["loss_reg"] += breakdown.l_reg
                acc["loss_disp"] += breakdown.l_disp
                acc["loss_total"] += breakdown.l_total
                acc["grad_norm"] += float(np.linalg.norm(grad))
                acc["n"] += 1

                at_log = step % cfg.log_interval == 0
                at_ckpt = step % cfg.checkpoint_interval == 0
                if at_log or at_ckpt:
                    extra = {}
                    if at_log and acc["n"]:
                        extra = {key: acc[key] / acc["n"] for key in
                                 ("loss_mse", "loss_reg", "loss_disp",
                                  "loss_total", "grad_norm")}
                        acc = dict.fromkeys(acc, 0.0) | {"n": 0}
                    if at_ckpt:
                        save_ckpt(step)
                        extra.update(checkpoint_extras(step))
                    emit(step, extra)
                if cfg.max_steps and step >= cfg.max_steps:
                    done = True
                    break
            epoch_seconds.append(time.monotonic() - e0)
        if step % cfg.checkpoint_interval != 0:
            save_ckpt(step)
            emit(step, checkpoint_extras(step))

    return RunRecord(config=cfg, config_hash=chash, out_dir=cfg.out_dir,
                     metrics_path=metrics_path, checkpoint_paths=ckpt_paths,
                     epoch_seconds=epoch_seconds)


def sample_to_file(checkpoint_path: str, n: int, seed: int, out_path: str,
                   steps: int = 100, T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> np.ndarray:
    """DDIM-sample n frames from a checkpoint's EMA parameters and write
    them as single-frame clips in the dataset format."""
    if n < 0:
        raise ConfigError(f"need n >= 0, got {n}")
    model, ema, _ = load_checkpoint(checkpoint_path)
    sched = build_schedule(T, beta_start, beta_end)
    em = DenoiserModel(model.arch, ema)
    x = ddim_sample(em, sched, steps, rng_seed=(seed,), n=n)
    x = np.clip(x, 0.0, 1.0)
    clips = [synthgen.Clip(frames=x[i:i + 1],
                           true_disp=np.zeros((0, 2)))
             for i in range(n)]
    synthgen.save_dataset(out_path, clips)
    return x


def evaluate_files(samples_path: str, reference_path: str,
                   extractor_seed: int = 7) -> dict:
    """desk-FID of a sample file against a reference file, plus sample
    diversity."""
    s = _frames_of(synthgen.load_dataset(samples_path))
    r = _frames_of(synthgen.load_dataset(reference_path))
    if s.shape[1:] != r.shape[1:]:
        raise ConfigError(f"frame shapes differ: {s.shape[1:]} vs {r.shape[1:]}")
    ext = metrics.FeatureExtractor(extractor_seed, *s.shape[1:])
    return {"fid": metrics.desk_fid(s, r, ext),
            "diversity": metrics.diversity(s, ext),
            "n_samples": len(s), "n_reference": len(r)}


def run_checkpoints(run_dir: str) -> list[tuple[int, str]]:
    paths = sorted(glob.glob(os.path.join(run_dir, "ckpt_*.tdck")))
    if not paths:
        raise DataFormatError(f"no checkpoints under {run_dir}")
    out = []
    for p in paths:
        stem = os.path.basename(p)[len("ckpt_"):-len(".tdck")]
        out.append((int(stem), p))
    return sorted(out)


def analyze_run(run_dir: str, data: str | None = None) -> list[dict]:
    """Recompute probe-window dynamics over a finished run's checkpoints."""
    cfg_path = os.path.join(run_dir, "config.cfg")
    cfg = make_config(file=cfg_path)
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    clips = synthgen.load_dataset(data or cfg.data)
    flow_cache = _FlowWeightCache(clips, cfg) \
        if cfg.variant == VARIANT_FLOW else None
    probes = build_probes(clips, cfg, sched, flow_cache)
    ckpts = []
    for step, path in run_checkpoints(run_dir):
        model, _, _ = load_checkpoint(path)
        ckpts.append((step, model))
    return analysis.track_dynamics(ckpts, probes)


@dataclass
class RunSummary:
    out_dir: str
    variant: str
    seed: int
    best_val_fid: float | None
    final_val_fid: float | None
    best_train_fid: float | None
    steps_to_target: int | None
    final_grad_variance: float | None
    final_param_travel: float | None
    final_diversity: float | None
    total_steps: int


def summarize_run(run_dir: str, target: float | None = None) -> RunSummary:
    cfg = make_config(file=os.path.join(run_dir, "config.cfg"))
    _, rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    if not rows:
        raise DataFormatError(f"{run_dir}: empty metrics file")

    def series(col):
        return [(r["step"], r[col]) for r in rows if r[col] is not None]

    val = series("fid_val")
    trn = series("fid_train")
    gv = series("grad_variance")
    pt = series("param_travel")
    dv = series("diversity")
    steps_to = None
    if target is not None:
        for s, v in val:
            if v <= target:
                steps_to = s
                break
    return RunSummary(
        out_dir=run_dir, variant=cfg.variant, seed=cfg.seed,
        best_val_fid=min((v for _, v in val), default=None),
        final_val_fid=val[-1][1] if val else None,
        best_train_fid=min((v for _, v in trn), default=None),
        steps_to_target=steps_to,
        final_grad_variance=gv[-1][1] if gv else None,
        final_param_travel=pt[-1][1] if pt else None,
        final_diversity=dv[-1][1] if dv else None,
        total_steps=rows[-1]["step"])


def compare_runs(run_dirs: Sequence[str], target: float | None = None) -> dict:
    """Cross-run comparison table. All runs must share the dataset and
    extractor seed; the steps-to-target threshold defaults to the best
    validation desk-FID reached by the baseline runs."""
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two runs")
    cfgs = [make_config(file=os.path.join(d, "config.cfg")) for d in run_dirs]
    datasets = {(c.data, c.val_data, c.extractor_seed) for c in cfgs}
    if len(datasets) != 1:
        raise ConfigError("runs use different datasets or extractor seeds; "
                          "their metric values are not comparable")
    if target is None:
        base_best = [summarize_run(d).best_val_fid
                     for d, c in zip(run_dirs, cfgs) if c.variant == "baseline"]
        base_best = [b for b in base_best if b is not None]
        if not base_best:
            raise ConfigError("no baseline run to define the target; "
                              "pass an explicit target")
        target = min(base_best)
    summaries = [summarize_run(d, target) for d in run_dirs]

    by_variant: dict[str, list[RunSummary]] = {}
    for s in summaries:
        by_variant.setdefault(s.variant, []).append(s)

    def _mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    variant_rows = {}
    for var, group in by_variant.items():
        variant_rows[var] = {
            "runs": len(group),
            "best_val_fid": _mean([s.best_val_fid for s in group]),
            "final_val_fid": _mean([s.final_val_fid for s in group]),
            "best_train_fid": _mean([s.best_train_fid for s in group]),
            "steps_to_target": _mean([s.steps_to_target for s in group]),
            "reached_target": sum(s.steps_to_target is not None for s in group),
            "final_grad_variance": _mean([s.final_grad_variance for s in group]),
            "final_param_travel": _mean([s.final_param_travel for s in group]),
            "final_diversity": _mean([s.final_diversity for s in group]),
        }
    speedup = {}
    base = variant_rows.get("baseline")
    if base and base["steps_to_target"]:
        for var, row in variant_rows.items():
            if row["steps_to_target"]:
                speedup[var] = base["steps_to_target"] / row["steps_to_target"]
    return {"target_val_fid": target, "runs": summaries,
            "variants": variant_rows, "speedup_vs_baseline": speedup}


def render_comparison(report: dict) -> str:
    cols = ("variant", "runs", "best_val_fid", "final_val_fid",
            "best_train_fid", "steps_to_target", "final_grad_variance",
            "final_param_travel", "speedup")
    lines = [f"target val desk-FID: {report['target_val_fid']:.6g}",
             "\t".join(cols)]
    for var, row in sorted(report["variants"].items()):
        sp = report["speedup_vs_baseline"].get(var)
        cells = [var, str(row["runs"])]
        for key in ("best_val_fid", "final_val_fid", "best_train_fid",
                    "steps_to_target", "final_grad_variance",
                    "final_param_travel"):
            v = row[key]
            cells.append("" if v is None else f"{v:.6g}")
        cells.append("" if sp is None else f"{sp:.3f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
