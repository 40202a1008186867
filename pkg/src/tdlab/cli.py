"""Command-line entry point.

Subcommands: gen-data, train, sample, evaluate, analyze, compare.
Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from . import harness, synthgen
from .errors import (AnalysisError, ConfigError, DataFormatError,
                     DivergenceError)

ANALYZE_COLUMNS = ("step", "param_travel", "grad_norm", "grad_variance",
                   "e_s", "e_g", "lambda2", "bound_rhs", "mean_d_ij",
                   "bound_holds", "pairwise_holds")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tdlab",
        description="Desk-scale diffusion training laboratory with "
                    "temporal-proximity regularization.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic video dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-clips", type=int, required=True)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-speed", type=float, default=3.0)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", help="flat key = value config file")
    for f in fields(harness.RunConfig):
        t.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                       default=None, metavar="V")

    s = sub.add_parser("sample", help="DDIM-sample from a checkpoint's EMA")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--beta-start", type=float, default=1e-4)
    s.add_argument("--beta-end", type=float, default=0.02)

    e = sub.add_parser("evaluate", help="desk-FID and diversity of a sample file")
    e.add_argument("--samples", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--extractor-seed", type=int, default=7)

    a = sub.add_parser("analyze", help="probe-window dynamics over a run's "
                                       "checkpoints")
    a.add_argument("--run-dir", required=True)
    a.add_argument("--data", default=None,
                   help="override the dataset recorded in the run config")
    a.add_argument("--out", default=None, help="write CSV here instead of stdout")

    c = sub.add_parser("compare", help="compare finished runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--target", type=float, default=None,
                   help="steps-to-target threshold on val desk-FID "
                        "(default: best baseline value)")
    c.add_argument("--out", default=None, help="also write the table here")
    return ap


def _cmd_gen_data(args) -> int:
    clips = synthgen.generate_dataset(
        args.out, n_clips=args.n_clips, n_frames=args.frames,
        height=args.height, width=args.width, seed=args.seed,
        max_speed=args.max_speed)
    n_frames = sum(c.frames.shape[0] for c in clips)
    print(f"wrote {len(clips)} clips ({n_frames} frames) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name)
                 for f in fields(harness.RunConfig)}
    cfg = harness.make_config(file=args.config, overrides=overrides)
    record = harness.train(cfg)
    print(f"run complete: variant={cfg.variant} seed={cfg.seed} "
          f"hash={record.config_hash}")
    print(f"metrics: {record.metrics_path}")
    print(f"checkpoints: {len(record.checkpoint_paths)} under {record.out_dir}")
    return 0


def _cmd_sample(args) -> int:
    x = harness.sample_to_file(args.checkpoint, args.n, args.seed, args.out,
                               steps=args.steps, T=args.T,
                               beta_start=args.beta_start,
                               beta_end=args.beta_end)
    print(f"wrote {x.shape[0]} samples to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    r = harness.evaluate_files(args.samples, args.reference,
                               extractor_seed=args.extractor_seed)
    print(f"fid={r['fid']:.6g} diversity={r['diversity']:.6g} "
          f"n_samples={r['n_samples']} n_reference={r['n_reference']}")
    return 0


def _cmd_analyze(args) -> int:
    rows = harness.analyze_run(args.run_dir, data=args.data)
    lines = [",".join(ANALYZE_COLUMNS)]
    for row in rows:
        cells = []
        for col in ANALYZE_COLUMNS:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, bool):
                cells.append("1" if v else "0")
            elif col == "step":
                cells.append(str(int(v)))
            else:
                cells.append(f"{float(v):.12g}")
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(rows)} analysis rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_compare(args) -> int:
    report = harness.compare_runs(args.runs, target=args.target)
    text = harness.render_comparison(report)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "analyze": _cmd_analyze,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, AnalysisError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
