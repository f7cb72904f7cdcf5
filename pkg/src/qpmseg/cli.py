"""Command line entry point: synth / train / eval / ablate / gradcheck / overlay.

Configuration is plain `key = value` text ('#' comments). Command-line
`--set model.KEY=V` / `--set train.KEY=V` overrides win over config files,
and every run records its resolved settings in effective_config.txt.
Exit codes: 0 success, 1 runtime failure (NaN, I/O), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import __version__
from .data import (
    DataError,
    NormStats,
    load_dataset,
    parse_kv_text,
    save_dataset,
)
from .evaluate import (
    evaluate,
    predict_mask,
    run_fusion_matrix,
    run_leave_one_out,
    run_model_matrix,
    write_loo_plot_data,
    write_overlay,
)
from .model import ConfigError, ModelConfig, build_model, load_checkpoint
from .qts import QtsError
from .synth import synth_generate
from .tensor import ShapeError
from .train import TrainConfig, TrainError, train
from .verify import run_battery


def _split_overrides(pairs):
    model_kv, train_kv = {}, {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects NAMESPACE.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key.startswith("model."):
            model_kv[key[len("model."):]] = value
        elif key.startswith("train."):
            train_kv[key[len("train."):]] = value
        else:
            raise ConfigError(f"--set key must start with 'model.' or 'train.': {item!r}")
    return model_kv, train_kv


def _load_kv_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return parse_kv_text(p.read_text())
    except DataError as e:
        raise ConfigError(str(e)) from e


def resolve_configs(args):
    """File + --set overlay -> (ModelConfig, TrainConfig); overrides win."""
    model_over, train_over = _split_overrides(getattr(args, "set", None))
    model_kv = _load_kv_file(getattr(args, "model_config", None))
    model_kv.update(model_over)
    train_kv = _load_kv_file(getattr(args, "train_config", None))
    train_kv.update(train_over)
    return ModelConfig.from_kv(model_kv), TrainConfig.from_kv(train_kv)


def write_effective_config(out_dir, command, args, sections):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("func", "set") or value is None:
            continue
        lines.append(f"arg.{key} = {value}")
    for prefix, kv in sections.items():
        for key, value in kv.items():
            lines.append(f"{prefix}.{key} = {value}")
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n")


def _require_empty_or_force(out_dir, force):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force to proceed)")


def _load_norm_stats(checkpoint_dir):
    stats_path = Path(checkpoint_dir) / "norm_stats.txt"
    if not stats_path.is_file():
        raise DataError(f"checkpoint {checkpoint_dir} has no norm_stats.txt")
    return NormStats.load(stats_path)


# ---------------------------------------------------------------------------
# subcommands


def _parse_range(text, flag):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{flag} expects LO,HI, got {text!r}") from exc
    return lo, hi


def cmd_synth(args):
    if args.n <= 0:
        raise ConfigError(f"--n must be positive, got {args.n}")
    if args.size <= 0:
        raise ConfigError(f"--size must be positive, got {args.size}")
    phase_snr = math.inf if args.phase_snr is None else args.phase_snr
    kw = {}
    if args.visibility_range is not None:
        kw["visibility_range"] = _parse_range(args.visibility_range, "--visibility-range")
    if args.gain_range is not None:
        kw["gain_range"] = _parse_range(args.gain_range, "--gain-range")
    samples = synth_generate(args.seed, args.n, args.size, args.size,
                             confluence=args.confluence, phase_snr=phase_snr,
                             intensity_noise=args.intensity_noise,
                             illum_texture=args.illum_texture,
                             decoy_strength=args.decoy_strength, **kw)
    save_dataset(samples, args.out, args.split)
    write_effective_config(args.out, "synth", args, {})
    print(f"wrote {len(samples)} samples to {Path(args.out) / args.split}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg = resolve_configs(args)
    _require_empty_or_force(args.out, args.force)
    samples = load_dataset(args.data, "train")
    model = build_model(model_cfg, dtype=train_cfg.dtype)
    write_effective_config(args.out, "train", args,
                           {"model": model_cfg.to_kv(), "train": train_cfg.to_kv()})
    train(model, samples, train_cfg, out_dir=args.out, log=print)
    print(f"training done: {args.out}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    stats = _load_norm_stats(args.checkpoint)
    samples = load_dataset(args.data, args.split)
    report = evaluate(model, samples, stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "eval.csv")
    write_effective_config(args.out, "eval", args, {"model": model.cfg.to_kv()})
    print(f"mean dice {report.mean_dice:.4f} +/- {report.std_dice:.4f}  "
          f"mean iou {report.mean_iou:.4f} +/- {report.std_iou:.4f}")
    print(f"wrote {out / 'eval.csv'}")
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg = resolve_configs(args)
    _require_empty_or_force(args.out, args.force)
    train_samples = load_dataset(args.data, "train")
    test_samples = load_dataset(args.data, "test")
    write_effective_config(args.out, "ablate", args,
                           {"model": model_cfg.to_kv(), "train": train_cfg.to_kv()})
    runner = {"models": run_model_matrix, "fusion": run_fusion_matrix,
              "loo": run_leave_one_out}[args.mode]
    matrix = runner(train_samples, test_samples, model_cfg, train_cfg,
                    out_dir=args.out, log=print, jobs=args.jobs)
    out = Path(args.out)
    matrix.to_csv(out / "matrix.csv")
    if args.mode == "loo":
        write_loo_plot_data(matrix, out / "loo_plot.csv")
    print(f"wrote {out / 'matrix.csv'} ({len(matrix.rows)} variants, "
          f"train config {matrix.train_config_hash})")
    return 0


def cmd_gradcheck(args):
    ok, results = run_battery(primitive_tol=min(args.tol, 1e-6) if args.strict else args.tol,
                              composite_tol=args.tol, log=print)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{name},{kind},{err!r},{tol!r},{'pass' if p else 'fail'}"
                 for name, kind, err, tol, p in results]
        (out / "gradcheck.csv").write_text(
            "op,kind,max_rel_err,tol,status\n" + "\n".join(lines) + "\n")
        write_effective_config(args.out, "gradcheck", args, {})
    print("gradient battery:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_overlay(args):
    model = load_checkpoint(args.checkpoint)
    stats = _load_norm_stats(args.checkpoint)
    samples = load_dataset(args.data, args.split)
    out = Path(args.out)
    for s in samples:
        pred = predict_mask(model, s, stats)
        write_overlay(out, s, pred)
    write_effective_config(args.out, "overlay", args, {"model": model.cfg.to_kv()})
    print(f"wrote {len(samples)} overlays to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qpmseg",
        description="Multi-illumination QPM cell segmentation workbench.")
    parser.add_argument("--version", action="version",
                        version=f"qpmseg {__version__} (engine dtypes: f32 train / f64 verify)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ssQPM dataset split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--confluence", choices=("low", "med", "high"), default="med")
    p.add_argument("--phase-snr", type=float, default=None,
                   help="phase map signal-to-noise (default: noiseless)")
    p.add_argument("--intensity-noise", type=float, default=0.01)
    p.add_argument("--illum-texture", type=float, default=0.0,
                   help="smooth multiplicative illumination structure (angles only)")
    p.add_argument("--decoy-strength", type=float, default=0.0,
                   help="cell-shaped amplitude bumps absent from the mask (angles only)")
    p.add_argument("--visibility-range", metavar="LO,HI",
                   help="per-sample fringe visibility jitter")
    p.add_argument("--gain-range", metavar="LO,HI",
                   help="per-sample illumination gain jitter")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--set", action="append", metavar="NS.KEY=V",
                   help="override a config value, e.g. --set train.epochs=5")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate a variant matrix")
    p.add_argument("--mode", choices=("models", "fusion", "loo"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--set", action="append", metavar="NS.KEY=V")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification battery")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--strict", action="store_true",
                   help="hold primitives to min(tol, 1e-6)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overlay", help="render prediction/ground-truth overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainError, DataError, QtsError, ShapeError, FloatingPointError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
