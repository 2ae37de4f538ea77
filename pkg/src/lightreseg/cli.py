"""Command-line entry point: ``lightreseg {train,eval,predict,params,synth,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 internal failure. Every failure prints one ``lightreseg: error:`` line on
stderr. ``LIGHTSEG_THREADS`` caps the BLAS worker threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import runconfig
from .checkpoint import checkpoint_extra, load_checkpoint
from .config import MULTIPLIERS, VARIANTS, ModelConfig
from .data import (SPLITS, ClassPalette, LabeledSample, encode_mask, image_to_array, load_palette,
                   load_split, pad_amounts, read_rgb, write_rgb, write_synthetic)
from .errors import CheckpointError, ConfigError, DataError, DimensionError
from .metrics import confusion, metrics, per_image_dice, wilcoxon_rank_sum
from .model import build, param_breakdown
from .training import BEST_NAME, predict_masks, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
CONFIG_NAME = "config.ini"
REFERENCE_VARIANT = "base_maa_trans3"


def _out(line: str = "") -> None:
    print(line, flush=True)


# -- shared plumbing -----------------------------------------------------------

def _load_config(args) -> "runconfig.configparser.ConfigParser":
    return runconfig.load(args.config, runconfig.parse_overrides(args.overrides))


def _dataset(root) -> tuple[ClassPalette, dict[str, list[LabeledSample]]]:
    palette = load_palette(root)
    return palette, load_split(root, SPLITS, palette)


def _resolve(cp, palette: ClassPalette, train: list[LabeledSample]) -> runconfig.Resolved:
    """Fill ``auto`` class count and training resolution from the dataset."""
    if not train:
        raise ConfigError("the dataset has no samples tagged 'train'")
    k = runconfig.num_classes(cp)
    if k is None:
        k = len(palette)
    elif k != len(palette):
        raise ConfigError(f"[model] num_classes = {k} but the dataset palette has {len(palette)} classes")
    size = runconfig.image_size(cp)
    if size is None:
        probe = runconfig.model_config(cp, k, (8, 8))
        h, w = train[0].extent
        t, l, b, r = pad_amounts(h, w, probe.input_pad_to)
        size = (h + t + b, w + l + r)
    return runconfig.Resolved(cp, runconfig.model_config(cp, k, size), runconfig.train_config(cp),
                              runconfig.dtype(cp))


def _train_run(resolved: runconfig.Resolved, palette, splits, run_dir: Path, echo=True):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_NAME).write_text(resolved.echo())
    seed = runconfig.seed(resolved.parser)
    model = build(resolved.model, seed).astype(np.dtype(resolved.dtype))
    extra = {"palette": palette.to_text(), "seed": seed}
    on_epoch = (lambda rec: _out(rec.log_line())) if echo else None
    history = train_loop(model, splits["train"], resolved.train, splits.get("val") or None,
                         run_dir, on_epoch=on_epoch, checkpoint_extra=extra)
    return model, history


def _checkpoint_palette(path, k: int) -> ClassPalette:
    text = checkpoint_extra(path).get("palette")
    return ClassPalette.from_text(text) if text else ClassPalette.default(k)


def _evaluate(model, samples, palette: ClassPalette):
    k = model.cfg.num_classes
    preds = predict_masks(model, samples)
    trues = [s.mask for s in samples]
    cm = sum(confusion(p, t, k) for p, t in zip(preds, trues))
    report = metrics(cm, class_names=palette.names)
    return report, per_image_dice(preds, trues, k)


def _dice_csv(samples, dice: np.ndarray, names) -> str:
    lines = ["image," + ",".join(names) + ",mean"]
    for s, row in zip(samples, dice):
        lines.append(s.name + "," + ",".join(f"{v:.6f}" for v in row) + f",{row.mean():.6f}")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cp = _load_config(args)
    palette, splits = _dataset(cp.get("data", "root"))
    resolved = _resolve(cp, palette, splits["train"])
    run_dir = Path(cp.get("run", "out"))
    _train_run(resolved, palette, splits, run_dir)
    _out(f"checkpoints written to {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    palette = load_palette(args.data)
    k = model.cfg.num_classes
    if len(palette) != k:
        raise ConfigError(f"checkpoint predicts {k} classes but dataset {args.data} has {len(palette)}")
    samples = load_split(args.data, (args.split,), palette)[args.split]
    if not samples:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")
    report, dice = _evaluate(model, samples, palette)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "per_image_dice.csv").write_text(_dice_csv(samples, dice, palette.names))
    sys.stdout.write(report.to_text())
    _out(f"report written to {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    palette = _checkpoint_palette(args.checkpoint, model.cfg.num_classes)
    image = image_to_array(read_rgb(args.image)).astype(model.decoder.head.weight.data.dtype)
    (mask,) = predict_masks(model, [LabeledSample(image, None, Path(args.image).stem)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rgb(out, encode_mask(mask, palette))
    _out(f"wrote {out} ({mask.shape[0]}x{mask.shape[1]})")
    return EXIT_OK


def params_table(variants, multipliers, min_channels: int = 16, num_classes: int = 7,
                 image_size=(304, 664)) -> str:
    """Fixed-width per-component parameter counts, one row per (variant, multiplier)."""
    cols = ("encoder", "maa", "bottleneck", "decoder")
    lines = [f"{'variant':<16} {'mult':>5} " + " ".join(f"{c:>11}" for c in cols)
             + f" {'total':>11} {'M':>7}"]
    for v in variants:
        for m in multipliers:
            cfg = ModelConfig.for_variant(v, channel_multiplier=m, min_channels=min_channels,
                                          num_classes=num_classes, image_size=image_size)
            parts = param_breakdown(cfg)
            total = sum(parts.values())
            lines.append(f"{v:<16} {m:>5g} " + " ".join(f"{parts[c]:>11d}" for c in cols)
                         + f" {total:>11d} {total / 1e6:>7.3f}")
    return "\n".join(lines) + "\n"


def cmd_params(args) -> int:
    cp = _load_config(args)
    k = runconfig.num_classes(cp) or 7
    size = runconfig.image_size(cp) or ModelConfig().image_size
    floor = runconfig.min_channels(cp)
    if args.variant or args.multiplier:
        variants = args.variant or [cp.get("model", "variant")]
        mults = args.multiplier or [runconfig.channel_multiplier(cp)]
        for v in variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        sys.stdout.write(params_table(variants, mults, floor, k, size))
    else:
        sys.stdout.write(params_table(list(VARIANTS), [1.0], floor, k, size))
        _out()
        sys.stdout.write(params_table([REFERENCE_VARIANT], MULTIPLIERS, floor, k, size))
    return EXIT_OK


def cmd_synth(args) -> int:
    cp = _load_config(args)
    cfg = runconfig.synth_config(cp)
    cfg.validate()
    out = Path(args.out or cp.get("data", "root"))
    samples = write_synthetic(out, cfg)
    (out / "synth.ini").write_text(runconfig.dump(cp))
    counts = dict(zip(SPLITS, cfg.split_sizes))
    _out(f"wrote {len(samples)} images to {out} "
         + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cp = _load_config(args)
    palette, splits = _dataset(cp.get("data", "root"))
    test = splits["test"]
    if not test:
        raise ConfigError("ablation needs a non-empty test split")
    variants = args.variant or list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    base_out = Path(cp.get("run", "out"))
    rows, dice = {}, {}
    for v in variants:
        cp.set("model", "variant", v)
        resolved = _resolve(cp, palette, splits["train"])
        _out(f"== {v}")
        _train_run(resolved, palette, splits, base_out / v)
        model = load_checkpoint(base_out / v / BEST_NAME)
        report, per_image = _evaluate(model, test, palette)
        dice[v] = per_image.mean(axis=1)
        rows[v] = {"params": int(sum(param_breakdown(model.cfg).values())), "miou": report.miou,
                   "mdsc": report.mdsc, "mpa": report.mpa}
    ref = REFERENCE_VARIANT if REFERENCE_VARIANT in dice else variants[-1]
    for v in variants:
        rows[v]["p_vs_" + ref] = None if v == ref else wilcoxon_rank_sum(dice[v], dice[ref])
    lines = [f"{'variant':<16} {'params':>10} {'miou':>7} {'mdsc':>7} {'mpa':>7} {'p':>9}"]
    for v in variants:
        r = rows[v]
        p = r["p_vs_" + ref]
        lines.append(f"{v:<16} {r['params']:>10d} {r['miou']:7.4f} {r['mdsc']:7.4f} {r['mpa']:7.4f} "
                     + (f"{p:9.3g}" if p is not None else f"{'ref':>9}"))
    text = "\n".join(lines) + "\n"
    (base_out / "ablation.txt").write_text(text)
    (base_out / "ablation.json").write_text(
        json.dumps({"reference": ref, "variants": rows}, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lightreseg", description="Retinal layer segmentation: training, evaluation and tools.",
        epilog="Config keys can be overridden with --key value or --section.key value.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_, config=True):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        if config:
            p.add_argument("--config", help="INI run configuration")
        p.set_defaults(func=func, takes_overrides=config)
        return p

    command("train", cmd_train, "train a network on a dataset directory")
    p = command("eval", cmd_eval, "evaluate a checkpoint on one split", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p = command("predict", cmd_predict, "write a colour-coded mask for one image", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p = command("params", cmd_params, "print parameter counts per component")
    p.add_argument("--variant", action="append", help="repeatable; default: every variant")
    p.add_argument("--multiplier", action="append", type=float, help="repeatable channel multiplier")
    p = command("synth", cmd_synth, "generate a synthetic layered-retina dataset")
    p.add_argument("--out", help="dataset directory (default: [data] root)")
    p = command("ablate", cmd_ablate, "train and compare the ablation variants")
    p.add_argument("--variant", action="append", help="repeatable; default: every variant")
    return parser


def _thread_limit():
    raw = os.environ.get("LIGHTSEG_THREADS")
    if raw is None or raw.strip() == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LIGHTSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"LIGHTSEG_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(code: int, message: str) -> int:
    print("lightreseg: error: " + " ".join(str(message).split()), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and not args.takes_overrides:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    args.overrides = extra
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, CheckpointError, DimensionError) as exc:
        return _fail(EXIT_DATA, exc)
    except OSError as exc:
        return _fail(EXIT_DATA, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        return _fail(EXIT_INTERNAL, f"internal error: {type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
