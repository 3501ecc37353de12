#!/usr/bin/env python3
"""
MADF Inpainting Toolkit - command-line entry point

Commands:
  train         train from a key = value config file (resumable)
  infer         fill the holes of one image with a trained checkpoint
  eval          bucketed PSNR / SSIM on a seeded held-out set
  gen-masks     write free-form masks of one hole-ratio bucket
  flops         per-component multiply counts and parameter count
  gradcheck     finite-difference gradient suites (exit 0 iff all pass)
  dump-kernels  grid of first-level dynamic kernels for a mask
  ablate        component or supervision-scheme ablation table

Exit codes: 0 success, 1 toolkit or configuration error, 2 usage error.
"""

import os
import sys

# Thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("MADF_THREADS", "1") or "1"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import logging
import traceback
from logging.handlers import RotatingFileHandler

import cv2
import numpy as np

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

import config
from autodiff import Tensor4
from checkpoint import load_checkpoint
from errors import ConfigurationError, MadfError
from flops import count_flops
from grad_check import SUITES, run_suite
from image_io import load_image, load_mask, save_gray, save_image, save_mask
from masks import MaskSpec, augment_mask, bucket_label, gen_freeform_detailed, hole_ratio, parse_bucket
from metrics import evaluate_set, format_table, to_csv
from model import PRESETS, ModelConfig, dump_first_layer_kernels, forward_full, parameter_shapes
from synthetic_data import build_eval_set
from trainer import STUDIES, format_ablation, load_train_config, run_ablation, train

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(level: str = config.LOG_LEVEL, log_file: str = config.ERROR_LOG) -> None:
    """RotatingFileHandler (2MB max, 2 backups) plus stdout."""
    handlers = []
    try:
        file_handler = RotatingFileHandler(log_file, maxBytes=2 * 1024 * 1024, backupCount=2)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)
    except OSError:
        pass  # read-only working directory: console only

    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handlers.append(stream_handler)

    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        handlers=handlers,
        force=True,
    )


def _parse_hw(text: str) -> tuple:
    try:
        h, w = (int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W (e.g. 256,256), got '{text}'")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"dims must be positive, got '{text}'")
    return h, w


def _batched(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64)[None]


# ============================================================
# COMMAND HANDLERS
# ============================================================

def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    result = train(cfg, install_signals=True)
    if result.losses:
        first, last = result.losses[0][1], result.losses[-1][1]
        logging.info(f"Total loss {first:.6g} -> {last:.6g} over {len(result.losses)} iterations")
    return 0


def cmd_infer(args) -> int:
    model, _, ckpt = load_checkpoint(args.ckpt)
    model.eval()
    image = load_image(args.image)
    mask = load_mask(args.mask)
    if mask.shape != image.hw:
        raise ConfigurationError(f"Mask {mask.shape} and image {image.hw} dims differ")

    gt = _batched(image.pixels)
    m = np.asarray(mask, dtype=np.float64)[None, None]
    outputs = forward_full(model, Tensor4(gt * m, dtype=model.dtype), Tensor4(m, dtype=model.dtype))

    final = np.clip(outputs.images[-1].data[0].astype(np.float64), 0.0, 1.0)
    composed = m[0] * image.pixels + (1.0 - m[0]) * final
    save_image(composed, args.out)
    logging.info(f"✓ Inpainted {args.image} (hole ratio {hole_ratio(mask):.3f}) -> {args.out}")

    if args.emit_intermediate:
        stem, ext = os.path.splitext(args.out)
        for d, out in enumerate(outputs.images):
            path = f"{stem}_d{d}{ext}"
            save_image(np.clip(out.data[0].astype(np.float64), 0.0, 1.0), path)
            logging.info(f"  decoder {d} ({'recovery' if d == 0 else f'refinement {d}'}) -> {path}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    h, w = model.config.image_size
    cases = build_eval_set(args.count, args.seed, h, w, regular=args.regular)
    rows = evaluate_set(model, cases, decoder_index=args.decoder)
    print(format_table(rows))
    if args.csv:
        parent = os.path.dirname(args.csv)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.csv, "w") as f:
            f.write(to_csv(rows))
        logging.info(f"✓ Metrics written to {args.csv}")
    return 0


def cmd_gen_masks(args) -> int:
    bucket = parse_bucket(args.bucket)
    h, w = args.hw
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        result = gen_freeform_detailed(h, w, MaskSpec("freeform", bucket, seed))
        mask = augment_mask(result.mask, seed=seed + 1) if args.augment else result.mask
        path = os.path.join(args.out, f"mask_{i:04d}.png")
        save_mask(mask, path)
        logging.debug(f"{path}: ratio {hole_ratio(mask):.4f}, {result.strokes} strokes, "
                      f"{result.ellipses} ellipses, {result.attempts} attempts")
    logging.info(f"✓ Wrote {args.count} masks of bucket {bucket_label(bucket)} to {args.out}")
    return 0


def cmd_flops(args) -> int:
    cfg = ModelConfig.preset(args.preset, refinements=args.refinements,
                             pn_enabled=False if args.no_pn else None)
    report = count_flops(cfg, args.hw)
    params = sum(int(np.prod(shape)) for shape in parameter_shapes(cfg).values())
    print(report.render_table())
    print(report.render_kv())
    print(f"num_parameters={params}")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.module] if args.module else list(SUITES)
    failed = 0
    for name in names:
        for report in run_suite(name, seed=args.seed):
            print(report.summary())
            failed += not report.passed
    if failed:
        logging.error(f"❌ {failed} gradient check(s) over tolerance")
        return 1
    logging.info("✓ All gradient checks passed")
    return 0


def cmd_dump_kernels(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    mask = load_mask(args.mask)
    dump = dump_first_layer_kernels(model, mask, rows=args.rows)
    save_gray(dump.grid, args.out)
    for (i, j), frac, energy in zip(dump.windows, dump.valid_fractions, dump.energies):
        print(f"window=({i},{j}) valid_fraction={frac:.3f} energy={energy:.6g}")
    logging.info(f"✓ Kernel grid written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_train_config(args.config)
    rows = run_ablation(cfg, study=args.study)
    print(format_ablation(rows))
    return 0


# ============================================================
# ARGUMENT PARSING
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main_cli.py",
                                     description="Mask-aware dynamic filtering inpainting toolkit")
    parser.add_argument("--log-level", default=config.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="inpaint one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-intermediate", action="store_true",
                   help="also write every decoder's raw output")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="bucketed metrics on a seeded held-out set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=config.TRAIN_EVAL_COUNT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoder", type=int, default=-1, help="0 = recovery, -1 = last refinement")
    p.add_argument("--regular", action="store_true", help="add the centered-hole row")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gen-masks", help="write free-form masks of one bucket")
    p.add_argument("--bucket", required=True, help="1..6 or a label such as 0.2-0.3")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--hw", type=_parse_hw, default=(config.DESK_IMAGE_SIZE, config.DESK_IMAGE_SIZE))
    p.add_argument("--augment", action="store_true")
    p.set_defaults(handler=cmd_gen_masks)

    p = sub.add_parser("flops", help="multiply counts per component")
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--hw", type=_parse_hw)
    p.add_argument("--refinements", type=int)
    p.add_argument("--no-pn", action="store_true")
    p.set_defaults(handler=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", choices=SUITES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("dump-kernels", help="render first-level dynamic kernels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=4)
    p.set_defaults(handler=cmd_dump_kernels)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--study", choices=STUDIES, default="components")
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    cv2.setNumThreads(config.THREADS)

    try:
        config.validate_config()
    except ValueError as e:
        logging.error(f"❌ {e}")
        return 1

    try:
        return args.handler(args)
    except MadfError as e:
        logging.error(f"❌ {type(e).__name__}: {e}")
        return 1
    except Exception as e:
        logging.error(f"❌ FATAL ERROR: {e}")
        logging.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
