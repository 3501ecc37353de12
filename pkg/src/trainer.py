"""
Trainer - training configuration, the training loop and ablation runs

A run is fully determined by its TrainConfig: the model is initialized from
seed, the image set is built from seed, and the batch of iteration i is
drawn from a generator keyed on (seed, i). Resuming from a checkpoint
therefore continues the exact trajectory of an unbroken run.

Usage:
    cfg = load_train_config("configs/desk.conf")
    result = train(cfg)
"""

from __future__ import annotations

import json
import logging
import os
import re
import signal
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from typing import Optional

import numpy as np

import config
from autodiff import Tape, Tensor4, backward
from checkpoint import load_checkpoint, save_checkpoint
from errors import ConfigurationError, NumericError
from losses import FeatureNet, LossReport, supervision_losses
from metrics import ALL_BUCKETS, evaluate_set, find_row
from model import PRESETS, Model, ModelConfig, build_model, forward_full
from optimizer import AdamState, adam_step
from synthetic_data import BatchPrefetcher, build_dataset, build_eval_set, sample_batch

logger = logging.getLogger(__name__)


# ============================================================
# CONFIGURATION
# ============================================================

@dataclass
class TrainConfig:
    """One training run. image_size 0 means the preset's own size."""

    preset: str = "desk"
    batch_size: int = config.TRAIN_BATCH_SIZE
    iterations: int = config.TRAIN_ITERATIONS
    seed: int = config.TRAIN_SEED
    schedule: str = "coarse-to-fine"
    pn_enabled: bool = True
    refinements: int = config.DEFAULT_REFINEMENTS
    image_size: int = 0
    dataset_size: int = config.TRAIN_DATASET_SIZE
    dtype: str = config.TRAIN_DTYPE
    checkpoint_path: str = "runs/desk/model.ckpt"
    log_path: str = "runs/desk/train.log"
    status_path: str = config.STATUS_FILE
    eval_interval: int = config.TRAIN_EVAL_INTERVAL
    eval_count: int = config.TRAIN_EVAL_COUNT
    checkpoint_interval: int = config.TRAIN_CHECKPOINT_INTERVAL
    prefetch_depth: int = config.TRAIN_PREFETCH_DEPTH
    resume: bool = False

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig.preset(self.preset, refinements=self.refinements, pn_enabled=self.pn_enabled)
        if self.image_size:
            cfg.image_size = (self.image_size, self.image_size)
        return cfg

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def evaluates(self) -> bool:
        """Evaluation needs at least one case per bucket and room for the SSIM window."""
        return self.eval_count > 0 and self.model_config().image_size[0] >= config.SSIM_WINDOW

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: listing every invalid field
        """
        errors = []
        if self.preset not in PRESETS:
            errors.append(f"preset must be one of {PRESETS}")
        if self.batch_size < 1:
            errors.append("batch_size must be at least 1")
        if self.iterations < 1:
            errors.append("iterations must be at least 1")
        if self.schedule not in config.SCHEDULES:
            errors.append(f"schedule must be one of {config.SCHEDULES}")
        if self.refinements < 0:
            errors.append("refinements must be non-negative")
        if self.image_size < 0:
            errors.append("image_size must be 0 (preset size) or positive")
        if self.dataset_size < 1:
            errors.append("dataset_size must be at least 1")
        if self.dtype not in ("float32", "float64"):
            errors.append("dtype must be float32 or float64")
        if min(self.eval_interval, self.eval_count, self.checkpoint_interval) < 0:
            errors.append("eval_interval, eval_count and checkpoint_interval must be non-negative")
        if self.prefetch_depth < 1:
            errors.append("prefetch_depth must be at least 1")
        if not self.checkpoint_path:
            errors.append("checkpoint_path must be set")

        if not errors:
            try:
                cfg = self.model_config()
                cfg.validate()
                cfg.check_input(*cfg.image_size)
            except Exception as e:
                errors.append(str(e))

        if errors:
            raise ConfigurationError("Training configuration invalid:\n  - " + "\n  - ".join(errors))


_LINE = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$')
_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def _coerce(raw: str, kind: type, where: str):
    # Values may be quoted, as in Python-looking config files
    value = raw.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    if kind is bool:
        lowered = value.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigurationError(f"{where}: expected a boolean, got '{raw}'")
    if kind is int:
        try:
            return int(value)
        except ValueError:
            raise ConfigurationError(f"{where}: expected an integer, got '{raw}'")
    return value


def parse_train_config(text: str, source: str = "<string>") -> TrainConfig:
    """
    Parse `key = value` lines into a TrainConfig. `#` starts a comment.

    Raises:
        ConfigurationError: unknown key, malformed line or bad value, naming source and line
    """
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    builtin = {"str": str, "int": int, "bool": bool}
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{number}"
        match = _LINE.match(stripped)
        if not match:
            raise ConfigurationError(f"{where}: expected 'key = value', got '{line.strip()}'")
        key, raw = match.group(1), match.group(2)
        if key not in kinds:
            raise ConfigurationError(f"{where}: unknown key '{key}'")
        if key in values:
            raise ConfigurationError(f"{where}: duplicate key '{key}'")
        values[key] = _coerce(raw, builtin[kinds[key]], where)

    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_train_config(path: str) -> TrainConfig:
    """
    Raises:
        ConfigurationError: file missing or invalid
    """
    path = str(path)
    if not os.path.exists(path):
        raise ConfigurationError(f"Training config not found: {path}")
    with open(path, "r") as f:
        text = f.read()
    cfg = parse_train_config(text, source=path)
    logger.info(f"Training config loaded from {path}")
    return cfg


# ============================================================
# RUN RECORDS
# ============================================================

class TrainingLog:
    """Append-only text log, one `key=value` record per line."""

    def __init__(self, path: str, fresh: bool = False):
        self.path = str(path)
        parent = os.path.dirname(self.path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        if fresh:
            open(self.path, "w").close()

    def write(self, kind: str, iteration: int, body: str = "", **extra) -> None:
        parts = [f"kind={kind}", f"iter={iteration}"]
        parts += [f"{key}={value}" for key, value in extra.items()]
        if body:
            parts.append(body)
        with open(self.path, "a") as f:
            f.write(" ".join(parts) + "\n")

    def step(self, iteration: int, report: LossReport) -> None:
        self.write("step", iteration, report.to_kv())

    def eval(self, iteration: int, decoder: int, rows: list) -> None:
        for row in rows:
            self.write("eval", iteration, decoder=decoder, bucket=row.bucket,
                       psnr=f"{row.psnr_db:.4f}", ssim=f"{row.ssim:.4f}",
                       hole_psnr=f"{row.hole_psnr_db:.4f}", count=row.count)


def read_log(path: str, kind: Optional[str] = None) -> list:
    """Parse a training log back into dicts of strings."""
    records = []
    with open(path, "r") as f:
        for line in f:
            record = dict(part.split("=", 1) for part in line.split() if "=" in part)
            if kind is None or record.get("kind") == kind:
                records.append(record)
    return records


def write_status(path: str, status: str, iteration: int, total: Optional[float], message: str = "") -> None:
    try:
        payload = {
            "status": status,
            "iteration": iteration,
            "last_total_loss": total,
            "timestamp": datetime.now().isoformat(),
            "message": message,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
    except Exception:
        pass  # Status file is best-effort


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    iteration: int
    losses: list = field(default_factory=list)       # (iteration, total) for this session
    evaluations: dict = field(default_factory=dict)  # decoder index -> EvalRow list at the end
    stopped: bool = False


# ============================================================
# TRAINING LOOP
# ============================================================

class Trainer:
    """
    Owns every piece of mutable run state: parameters, Adam moments and
    the iteration counter. Batches are produced ahead on one thread.
    """

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.model_config = cfg.model_config()
        self.dtype = cfg.np_dtype
        self._stop = threading.Event()

        self.model, self.adam, self.iteration = self._initial_state()
        self.net = FeatureNet()
        h, w = self.model_config.image_size
        self.dataset = build_dataset(cfg.dataset_size, h, w, cfg.seed)
        self.eval_cases = build_eval_set(cfg.eval_count, cfg.seed, h, w) if cfg.evaluates else []
        self.log = TrainingLog(cfg.log_path, fresh=self.iteration == 0)
        self.last_total: Optional[float] = None

    def _initial_state(self) -> tuple:
        cfg = self.cfg
        if cfg.resume and os.path.exists(cfg.checkpoint_path):
            model, adam, ckpt = load_checkpoint(cfg.checkpoint_path, expected=self.model_config)
            if ckpt.seed != cfg.seed:
                raise ConfigurationError(
                    f"Checkpoint {cfg.checkpoint_path} was trained with seed {ckpt.seed}, config has {cfg.seed}"
                )
            if model.dtype != self.dtype:
                raise ConfigurationError(
                    f"Checkpoint {cfg.checkpoint_path} holds {model.dtype.name} parameters, config asks for {cfg.dtype}"
                )
            logger.info(f"✓ Resuming from iteration {ckpt.iteration}")
            return model, adam, ckpt.iteration
        if cfg.resume:
            logger.warning(f"⚠️  resume requested but {cfg.checkpoint_path} does not exist - starting fresh")
        return build_model(self.model_config, cfg.seed, dtype=self.dtype), AdamState(), 0

    def request_stop(self, signum=None, frame=None) -> None:
        name = signal.Signals(signum).name if signum is not None else "request"
        logger.info(f"Stop requested via {name}; finishing the current iteration")
        self._stop.set()

    def install_signal_handlers(self) -> None:
        """SIGINT/SIGTERM stop the loop after the current iteration; main thread only."""
        signal.signal(signal.SIGTERM, self.request_stop)
        signal.signal(signal.SIGINT, self.request_stop)

    def make_batch(self, iteration: int):
        return sample_batch(self.dataset, self.cfg.batch_size, iteration, self.cfg.seed)

    def step(self, batch) -> LossReport:
        """
        One optimization step on a batch.

        Raises:
            NumericError: non-finite loss or gradient (parameters untouched)
        """
        model = self.model
        model.train()
        model.zero_grad()
        gt = Tensor4(batch.gt, dtype=self.dtype)
        mask = Tensor4(batch.mask, dtype=self.dtype)
        image_in = Tensor4(batch.image_in, dtype=self.dtype)

        with Tape() as tape:
            outputs = forward_full(model, image_in, mask)
            report, total = supervision_losses(outputs, gt, mask, self.net, schedule=self.cfg.schedule,
                                               refinements=self.model_config.refinements)
        backward(tape, total)
        adam_step(model.params, self.adam)
        return report

    def evaluate(self) -> dict:
        """Bucketed metrics of the recovery and the last decoder on the held-out set."""
        if not self.eval_cases:
            return {}
        decoders = sorted({0, self.model_config.refinements})
        return {d: evaluate_set(self.model, self.eval_cases, decoder_index=d) for d in decoders}

    def save(self) -> None:
        save_checkpoint(self.cfg.checkpoint_path, self.model, self.adam, self.iteration, self.cfg.seed,
                        extra={"train": {k: v for k, v in asdict(self.cfg).items() if k != "resume"}})
        self.log.write("checkpoint", self.iteration, path=self.cfg.checkpoint_path)
        logger.info(f"✓ Checkpoint saved at iteration {self.iteration}: {self.cfg.checkpoint_path}")

    def _log_evaluation(self, results: dict) -> None:
        for decoder, rows in results.items():
            self.log.eval(self.iteration, decoder, rows)
            overall = find_row(rows, ALL_BUCKETS)
            if overall is not None:
                logger.info(f"Eval @ {self.iteration} decoder {decoder}: PSNR {overall.psnr_db:.2f} dB, "
                            f"SSIM {overall.ssim:.4f}, hole PSNR {overall.hole_psnr_db:.2f} dB")

    def run(self) -> TrainResult:
        cfg = self.cfg
        result = TrainResult(self.model, self.adam, self.iteration)
        logger.info("=" * 70)
        logger.info(f"Training {self.model_config.name}: L={self.model_config.levels} "
                    f"K={self.model_config.refinements} pn={self.model_config.pn_enabled} "
                    f"schedule={cfg.schedule} dtype={cfg.dtype}")
        logger.info(f"Parameters: {self.model.num_parameters():,}  "
                    f"iterations {self.iteration}->{cfg.iterations}  batch {cfg.batch_size}")
        logger.info("=" * 70)
        write_status(cfg.status_path, "running", self.iteration, None, "training started")
        started = time.monotonic()

        try:
            with BatchPrefetcher(self.make_batch, self.iteration, cfg.iterations,
                                 depth=cfg.prefetch_depth) as batches:
                for batch in batches:
                    report = self.step(batch)
                    self.iteration = batch.iteration + 1
                    self.last_total = report.total
                    result.losses.append((self.iteration, report.total))
                    self.log.step(self.iteration, report)

                    if self.iteration == 1 or self.iteration % 50 == 0:
                        logger.info(f"iter {self.iteration}/{cfg.iterations} total={report.total:.6g}")
                    if cfg.eval_interval and self.iteration % cfg.eval_interval == 0:
                        self._log_evaluation(self.evaluate())
                    if cfg.checkpoint_interval and self.iteration % cfg.checkpoint_interval == 0:
                        self.save()
                        write_status(cfg.status_path, "running", self.iteration, self.last_total)
                    if self._stop.is_set():
                        result.stopped = True
                        break
        except NumericError as e:
            logger.error(f"❌ Training halted at iteration {self.iteration + 1}: {e}")
            logger.error("Last good checkpoint kept at " + cfg.checkpoint_path)
            write_status(cfg.status_path, "failed", self.iteration, self.last_total, str(e))
            raise

        self.save()
        if not result.stopped:
            result.evaluations = self.evaluate()
            self._log_evaluation(result.evaluations)

        elapsed = time.monotonic() - started
        status = "stopped" if result.stopped else "completed"
        write_status(cfg.status_path, status, self.iteration, self.last_total)
        logger.info(f"✓ Training {status} at iteration {self.iteration} in {elapsed:.1f}s")
        result.iteration = self.iteration
        return result


def train(cfg: TrainConfig, install_signals: bool = False) -> TrainResult:
    """
    Run training to cfg.iterations (or until stopped by a signal).

    Raises:
        ConfigurationError: invalid config or incompatible checkpoint
        NumericError: non-finite loss or gradient; the last checkpoint is kept
    """
    trainer = Trainer(cfg)
    if install_signals:
        trainer.install_signal_handlers()
    return trainer.run()


# ============================================================
# ABLATIONS
# ============================================================

STUDIES = ("components", "supervision")


@dataclass
class AblationRow:
    variant: str
    hole_psnr_db: float
    psnr_db: float
    ssim: float
    recovery_hole_psnr_db: float
    initial_loss: float
    final_loss: float


def ablation_variants(cfg: TrainConfig, study: str) -> list:
    """(label, TrainConfig) pairs sharing every seed with cfg."""
    if study == "components":
        grid = [("K0", dict(refinements=0, pn_enabled=False))]
        for k in (1, 2, 3):
            grid.append((f"K{k}+BN", dict(refinements=k, pn_enabled=False)))
            grid.append((f"K{k}+PN", dict(refinements=k, pn_enabled=True)))
    elif study == "supervision":
        grid = [(schedule, dict(schedule=schedule)) for schedule in ("none", "same", "coarse-to-fine")]
    else:
        raise ConfigurationError(f"Unknown ablation study '{study}', expected one of {STUDIES}")

    base, _ = os.path.splitext(cfg.checkpoint_path)
    log_base, _ = os.path.splitext(cfg.log_path)
    variants = []
    for label, changes in grid:
        tag = label.replace("+", "_")
        variants.append((label, replace(cfg, resume=False, eval_interval=0,
                                         checkpoint_path=f"{base}.{tag}.ckpt",
                                         log_path=f"{log_base}.{tag}.log", **changes)))
    return variants


def run_ablation(cfg: TrainConfig, study: str = "components") -> list:
    """
    Train every variant of a study under identical seeds and score the final
    decoder on the held-out set.

    Raises:
        ConfigurationError: unknown study, or evaluation impossible for cfg
    """
    if not cfg.evaluates:
        raise ConfigurationError("Ablations need eval_count > 0 and images of at least "
                                 f"{config.SSIM_WINDOW}px")
    rows = []
    for label, variant in ablation_variants(cfg, study):
        logger.info(f"Ablation {study}: {label}")
        result = train(variant)
        last = find_row(result.evaluations[variant.refinements], ALL_BUCKETS)
        recovery = find_row(result.evaluations[0], ALL_BUCKETS)
        rows.append(AblationRow(label, last.hole_psnr_db, last.psnr_db, last.ssim,
                                recovery.hole_psnr_db, result.losses[0][1], result.losses[-1][1]))
    return rows


def format_ablation(rows: list) -> str:
    lines = [f"{'variant':<16}{'hole PSNR':>11}{'PSNR':>9}{'SSIM':>9}{'rec hole':>10}{'loss0':>11}{'lossN':>11}",
             "-" * 77]
    for row in rows:
        lines.append(f"{row.variant:<16}{row.hole_psnr_db:>11.2f}{row.psnr_db:>9.2f}{row.ssim:>9.4f}"
                     f"{row.recovery_hole_psnr_db:>10.2f}{row.initial_loss:>11.4g}{row.final_loss:>11.4g}")
    return "\n".join(lines)
