"""
Checkpoint - binary snapshot of a training run

Layout (all integers little-endian):
  b"MADF"  u32 version  u32 tensor_count
  per tensor:
    u32 name_len, name (utf-8), u8 dtype tag, u8 rank, u32 dims[rank],
    payload (little-endian, C order)

Tensor names:
  param/<name>             model parameters, in model order
  adam.m/<name>            Adam first moments
  adam.v/<name>            Adam second moments
  bn/<key>/mean, /var      running BN statistics
  meta/json                uint8 sorted-key JSON: config echo, iteration, Adam t and
                           hyperparameters, seed, extra run info

Writing the same state twice yields byte-identical files.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from autodiff import Tensor4
from errors import CheckpointFormatError, CheckpointMismatchError, CheckpointTruncatedError
from madf_layers import BnState
from model import Model, ModelConfig, parameter_shapes
from optimizer import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"MADF"
FORMAT_VERSION = 1

DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    adam: AdamState
    bn: "OrderedDict[str, tuple]"
    iteration: int
    seed: int
    extra: dict = field(default_factory=dict)


# ============================================================
# RAW TENSOR CODEC
# ============================================================

def encode_tensors(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in TAG_OF:
            raise CheckpointFormatError(f"Cannot store {name} with dtype {arr.dtype}")
        tag = TAG_OF[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, count: int, what: str) -> bytes:
        end = self.pos + count
        if end > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.path}: ends inside {what} (need {count} bytes at offset {self.pos})"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(data: bytes, path: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    """
    Raises:
        CheckpointFormatError: wrong magic, unknown version or dtype tag
        CheckpointTruncatedError: data ends early or has trailing bytes
    """
    reader = _Reader(data, path)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} (expected {FORMAT_VERSION})")

    tensors = OrderedDict()
    for i in range(count):
        (name_len,) = reader.unpack("<I", f"tensor {i} name length")
        try:
            name = reader.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{path}: tensor {i} name is not utf-8")
        tag, rank = reader.unpack("<BB", f"{name} header")
        if tag not in DTYPE_TAGS:
            raise CheckpointFormatError(f"{path}: {name} has unknown dtype tag {tag}")
        dims = reader.unpack(f"<{rank}I", f"{name} dims")
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(nbytes, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))

    if reader.pos != len(data):
        raise CheckpointTruncatedError(f"{path}: {len(data) - reader.pos} trailing bytes")
    return tensors


# ============================================================
# SAVE / LOAD
# ============================================================

def checkpoint_tensors(model: Model, adam: AdamState, iteration: int, seed: int,
                       extra: Optional[dict] = None) -> "OrderedDict[str, np.ndarray]":
    tensors = OrderedDict()
    for name, t in model.params.items():
        tensors[f"param/{name}"] = t.data
    for name in model.params:
        if name in adam.m:
            tensors[f"adam.m/{name}"] = adam.m[name]
            tensors[f"adam.v/{name}"] = adam.v[name]
    for key, state in model.bn_states.items():
        tensors[f"bn/{key}/mean"] = state.running_mean
        tensors[f"bn/{key}/var"] = state.running_var

    meta = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "iteration": int(iteration),
        "seed": int(seed),
        "adam": {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors["meta/json"] = np.frombuffer(raw, dtype=np.uint8).copy()
    return tensors


def save_checkpoint(path: str, model: Model, adam: AdamState, iteration: int, seed: int,
                    extra: Optional[dict] = None) -> None:
    """Write atomically: a temporary file is renamed over path."""
    path = str(path)
    data = encode_tensors(checkpoint_tensors(model, adam, iteration, seed, extra))
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logger.debug(f"Checkpoint written: {path} ({len(data):,} bytes, iteration {iteration})")


def read_checkpoint(path: str) -> Checkpoint:
    """
    Parse and validate a checkpoint file against its own config echo.

    Raises:
        CheckpointFormatError / CheckpointTruncatedError: damaged file
        CheckpointMismatchError: tensors do not match the stored config
    """
    path = str(path)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointFormatError(f"{path}: cannot read ({e})")

    tensors = decode_tensors(data, path)
    if "meta/json" not in tensors:
        raise CheckpointFormatError(f"{path}: missing meta/json")
    try:
        meta = json.loads(tensors.pop("meta/json").tobytes().decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: bad metadata ({e})")

    params = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        arr = tensors.pop(f"param/{name}", None)
        if arr is None:
            raise CheckpointMismatchError(f"{path}: missing parameter {name}")
        if arr.shape != shape:
            raise CheckpointMismatchError(f"{path}: {name} has dims {arr.shape}, config needs {shape}")
        params[name] = arr

    adam_meta = meta.get("adam", {})
    adam = AdamState(**{key: adam_meta[key] for key in ("lr", "beta1", "beta2", "eps") if key in adam_meta})
    adam.t = int(adam_meta.get("t", 0))
    for name, arr in params.items():
        m = tensors.pop(f"adam.m/{name}", None)
        v = tensors.pop(f"adam.v/{name}", None)
        if m is None and v is None:
            continue
        if m is None or v is None or m.shape != arr.shape or v.shape != arr.shape:
            raise CheckpointMismatchError(f"{path}: Adam moments for {name} are missing or mis-sized")
        adam.m[name], adam.v[name] = m, v

    bn = OrderedDict()
    for k in range(1, cfg.refinements + 1):
        for l in range(cfg.levels, 0, -1):
            key = f"ref{k}.{l}.bn"
            mean, var = tensors.pop(f"bn/{key}/mean", None), tensors.pop(f"bn/{key}/var", None)
            width = cfg.decoder_widths[l - 1]
            if mean is None or var is None or mean.shape != (width,) or var.shape != (width,):
                raise CheckpointMismatchError(f"{path}: running statistics for {key} are missing or mis-sized")
            bn[key] = (mean, var)

    if tensors:
        raise CheckpointMismatchError(f"{path}: unexpected tensors {sorted(tensors)[:5]}")

    return Checkpoint(cfg, params, adam, bn, int(meta.get("iteration", 0)), int(meta.get("seed", 0)),
                      meta.get("extra", {}))


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> tuple:
    """
    Rebuild (Model, AdamState, Checkpoint) from a file.

    Raises:
        CheckpointMismatchError: stored config differs from expected
    """
    ckpt = read_checkpoint(path)
    if expected is not None and expected.to_dict() != ckpt.config.to_dict():
        raise CheckpointMismatchError(f"{path}: stored model config differs from the requested one")

    params = OrderedDict((name, Tensor4(arr.copy(), requires_grad=True)) for name, arr in ckpt.params.items())
    bn_states = OrderedDict()
    for key, (mean, var) in ckpt.bn.items():
        bn_states[key] = BnState(mean.copy(), var.copy())
    model = Model(ckpt.config, params, bn_states)

    adam = ckpt.adam
    adam.m = {name: arr.copy() for name, arr in adam.m.items()}
    adam.v = {name: arr.copy() for name, arr in adam.v.items()}
    logger.info(f"✓ Loaded checkpoint {path} (iteration {ckpt.iteration}, "
                f"{model.num_parameters():,} parameters)")
    return model, adam, ckpt
