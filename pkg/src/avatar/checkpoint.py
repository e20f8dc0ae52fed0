"""Checkpoint files: a JSON manifest followed by one flat float64 blob.

Layout::

    b"AVATARCK"              8-byte magic
    uint32 LE                format version
    uint64 LE                manifest length in bytes
    manifest                 UTF-8 JSON
    blob                     little-endian float64 values

Every array (parameters, batch-norm running statistics, Adam moments and
the training log) is a manifest entry ``{name, shape, offset}`` with
``offset`` in bytes from the start of the blob.  Entries must tile the blob
exactly.  Scalars and small structures (configs, normalizer, RNG state,
counters) live in the manifest itself.
"""

from __future__ import annotations

import json
import math
import os
import struct

import numpy as np

from .autodiff import SeededRng
from .data import NormalizerState
from .losses import LossBreakdown
from .nets import init_model
from .training import NETWORKS, TrainConfig, Trainer, TrainLog

MAGIC = b"AVATARCK"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _collect_arrays(model, trainer):
    arrays = {}
    for name, p in model.named_parameters().items():
        arrays[f"param/{name}"] = p.data
    for name, (bn, attr) in model.named_buffers().items():
        arrays[f"buffer/{name}"] = getattr(bn, attr)
    if trainer is not None:
        for net, opt in trainer.optimizers.items():
            for p, m, v in zip(opt.params, opt.m, opt.v):
                arrays[f"adam/{net}/m/{p.name}"] = m
                arrays[f"adam/{net}/v/{p.name}"] = v
        rows = np.array(list(trainer.log.rows()), dtype=np.float64).reshape(-1, len(TrainLog.COLUMNS))
        arrays["trainlog"] = rows
    return arrays


def save_checkpoint(path, model, trainer=None, extra=None):
    """Write ``model`` (and, if given, the resumable ``trainer`` state) to ``path``."""
    arrays = _collect_arrays(model, trainer)
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "format_version": VERSION,
        "blob_bytes": offset,
        "tensors": entries,
        "model": {
            "n_features": model.n_features,
            "latent_dim": model.latent_dim,
            "seq_len": model.seq_len,
            "trained": model.trained,
        },
        "train_config": model.config.to_dict() if model.config is not None else None,
        "normalizer": model.normalizer.to_dict() if model.normalizer is not None else None,
        "trainer": None,
        "extra": extra or {},
    }
    if trainer is not None:
        manifest["trainer"] = {
            **trainer.state_dict(),
            "adam_steps": {k: opt.step_count for k, opt in trainer.optimizers.items()},
        }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse and validate a checkpoint file; returns ``(manifest, arrays)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header ({len(raw)} bytes)")
    magic, version, head_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an AVATAR checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    start = _HEAD.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: manifest truncated at byte {len(raw)}, expected {start}")
    try:
        manifest = json.loads(raw[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    blob = memoryview(raw)[start:]
    expected = manifest["blob_bytes"]
    if len(blob) != expected:
        raise CheckpointError(
            f"{path}: blob is {len(blob)} bytes but the manifest declares {expected} "
            f"(data ends at blob offset {len(blob)})"
        )

    arrays, cursor = {}, 0
    for e in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        n = math.prod(e["shape"]) * 8
        if e["offset"] != cursor:
            raise CheckpointError(f"{path}: tensor {e['name']} at offset {e['offset']}, expected {cursor}")
        if cursor + n > expected:
            raise CheckpointError(f"{path}: tensor {e['name']} overruns the blob at offset {cursor}")
        arrays[e["name"]] = np.frombuffer(blob[cursor : cursor + n], dtype=_F64).reshape(e["shape"]).astype(np.float64)
        cursor += n
    if cursor != expected:
        raise CheckpointError(f"{path}: manifest covers {cursor} of {expected} blob bytes")
    return manifest, arrays


def _restore_model(manifest, arrays):
    if manifest["train_config"] is None:
        raise CheckpointError("checkpoint has no training config; cannot rebuild the model")
    cfg = TrainConfig.from_dict(manifest["train_config"])
    info = manifest["model"]
    model = init_model(cfg, info["n_features"], SeededRng(cfg.seed))
    params = model.named_parameters()
    buffers = model.named_buffers()
    expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
    stored = {k for k in arrays if k.startswith(("param/", "buffer/"))}
    if expected != stored:
        missing, extra = sorted(expected - stored), sorted(stored - expected)
        raise CheckpointError(f"checkpoint tensors do not match the model (missing {missing}, unexpected {extra})")
    for k, p in params.items():
        a = arrays[f"param/{k}"]
        if a.shape != p.data.shape:
            raise CheckpointError(f"{k}: stored shape {a.shape}, model expects {p.data.shape}")
        p.data[...] = a
    for k, (bn, attr) in buffers.items():
        getattr(bn, attr)[...] = arrays[f"buffer/{k}"]
    model.seq_len = info["seq_len"]
    model.trained = bool(info["trained"])
    if manifest["normalizer"] is not None:
        model.normalizer = NormalizerState.from_dict(manifest["normalizer"])
    return model


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, manifest, arrays)``."""
    manifest, arrays = read_checkpoint(path)
    return _restore_model(manifest, arrays), manifest, arrays


def load_model(path):
    return load_checkpoint(path)[0]


def restore_trainer(path, data):
    """Rebuild model and :class:`Trainer` so training continues exactly where it stopped."""
    model, manifest, arrays = load_checkpoint(path)
    state = manifest["trainer"]
    if state is None:
        raise CheckpointError(f"{path}: checkpoint holds no trainer state")
    trainer = Trainer(model, data, model.config, rng=SeededRng(model.config.seed))
    trainer.load_state_dict(state)
    for net in NETWORKS:
        opt = trainer.optimizers[net]
        opt.step_count = int(state["adam_steps"][net])
        for i, p in enumerate(opt.params):
            opt.m[i][...] = arrays[f"adam/{net}/m/{p.name}"]
            opt.v[i][...] = arrays[f"adam/{net}/v/{p.name}"]
    log = TrainLog()
    for row in arrays.get("trainlog", np.zeros((0, len(TrainLog.COLUMNS)))):
        log.append(int(row[0]), int(row[1]), LossBreakdown(*(float(v) for v in row[2:])))
    trainer.log = log
    return trainer
