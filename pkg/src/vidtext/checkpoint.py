"""Checkpoint files.

Layout: ``b"VOFA1"``, a little-endian u32 giving the length of a UTF-8 JSON
metadata block, the metadata, then every tensor as little-endian float32 in
the order listed in ``metadata["tensors"]`` (each entry has name, shape and
byte offset into the payload).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .media import TextTokenizer
from .model import ModelConfig, VideoToTextModel, param_shapes
from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"VOFA1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: VideoToTextModel
    optimizer: AdamWState | None = None
    state: dict = field(default_factory=dict)  # step, rng position, best metric, ...


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str | os.PathLike, model: VideoToTextModel, optimizer: AdamWState | None = None, state: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.data) for k, p in model.params.items()]
    opt_meta = None
    if optimizer is not None:
        opt_meta = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
        }
        arrays += [(f"adam_m/{k}", v) for k, v in optimizer.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in optimizer.v.items()]
    directory, offset, chunks = [], 0, []
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        chunks.append(blob)
    meta = {
        "format": 1,
        "config": model.config.to_dict(),
        "vocab": model.tokenizer.words if model.tokenizer is not None else None,
        "tensors": directory,
        "optimizer": opt_meta,
        "state": state or {},
    }
    header = _dumps(meta)
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_metadata(path: str | os.PathLike) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a VOFA1 checkpoint")
    (n,) = struct.unpack("<I", blob[5:9])
    try:
        meta = json.loads(blob[9 : 9 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc.msg})") from None
    return meta, blob[9 + n :]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    meta, payload = read_metadata(path)
    cfg = ModelConfig.from_dict(meta["config"])
    arrays = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
    params = {}
    for name in (e["name"] for e in meta["tensors"] if e["name"].startswith("param/")):
        params[name[6:]] = Tensor(arrays[name], requires_grad=True)
    tok = TextTokenizer(meta["vocab"]) if meta.get("vocab") else None
    expected = param_shapes(cfg)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise CheckpointError(f"{path}: parameters do not match the stored model config")
    model = VideoToTextModel(cfg, tok, params)
    opt = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        opt = AdamWState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["step"])
        for name, arr in arrays.items():
            kind, _, pname = name.partition("/")
            if kind == "adam_m":
                opt.m[pname] = arr.astype(np.float32)
            elif kind == "adam_v":
                opt.v[pname] = arr.astype(np.float32)
    return Checkpoint(model, opt, meta.get("state", {}))
