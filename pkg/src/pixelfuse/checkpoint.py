"""Portable checkpoint container.

Layout (all integers little-endian)::

    b"PXFU"
    u32  format version (currently 1)
    u32  byte length of the JSON header, then the UTF-8 JSON header
    u32  number of tensor records
    per record:
        u32  byte length of the name, then the UTF-8 name
        u8   dtype code (0 = float32, 1 = float64)
        u32  rank
        u64  each dimension
        raw  row-major little-endian data

The JSON header carries the model config, training step, stage, whether
optimizer moments are present, a digest of the seed state and the resolved
training config. Optimizer moments are stored as ordinary tensor records named
``optim.m/<param>`` and ``optim.v/<param>``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, UnifiedTransformer

MAGIC = b"PXFU"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    stage: str = "init"
    optimizer: dict | None = None       # {"step": int, "m": {...}, "v": {...}}
    seed_digest: str = ""
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "step": self.step,
            "stage": self.stage,
            "has_optimizer": self.optimizer is not None,
            "optimizer_step": self.optimizer["step"] if self.optimizer else 0,
            "seed_digest": self.seed_digest,
            "extra": self.extra,
        }


def seed_digest(seed: int, step: int) -> str:
    return hashlib.sha256(f"{seed}:{step}".encode()).hexdigest()[:16]


def expected_schema(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    model = UnifiedTransformer(config)
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw_name)) + raw_name)
    buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(dt, copy=False).tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = dict(ckpt.tensors)
    if ckpt.optimizer is not None:
        for kind in ("m", "v"):
            for name, arr in ckpt.optimizer[kind].items():
                records[f"optim.{kind}/{name}"] = arr
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        _write_tensor(buf, name, arr)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a PXFU checkpoint")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = ModelConfig(**header["model_config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from None
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected_config}")
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in {name}")
        records[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor record")

    tensors = {k: v for k, v in records.items() if not k.startswith("optim.")}
    schema = expected_schema(config)
    if set(tensors) != set(schema):
        missing, extra = set(schema) - set(tensors), set(tensors) - set(schema)
        raise CheckpointError(f"tensor names do not match config schema (missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)})")
    for name, shape in schema.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != expected {shape}")
    tensors = {name: tensors[name] for name in schema}
    optimizer = None
    if header.get("has_optimizer"):
        optimizer = {"step": header.get("optimizer_step", 0),
                     "m": {n: records[f"optim.m/{n}"] for n in schema},
                     "v": {n: records[f"optim.v/{n}"] for n in schema}}
    return Checkpoint(config, tensors, header.get("step", 0), header.get("stage", "init"),
                      optimizer, header.get("seed_digest", ""), header.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode_checkpoint(data, expected_config)
