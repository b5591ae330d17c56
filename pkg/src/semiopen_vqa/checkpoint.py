"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"SOVQCKPT"
    version      u32
    config       u32 length + UTF-8 JSON (ModelConfig fields)
    train state  u32 length + UTF-8 JSON (TrainState scalars)
    metadata     u32 length + UTF-8 JSON (answer vocabulary, may be null)
    parameters   tensor table
    adam m       tensor table
    adam v       tensor table
    checksum     32 bytes, SHA-256 of everything above

A tensor table is ``u32 count`` followed by entries of
``u16 name length, name, u8 dtype code (0 = f64, 1 = f32), u8 ndim,
u32 dims[ndim], raw little-endian data``.  Entries are sorted by name.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, VqaModel
from .train import TrainState

MAGIC = b"SOVQCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def _pack_table(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name}")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(self.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out

    def blob(self) -> dict:
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps_checkpoint(model: VqaModel, state: TrainState, params: dict[str, np.ndarray] | None = None) -> bytes:
    params = model.state_dict() if params is None else params
    body = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        _json_block(model.cfg.to_dict()),
        _json_block(state.scalars()),
        _json_block({"answers": list(getattr(model, "answer_vocab", None) or []) or None}),
        _pack_table(params),
        _pack_table(state.m),
        _pack_table(state.v),
    ])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model: VqaModel, state: TrainState, params: dict[str, np.ndarray] | None = None) -> None:
    """Write ``model`` (or an explicit ``params`` snapshot) plus optimiser state."""
    Path(path).write_bytes(dumps_checkpoint(model, state, params))


def loads_checkpoint(buf: bytes) -> tuple[VqaModel, TrainState]:
    if len(buf) < len(MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = buf[:-32], buf[-32:]
    if body[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg = ModelConfig.from_dict(r.blob())
    scalars = r.blob()
    meta = r.blob()
    params = r.table()
    m = r.table()
    v = r.table()
    model = VqaModel(cfg)
    expected = {n for n, _ in model.named_parameters()}
    missing = sorted(expected - set(params))
    extra = sorted(set(params) - expected)
    if missing or extra:
        raise CheckpointError(f"checkpoint parameters do not match config; missing: {missing}; unexpected: {extra}")
    model.load_state_dict(params)
    if meta.get("answers"):
        model.answer_vocab = tuple(meta["answers"])
    state = TrainState(**scalars, m=m, v=v)
    return model, state


def load_checkpoint(path) -> tuple[VqaModel, TrainState]:
    return loads_checkpoint(Path(path).read_bytes())
