"""Binary checkpoint files.

Layout, little-endian throughout::

    "ICSN" | u32 version | u64 header length | header JSON (UTF-8)
    | u32 tensor count
    | per tensor: u16 name length | name | u8 dtype | u8 rank | u32 dims...
                  | raw data | u32 CRC32 of every preceding byte of the record

The header JSON holds the run configuration plus the step counter and the
optimizer's step count. Tensors are namespaced ``param/``, ``buffer/`` and
``optim/{m,v,g_prev}/``.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import atomic_write_bytes
from .errors import CheckpointError, ConfigError
from .model import Model, build_model
from .optim import OptimState

MAGIC = b"ICSN"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
OPTIM_SLOTS = ("m", "v", "g_prev")


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        p = prefix.rstrip("/") + "/"
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))

    def build_model(self) -> Model:
        """Fresh model carrying the stored parameters and running statistics."""
        params = self.group("param")
        dtype = next(iter(params.values())).dtype if params else np.float32
        model = build_model(self.config.model, dtype=dtype)
        load_into(model, params, self.group("buffer"))
        return model

    def optim_state(self, model: Model) -> OptimState:
        names = list(model.named_parameters())
        slots = {s: self.group(f"optim/{s}") for s in OPTIM_SLOTS}
        if not slots["m"]:
            return OptimState.zeros_like(model.parameters())
        try:
            lists = {s: [slots[s][n].copy() for n in names] for s in OPTIM_SLOTS}
        except KeyError as exc:
            raise CheckpointError(f"optimizer state lacks an entry for parameter {exc}") from exc
        return OptimState(m=lists["m"], v=lists["v"], g_prev=lists["g_prev"], t=int(self.meta.get("optim_t", 0)))


def load_into(model: Model, params: dict, buffers: dict) -> None:
    own = model.named_parameters()
    if set(own) != set(params):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise CheckpointError(f"parameter names do not match the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: stored shape {params[name].shape} vs model {p.shape}")
        p.data = params[name].astype(p.dtype).copy()
        p.grad = None
    for name, buf in model.named_buffers().items():
        if name not in buffers:
            raise CheckpointError(f"missing running statistic {name}")
        buf[...] = buffers[name]


# --- encoding ----------------------------------------------------------------------------
def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_OF:
        raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    parts = [
        struct.pack("<H", len(raw_name)),
        raw_name,
        struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape),
        arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def encode(cfg: RunConfig, tensors: dict, step: int, meta: dict | None = None) -> bytes:
    header = {"config": cfg.to_dict(), "step": int(step), **(meta or {})}
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hjson)), hjson, struct.pack("<I", len(tensors))]
    out += [_tensor_record(k, v) for k, v in tensors.items()]
    return b"".join(out)


def collect_tensors(model: Model, state: OptimState | None) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    params = model.named_parameters()
    for name, p in params.items():
        out[f"param/{name}"] = p.data
    for name, b in model.named_buffers().items():
        out[f"buffer/{name}"] = b
    if state is not None:
        for slot in OPTIM_SLOTS:
            for name, arr in zip(params, getattr(state, slot)):
                out[f"optim/{slot}/{name}"] = arr
    return out


def save_checkpoint(path, model: Model, state: OptimState | None, cfg: RunConfig, step: int = 0) -> None:
    meta = {"optim_t": state.t if state is not None else 0}
    atomic_write_bytes(path, encode(cfg, collect_tensors(model, state), step, meta))


# --- decoding ------------------------------------------------------------------------------
class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at offset {self.pos} while reading {what} ({n} bytes needed, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} at offset 4 is not supported (this build reads version {FORMAT_VERSION})")
    (hlen,) = r.unpack("<Q", "header length")
    hoff = r.pos
    try:
        header = json.loads(r.take(hlen, "header JSON").decode("utf-8"))
        cfg = RunConfig.from_dict(header.pop("config"), where=f"{path} header")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {hoff}: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for k in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", f"tensor {k} name length")
        raw_name = r.take(nlen, f"tensor {k} name")
        code, rank = r.unpack("<BB", f"tensor {k} dtype/rank")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {k} has unknown dtype code {code} at offset {r.pos - 2}")
        shape = r.unpack(f"<{rank}I", f"tensor {k} dims")
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes, f"tensor {k} data")
        body_end = r.pos
        (crc,) = r.unpack("<I", f"tensor {k} checksum")
        if zlib.crc32(buf[start:body_end]) != crc:
            raise CheckpointError(f"{path}: checksum mismatch for tensor record {k} at offset {start} (crc stored at offset {body_end})")
        name = raw_name.decode("utf-8", errors="replace")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(config=cfg, step=int(header.pop("step", 0)), tensors=tensors, meta=header, format_version=version)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, path)
