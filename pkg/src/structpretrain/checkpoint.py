"""Binary checkpoint format and the JSON-lines metrics log.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes   b"SPTCKPT\\n"
    version      uint32
    header_len   uint64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    payload      concatenated raw arrays, float64 little-endian, row-major
    digest       32 bytes  SHA-256 of everything above

The header holds the model config echo, free-form metadata and an array table
``[{name, shape, offset}]`` relative to the start of the payload.  Optimizer moments
are stored as ordinary arrays under ``opt.m.<name>`` / ``opt.v.<name>``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"SPTCKPT\n"
FORMAT_VERSION = 1
_DIGEST = 32
_PREFIX = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint. ``details`` carries structured info."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


@dataclass
class OptimizerState:
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_adam(cls, opt) -> "OptimizerState":
        return cls(t=opt.t, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                   m={k: a.copy() for k, a in opt.m.items()}, v={k: a.copy() for k, a in opt.v.items()})

    def to_adam(self):
        from .autodiff import Adam
        opt = Adam(self.lr, self.beta1, self.beta2, self.eps)
        opt.t = self.t
        opt.m = {k: a.copy() for k, a in self.m.items()}
        opt.v = {k: a.copy() for k, a in self.v.items()}
        return opt


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    def model_config(self):
        from .model import ModelConfig
        return ModelConfig.from_dict(self.config)


def _encode(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0

    def put(name, arr):
        nonlocal offset
        a = np.asarray(arr, dtype=_DTYPE, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = a.tobytes(order="C")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    for name, arr in ckpt.arrays.items():
        put(name, arr)
    opt_header = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt_header = {"t": o.t, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                      "m": list(o.m), "v": list(o.v)}
        for name, arr in o.m.items():
            put(f"opt.m.{name}", arr)
        for name, arr in o.v.items():
            put(f"opt.v.{name}", arr)
    header = {"config": ckpt.config, "meta": ckpt.meta, "arrays": table,
              "n_params": len(ckpt.arrays), "optimizer": opt_header}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return _encode(ckpt)


def write_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> str:
    """Write atomically (temp file + rename). Returns the hex SHA-256 of the file."""
    data = _encode(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint truncated: file shorter than the fixed header")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}",
                              {"found": version, "expected": FORMAT_VERSION})
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    payload = memoryview(body)[start + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if off + 8 * count > len(payload):
            raise CheckpointError(f"array {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=off).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)  # owned, native-order copy
    optimizer = None
    oh = header.get("optimizer")
    if oh is not None:
        optimizer = OptimizerState(t=oh["t"], lr=oh["lr"], beta1=oh["beta1"], beta2=oh["beta2"], eps=oh["eps"],
                                   m={k: arrays.pop(f"opt.m.{k}") for k in oh["m"]},
                                   v={k: arrays.pop(f"opt.v.{k}") for k in oh["v"]})
    return Checkpoint(config=header["config"], arrays=arrays, optimizer=optimizer, meta=header.get("meta", {}))


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def expected_shapes(model_cfg, tasks: Iterable[str] | None = None) -> dict[str, tuple[int, ...]]:
    """Parameter shapes the pre-training model of ``model_cfg`` would have."""
    from dataclasses import replace
    from .model import init_pretrain_params
    if tasks is not None:
        model_cfg = replace(model_cfg, tasks=tuple(tasks))
    params = init_pretrain_params(model_cfg, np.random.default_rng(0))
    return {k: v.shape for k, v in params.items()}


def check_against_config(ckpt: Checkpoint, model_cfg=None) -> None:
    """Raise CheckpointError listing missing, unexpected and mis-shaped arrays."""
    model_cfg = model_cfg or ckpt.model_config()
    want = expected_shapes(model_cfg)
    have = {k: v.shape for k, v in ckpt.arrays.items()}
    missing = sorted(set(want) - set(have))
    extra = sorted(set(have) - set(want))
    wrong = {k: {"expected": list(want[k]), "found": list(have[k])}
             for k in sorted(set(want) & set(have)) if want[k] != have[k]}
    if missing or extra or wrong:
        raise CheckpointError("checkpoint arrays do not match the model config",
                              {"missing": missing, "unexpected": extra, "shape_mismatch": wrong})


# ---------------------------------------------------------------------------
# metrics log

class MetricsWriter:
    """Serializes appends from one process to a JSON-lines file; flushes every record."""

    def __init__(self, path: str | os.PathLike, mode: str = "w"):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh: io.TextIOBase = open(self.path, mode, encoding="utf-8", newline="\n")

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_metrics(path: str | os.PathLike, record: dict) -> None:
    with MetricsWriter(path, mode="a") as w:
        w.write(record)


def iter_metrics(path: str | os.PathLike) -> Iterator[dict]:
    """Parsed records; a malformed final line (interrupted write) is skipped."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    # a complete file ends with "\n", leaving one empty trailing element
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                return
            raise


def read_metrics(path: str | os.PathLike) -> list[dict]:
    return list(iter_metrics(path))
