"""Named parameter registry, binary checkpoints and checkpoint averaging."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import ContractError, Tensor, get_default_dtype

MAGIC = b"CIFCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or corrupted."""


class ModelParams:
    """Ordered ``name -> Tensor`` map; a tensor's ``requires_grad`` is its trainable flag."""

    def __init__(self) -> None:
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True, dtype=None) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=dtype or get_default_dtype())
        t = Tensor(arr, requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def trainable(self) -> list[Tensor]:
        return [t for t in self._tensors.values() if t.requires_grad]

    def is_trainable(self, name: str) -> bool:
        return self._tensors[name].requires_grad

    def set_trainable(self, predicate) -> None:
        for name, t in self._tensors.items():
            t.requires_grad = bool(predicate(name))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, t in self._tensors.items():
            out.add(name, t.data, t.requires_grad, dtype=t.data.dtype)
        return out

    def fingerprint(self, names: Sequence[str] | None = None) -> str:
        """SHA-256 over names and raw bytes; used for bit-equality checks."""
        h = hashlib.sha256()
        for name in names if names is not None else self._tensors:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._tensors[name].data).tobytes())
        return h.hexdigest()

    def cast(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write ``params`` as a versioned, self-describing little-endian container.

    Layout: magic, uint32 version, uint64 header length, UTF-8 JSON header
    (one entry per parameter with shape, dtype, trainable flag, byte offset,
    byte length and CRC32), then the concatenated raw values.
    """
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dt.str,
            "trainable": bool(t.requires_grad),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "params": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> ModelParams:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", buf, pos)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(buf[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    base = pos + hlen
    params = ModelParams()
    for e in header["params"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"] or zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: parameter {e['name']!r} is corrupted")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        params.add(e["name"], arr, e["trainable"], dtype=arr.dtype.newbyteorder("="))
    return params


def average_params(checkpoints: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean; trainable flags are taken from the first checkpoint."""
    if not checkpoints:
        raise ContractError("need at least one checkpoint to average")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        if other.names() != first.names():
            raise ContractError("checkpoints have different parameter names")
        for name in first:
            if other[name].shape != first[name].shape:
                raise ContractError(f"shape mismatch for {name!r}")
    out = ModelParams()
    n = len(checkpoints)
    for name, t in first.items():
        # offsets from the first checkpoint keep identical inputs bit-exact
        delta = sum(c[name].data - t.data for c in checkpoints[1:])
        out.add(name, t.data + delta / n, t.requires_grad, dtype=t.data.dtype)
    return out


def average_checkpoints(paths: Sequence[str | Path]) -> ModelParams:
    return average_params([load_checkpoint(p) for p in paths])
