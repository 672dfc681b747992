"""Binary weights file.

Layout (little-endian)::

    b"VAPW" | u32 version | u32 len + UTF-8 JSON model config | u32 n_tensors
    per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f32 values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from vap.model.network import ModelConfig, param_shapes

MAGIC = b"VAPW"
VERSION = 1


class WeightsFileError(ValueError):
    pass


def save_weights(weights, path, cfg: ModelConfig) -> None:
    shapes = dict(param_shapes(cfg))
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if name not in shapes or arr.shape != shapes[name]:
            raise WeightsFileError(f"tensor {name}: shape {arr.shape} inconsistent with config")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsFileError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Read a weights file, returning ``(weights, config)``.

    Raises :class:`WeightsFileError` on bad magic, truncation, a tensor whose
    shape disagrees with the stored config, or a CRC mismatch. Nothing is
    returned unless the whole file checks out.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4 + 4:
        raise WeightsFileError("file truncated while reading header")
    if buf[:4] != MAGIC:
        raise WeightsFileError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf[:-4] if len(buf) >= 12 else buf)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise WeightsFileError(f"unsupported format version {version}")
    try:
        cfg = ModelConfig(**json.loads(r.take(r.u32("config length"), "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise WeightsFileError(f"corrupt model config: {exc}") from exc
    expected = dict(param_shapes(cfg))
    n = r.u32("tensor count")
    weights = {}
    for _ in range(n):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise WeightsFileError(f"tensor {name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        if name not in expected:
            raise WeightsFileError(f"tensor {name}: not part of the configured model")
        if tuple(dims) != expected[name]:
            raise WeightsFileError(f"tensor {name}: shape {tuple(dims)} does not match config {expected[name]}")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * count, f"values of {name}")
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    missing = expected.keys() - weights.keys()
    if missing:
        raise WeightsFileError(f"tensor {sorted(missing)[0]}: missing from file")
    if r.pos != len(r.buf) or len(buf) - 4 != r.pos:
        raise WeightsFileError("trailing bytes after last tensor")
    (crc,) = struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(buf[:-4]):
        raise WeightsFileError("CRC mismatch: file corrupt")
    return weights, cfg
