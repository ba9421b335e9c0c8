"""Checkpoint container: JSON header plus a named-tensor payload.

Layout (little-endian)::

    b"OCKP" | version u16 | header_len u32 | header (UTF-8 JSON) | payload | CRC32(payload) u32

The header lists every tensor as ``{name, shape, dtype, offset}``; ``dtype`` is
``"f4"`` for 32-bit runs and ``"f8"`` for 64-bit runs so that a 64-bit model
reloads bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, FormatError
from .vit import ViTConfig

MAGIC = b"OCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


@dataclass
class Checkpoint:
    stage: str
    model_config: ViTConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            code = _DTYPES.get(arr.dtype, "f8")
            raw = np.ascontiguousarray(arr, dtype="<" + code).tobytes()
            index.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "format_version": VERSION,
            "stage": self.stage,
            "model_config": dataclasses.asdict(self.model_config),
            "rng_state": self.rng_state,
            "meta": self.meta,
            "created_by": f"dualssl {__version__}",
            "tensors": index,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(chunks)
        return (_PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload
                + struct.pack("<I", zlib.crc32(payload)))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _PREFIX.size or blob[:4] != MAGIC:
            raise FormatError(f"not a checkpoint: expected magic {MAGIC!r}, found {blob[:4]!r}")
        _, version, hlen = _PREFIX.unpack_from(blob)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size + hlen
        if len(blob) < start + 4:
            raise FormatError("checkpoint truncated inside the header")
        try:
            header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from None
        payload = blob[start:-4]
        (crc,) = struct.unpack("<I", blob[-4:])
        if zlib.crc32(payload) != crc:
            raise FormatError("checkpoint CRC32 mismatch: payload is corrupted or truncated")
        tensors = OrderedDict()
        for entry in header["tensors"]:
            dt = np.dtype("<" + entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + count * dt.itemsize
            if end > len(payload):
                raise FormatError(f"tensor {entry['name']} runs past the end of the payload")
            arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
            tensors[entry["name"]] = arr.astype(dt.newbyteorder("=")).reshape(entry["shape"])
        return cls(stage=header["stage"], model_config=ViTConfig(**header["model_config"]),
                   tensors=tensors, rng_state=header.get("rng_state", {}), meta=header.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
