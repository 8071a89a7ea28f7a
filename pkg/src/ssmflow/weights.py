"""Versioned binary weight container.

Layout (all integers little-endian uint32)::

    b"SSMF" | version | config_len | config text (utf-8, key = value lines)
    | n_params | n_params * (name_len | name | rank | extents... | float32 LE data)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"SSMF"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Base class for unreadable weight files."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class ConfigMismatchError(WeightFormatError):
    def __init__(self, fields: list[str], stored: ModelConfig, expected: ModelConfig):
        self.fields = fields
        detail = ", ".join(f"{f}: file={getattr(stored, f)!r} expected={getattr(expected, f)!r}" for f in fields)
        super().__init__(f"config mismatch in {detail}")


@dataclass
class WeightStore:
    params: dict[str, np.ndarray]
    config: ModelConfig
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype="<f4") for k, v in self.params.items()}

    @classmethod
    def from_model(cls, model) -> WeightStore:
        return cls({k: v.copy() for k, v in model.state_dict().items()}, model.cfg)

    def apply_to(self, model) -> None:
        model.load_state_dict(self.params)

    def equals(self, other: WeightStore) -> bool:
        if self.config != other.config or self.params.keys() != other.params.keys():
            return False
        return all(
            a.shape == other.params[k].shape and a.tobytes() == other.params[k].tobytes()
            for k, a in self.params.items()
        )


def save_weights(store: WeightStore, path: str | Path) -> None:
    cfg = store.config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", store.version, len(cfg)), cfg, struct.pack("<I", len(store.params))]
    for name, arr in store.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: truncated while reading {what} (need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path: str | Path, expected: ModelConfig | None = None) -> WeightStore:
    """Read a weight file; with ``expected`` the stored config must match exactly."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} not supported (expected {FORMAT_VERSION})")
    cfg_text = r.take(r.u32("config length"), "config").decode("utf-8")
    config = ModelConfig.from_text(cfg_text)
    params = {}
    for i in range(r.u32("parameter count")):
        name = r.take(r.u32(f"name length of record {i}"), f"name of record {i}").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        params[name] = data.copy()
    if r.pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last record")
    if expected is not None:
        diff = config.diff(expected)
        if diff:
            raise ConfigMismatchError(diff, config, expected)
    return WeightStore(params, config, version)
