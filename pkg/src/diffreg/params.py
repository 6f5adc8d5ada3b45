"""Seeded weight streams and the binary model-parameter container.

File layout (all little-endian)::

    b"PDNW"  u16 version  u32 tensor_count
    repeated tensor_count times:
        u16 name_len, utf-8 name, u8 rank, u32 dims[rank], f32 payload (row-major)

Weights are rounded to float32 when they are drawn, so an in-memory model and
its file round trip are bit-identical. Integer and real hyperparameters are
stored as rank-1 tensors of four float32 values, each holding 16 bits of the
64-bit pattern (names end in ``:u64`` / ``:f64``); every 16-bit chunk is exact
in float32.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IoFailure, MalformedFile

MAGIC = b"PDNW"
VERSION = 1
_MASK64 = (1 << 64) - 1


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 stream identified by ``(seed, name)``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & _MASK64, key])))


def uniform_init(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    """``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` rounded to float32, held as float64."""
    bound = 1.0 / np.sqrt(fan_in)
    w = named_rng(seed, name).uniform(-bound, bound, size=shape)
    return w.astype(np.float32).astype(np.float64)


def _u64_to_chunks(value: int) -> np.ndarray:
    value &= _MASK64
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def _chunks_to_u64(chunks) -> int:
    vals = [int(c) for c in np.asarray(chunks, dtype=np.float32)]
    return sum(v << (16 * i) for i, v in enumerate(vals))


def encode_scalar(value) -> tuple[str, np.ndarray]:
    if isinstance(value, (bool, np.bool_)):
        return "u64", _u64_to_chunks(int(value))
    if isinstance(value, (int, np.integer)):
        return "u64", _u64_to_chunks(int(value))
    bits = struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return "f64", _u64_to_chunks(bits)


def decode_scalar(kind: str, chunks):
    raw = _chunks_to_u64(chunks)
    if kind == "u64":
        return raw
    if kind == "f64":
        return struct.unpack("<d", struct.pack("<Q", raw))[0]
    raise MalformedFile(f"unknown scalar kind {kind!r}")


class ModelParams:
    """Named float tensors plus named scalar hyperparameters."""

    def __init__(self, tensors: dict | None = None, scalars: dict | None = None):
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.scalars: dict[str, int | float] = dict(scalars or {})

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.scalars != other.scalars or self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape
            and np.array_equal(self.tensors[k], other.tensors[k])
            for k in self.tensors
        )

    def subset(self, prefix: str) -> "ModelParams":
        p = prefix + "."
        return ModelParams(
            {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)},
            {k[len(p):]: v for k, v in self.scalars.items() if k.startswith(p)},
        )

    def merge(self, prefix: str, other: "ModelParams") -> "ModelParams":
        for k, v in other.tensors.items():
            self.tensors[f"{prefix}.{k}"] = v
        for k, v in other.scalars.items():
            self.scalars[f"{prefix}.{k}"] = v
        return self

    def to_bytes(self) -> bytes:
        entries = []
        for name in sorted(self.tensors):
            entries.append((name, np.asarray(self.tensors[name], dtype=np.float32)))
        for name in sorted(self.scalars):
            kind, chunks = encode_scalar(self.scalars[name])
            entries.append((f"{name}:{kind}", chunks))
        out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
        for name, arr in entries:
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if len(data) < 10 or data[:4] != MAGIC:
            raise MalformedFile("not a model-parameter file (bad magic)")
        version, count = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise MalformedFile(f"unsupported version {version}")
        pos = 10
        tensors, scalars = {}, {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", data, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
                pos += 4 * size
                if name.endswith(":u64") or name.endswith(":f64"):
                    base, kind = name.rsplit(":", 1)
                    scalars[base] = decode_scalar(kind, arr)
                else:
                    tensors[name] = arr.astype(np.float64)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise MalformedFile(f"truncated or corrupt parameter file: {exc}") from exc
        if pos != len(data):
            raise MalformedFile("trailing bytes after last tensor")
        return cls(tensors, scalars)

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ModelParams":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return cls.from_bytes(data)


def derive_seed(seed: int, name: str) -> int:
    """A 63-bit child seed for the sub-model called ``name``."""
    state = np.random.SeedSequence([int(seed) & _MASK64, zlib.crc32(name.encode("utf-8"))])
    return int(state.generate_state(1, np.uint64)[0] >> np.uint64(1))
