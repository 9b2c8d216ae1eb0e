"""Binary file formats: datasets (GIMD), activation caches (GIMA), and
checkpoints (GIMC).

All three share conventions: a 4-byte magic, little-endian fixed-width
header fields, and raw row-major float64 payloads, so a round trip is
bitwise exact. Headers are validated before any payload is read, with
distinct errors for a wrong magic, a truncated file, and implausible
dimension counts. Byte-level layouts are documented in the README.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC_DATASET = b"GIMD"
MAGIC_CACHE = b"GIMA"
MAGIC_CHECKPOINT = b"GIMC"

FORMAT_VERSION = 1

_MAX_RANK = 16
_MAX_DIM = 1 << 48
_MAX_ELEMENTS = 1 << 53

_DTYPE_F64 = 0
_DTYPE_I64 = 1


class FormatError(ValueError):
    """Base class for file-format violations."""


class MagicError(FormatError):
    def __init__(self, expected: bytes, got: bytes):
        super().__init__(f"bad magic: expected {expected!r}, got {got!r}")


class TruncationError(FormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated file: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class DimOverflowError(FormatError):
    pass


def _check_dims(rank: int, dims: tuple[int, ...]) -> None:
    if rank > _MAX_RANK:
        raise DimOverflowError(f"rank {rank} exceeds limit {_MAX_RANK}")
    total = 1
    for d in dims:
        if d < 0 or d > _MAX_DIM:
            raise DimOverflowError(f"dimension {d} out of range")
        total *= max(d, 1)
        if total > _MAX_ELEMENTS:
            raise DimOverflowError(f"element count exceeds limit {_MAX_ELEMENTS}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise TruncationError(self.off + size, len(self.buf))
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals

    def array(self, dtype, count: int) -> np.ndarray:
        size = count * np.dtype(dtype).itemsize
        if self.off + size > len(self.buf):
            raise TruncationError(self.off + size, len(self.buf))
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off).copy()
        self.off += size
        return arr


def _pack_array_block(arr: np.ndarray, dtype_code: int) -> bytes:
    dims = arr.shape
    head = struct.pack("<BH", dtype_code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *dims)
    return head + np.ascontiguousarray(arr).tobytes()


def _read_array_block(r: _Reader) -> np.ndarray:
    dtype_code, rank = r.take("<BH")
    dims = r.take(f"<{rank}Q") if rank else ()
    _check_dims(rank, dims)
    dtype = "<f8" if dtype_code == _DTYPE_F64 else "<i8"
    count = int(np.prod(dims)) if dims else 1
    arr = r.array(dtype, count).reshape(dims)
    return arr


# -- GIMD: dataset files ---------------------------------------------------------
#
# magic "GIMD" | u32 version | u8 label_flag | array block (data, f64)
# | [array block (labels, i64)]
# where an array block is: u8 dtype code (0=f64, 1=i64) | u16 rank
# | rank x u64 dims | raw little-endian payload.


def write_dataset(path, data: np.ndarray, labels: np.ndarray | None = None) -> None:
    data = np.ascontiguousarray(data, dtype=np.float64)
    out = MAGIC_DATASET + struct.pack("<IB", FORMAT_VERSION, 1 if labels is not None else 0)
    out += _pack_array_block(data, _DTYPE_F64)
    if labels is not None:
        out += _pack_array_block(np.ascontiguousarray(labels, dtype=np.int64), _DTYPE_I64)
    with open(path, "wb") as f:
        f.write(out)


def read_dataset(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC_DATASET:
        raise MagicError(MAGIC_DATASET, buf[:4])
    r = _Reader(buf)
    r.take("<4s")
    version, label_flag = r.take("<IB")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    data = _read_array_block(r)
    labels = _read_array_block(r) if label_flag else None
    return data, labels


# -- GIMA: activation cache stores -------------------------------------------------
#
# magic "GIMA" | u32 version | u32 module_index | u64 sample_count
# | u16 sample_rank | rank x u64 sample_dims | samples x prod(dims) f64.


@dataclass
class ActivationCacheStore:
    """Frozen-module outputs persisted per sample, memory-mapped on open."""
    module_index: int
    sample_count: int
    sample_shape: tuple[int, ...]
    _mm: np.memmap

    def read(self, sample_ids) -> np.ndarray:
        """Rows for the given sample ids, as a fresh [len, *sample_shape] array."""
        ids = np.asarray(sample_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.sample_count):
            raise IndexError(f"cache read: sample id out of range [0, {self.sample_count})")
        return np.array(self._mm[ids], dtype=np.float64)

    def read_all(self) -> np.ndarray:
        return np.array(self._mm, dtype=np.float64)


def write_cache(path, module_index: int, activations: np.ndarray) -> None:
    """Persist one module's outputs for the whole dataset: [n, *sample_shape]."""
    arr = np.ascontiguousarray(activations, dtype=np.float64)
    if arr.ndim < 2:
        raise FormatError("cache payload must be [samples, ...]")
    sample_shape = arr.shape[1:]
    head = MAGIC_CACHE + struct.pack("<IIQ", FORMAT_VERSION, module_index, arr.shape[0])
    head += struct.pack("<H", len(sample_shape))
    head += struct.pack(f"<{len(sample_shape)}Q", *sample_shape)
    with open(path, "wb") as f:
        f.write(head)
        f.write(arr.tobytes())


def open_cache(path) -> ActivationCacheStore:
    with open(path, "rb") as f:
        head = f.read(4 + 4 + 4 + 8 + 2)
    if head[:4] != MAGIC_CACHE:
        raise MagicError(MAGIC_CACHE, head[:4])
    if len(head) < 22:
        raise TruncationError(22, len(head))
    version, module_index, count = struct.unpack_from("<IIQ", head, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    (rank,) = struct.unpack_from("<H", head, 20)
    with open(path, "rb") as f:
        f.seek(22)
        dim_bytes = f.read(8 * rank)
    if len(dim_bytes) < 8 * rank:
        raise TruncationError(22 + 8 * rank, 22 + len(dim_bytes))
    dims = struct.unpack(f"<{rank}Q", dim_bytes)
    _check_dims(rank, dims)
    offset = 22 + 8 * rank
    expected = offset + count * int(np.prod(dims)) * 8
    actual = os.path.getsize(path)
    if actual < expected:
        raise TruncationError(expected, actual)
    mm = np.memmap(path, dtype="<f8", mode="r", offset=offset,
                   shape=(count,) + tuple(dims))
    return ActivationCacheStore(module_index, count, tuple(dims), mm)


# -- GIMC: checkpoints ----------------------------------------------------------------
#
# magic "GIMC" | u32 version | u16 digest_len | digest utf8 | u32 n_params
# | n x (u16 name_len | name utf8 | array block f64)
# | u8 optimizer_flag | [f64 lr, beta1, beta2, eps | u64 step
#   | n x (array block m | array block v)]  (same parameter order)


def save_checkpoint(path, params: dict[str, np.ndarray], config_digest: str,
                    optimizer_state: dict | None = None) -> None:
    names = sorted(params)
    digest = config_digest.encode("utf-8")
    out = MAGIC_CHECKPOINT + struct.pack("<IH", FORMAT_VERSION, len(digest)) + digest
    out += struct.pack("<I", len(names))
    for name in names:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += _pack_array_block(np.asarray(params[name], dtype=np.float64), _DTYPE_F64)
    if optimizer_state is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack("<4d", optimizer_state["lr"], optimizer_state["beta1"],
                           optimizer_state["beta2"], optimizer_state["eps"])
        out += struct.pack("<Q", optimizer_state["step"])
        for name in names:
            out += _pack_array_block(np.asarray(optimizer_state["m"][name]), _DTYPE_F64)
            out += _pack_array_block(np.asarray(optimizer_state["v"][name]), _DTYPE_F64)
    with open(path, "wb") as f:
        f.write(out)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, dict | None]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC_CHECKPOINT:
        raise MagicError(MAGIC_CHECKPOINT, buf[:4])
    r = _Reader(buf)
    r.take("<4s")
    version, dlen = r.take("<IH")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = bytes(r.take(f"<{dlen}s")[0]).decode("utf-8") if dlen else ""
    (n_params,) = r.take("<I")
    params: dict[str, np.ndarray] = {}
    names = []
    for _ in range(n_params):
        (nlen,) = r.take("<H")
        name = bytes(r.take(f"<{nlen}s")[0]).decode("utf-8")
        params[name] = _read_array_block(r)
        names.append(name)
    (opt_flag,) = r.take("<B")
    optimizer_state = None
    if opt_flag:
        lr, b1, b2, eps = r.take("<4d")
        (step,) = r.take("<Q")
        m, v = {}, {}
        for name in names:
            m[name] = _read_array_block(r)
            v[name] = _read_array_block(r)
        optimizer_state = {"lr": lr, "beta1": b1, "beta2": b2, "eps": eps,
                           "step": step, "m": m, "v": v}
    return params, digest, optimizer_state
