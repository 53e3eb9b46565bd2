"""Binary formats for weights (TMSW), features (TMSF) and embeddings (TMSE).

All integers are unsigned 32-bit little-endian. A TMSW archive is::

    b"TMSW" | version
    repeated: name_len | name (UTF-8) | rank | dims[rank] | dtype tag | payload
    sha256(canonical config text)            # 32 bytes, always last

Dtype tag 0 is float32, 1 is float64. Records appear in graph order, so
saving the same model twice gives identical bytes.
"""
from __future__ import annotations

import dataclasses
import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import ArchiveError, ConfigHashMismatchError, TruncatedArchiveError, ValidationError
from .graph import FORMAT_VERSION, ModelGraph, build_model, config_hash, map_arrays, named_arrays, validate_config

WEIGHTS_MAGIC = b"TMSW"
FEATURES_MAGIC = b"TMSF"
EMBEDDING_MAGIC = b"TMSE"
HASH_BYTES = 32

_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathOrFile = Union[str, os.PathLike, BinaryIO]


def _write(dest: PathOrFile, data: bytes) -> None:
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        with open(dest, "wb") as fh:
            fh.write(data)


def _read(src: PathOrFile) -> bytes:
    if hasattr(src, "read"):
        return src.read()
    with open(src, "rb") as fh:
        return fh.read()


def dump_weights(model: ModelGraph) -> bytes:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", model.format_version))
    seen = set()
    for name, arr in named_arrays(model):
        if name in seen:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        seen.add(name)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _TAGS:
            raise ArchiveError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<I", _TAGS[dtype]))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    buf.write(model.config_hash)
    return buf.getvalue()


def save_weights(model: ModelGraph, destination: PathOrFile) -> None:
    _write(destination, dump_weights(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedArchiveError(f"archive truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def parse_weights(data: bytes) -> tuple[int, dict[str, np.ndarray], bytes]:
    """Decode a TMSW archive into (version, tensors, config hash)."""
    r = _Reader(data)
    if r.take(4) != WEIGHTS_MAGIC:
        raise ArchiveError("bad magic: not a TMSW weight archive")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {version} (expected {FORMAT_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    while r.remaining > HASH_BYTES:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        tag = r.u32()
        if tag not in _DTYPES:
            raise ArchiveError(f"{name}: unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(count * dtype.itemsize)
        if name in tensors:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims)
    digest = r.take(HASH_BYTES)
    return version, tensors, digest


def _skeleton(config: dict, topology: str) -> ModelGraph:
    from .reparam import reparameterize_model

    graph = build_model(config, seed=0, dtype=np.float64, calibrate=False)
    return reparameterize_model(graph) if topology == "rep" else graph


def load_weights(config: dict, source: PathOrFile, dtype=None) -> ModelGraph:
    """Rebuild a graph from ``config`` and a TMSW archive.

    The topology (regular or rep) is recognised from the tensor names. With
    ``dtype=None`` the stored precision is kept; an explicit ``dtype`` must
    match it, so a float64 archive is never silently narrowed.
    """
    _, tensors, digest = parse_weights(_read(source))
    cfg = validate_config(config)
    if digest != config_hash(cfg):
        raise ConfigHashMismatchError("archive was saved with a different config")
    stored = {a.dtype for a in tensors.values()}
    if len(stored) > 1:
        raise ArchiveError("archive mixes float32 and float64 tensors")
    if dtype is None:
        dtype = next(iter(stored), np.dtype("<f4"))
    dtype = np.dtype(dtype)
    if stored and stored != {dtype.newbyteorder("<")}:
        raise ArchiveError(
            f"archive holds {', '.join(sorted(str(d) for d in stored))}; refusing to load as {dtype}"
        )
    for topology in ("regular", "rep"):
        skel = _skeleton(config, topology)
        names = [n for n, _ in named_arrays(skel)]
        if set(names) == set(tensors):
            break
    else:
        raise ArchiveError("tensor names match neither the regular nor the rep graph of this config")

    def fill(name: str, old: np.ndarray) -> np.ndarray:
        new = tensors[name]
        if new.shape != old.shape:
            raise ArchiveError(f"{name}: shape {new.shape} != expected {old.shape}")
        return new.copy()

    return dataclasses.replace(map_arrays(skel, fill), seed=None)


# --------------------------------------------------------------------------
# features and embeddings


def save_features(x: np.ndarray, destination: PathOrFile) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError("features", "expected (channels, frames)")
    _write(destination, FEATURES_MAGIC + struct.pack("<II", *x.shape) + x.astype("<f4").tobytes())


def load_features(source: PathOrFile) -> np.ndarray:
    data = _read(source)
    if data[:4] != FEATURES_MAGIC:
        raise ArchiveError("bad magic: not a TMSF feature file")
    if len(data) < 12:
        raise TruncatedArchiveError("feature header truncated")
    channels, frames = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != channels * frames * 4:
        raise ArchiveError(
            f"size mismatch: header says {channels}x{frames} floats, payload holds {len(body) / 4:g}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(channels, frames).astype(np.float32)


def save_embedding(vector: np.ndarray, destination: PathOrFile) -> None:
    v = np.asarray(vector).reshape(-1)
    _write(destination, EMBEDDING_MAGIC + struct.pack("<I", v.shape[0]) + v.astype("<f4").tobytes())


def load_embedding(source: PathOrFile) -> np.ndarray:
    data = _read(source)
    if data[:4] != EMBEDDING_MAGIC:
        raise ArchiveError("bad magic: not a TMSE embedding file")
    if len(data) < 8:
        raise TruncatedArchiveError("embedding header truncated")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) - 8 != 4 * n:
        raise ArchiveError(f"size mismatch: header says {n} floats, payload holds {(len(data) - 8) / 4:g}")
    return np.frombuffer(data[8:], dtype="<f4").astype(np.float32)
