"""Reading and writing safetensors checkpoints, single-file or sharded.

Layout: 8-byte little-endian header length ``N``, ``N`` bytes of UTF-8 JSON
mapping each tensor name to ``{"dtype", "shape", "data_offsets": [begin, end)}``
(offsets relative to the payload that follows), optional ``__metadata__``.
Written headers use sorted keys and no whitespace, so output bytes depend
only on the tensors and metadata.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import NonFiniteError

DTYPE_SIZES = {"BF16": 2, "F16": 2, "F32": 4, "F64": 8}
METADATA_KEY = "__metadata__"
INDEX_SUFFIX = ".safetensors.index.json"
MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointError(Exception):
    pass


class HeaderError(CheckpointError):
    pass


class HeaderEncodingError(HeaderError):
    pass


class OffsetError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class ShardError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


class NotAMatrixError(ValueError):
    pass


class DtypeOverflowError(OverflowError):
    pass


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple
    data: bytes

    def __post_init__(self):
        if self.dtype not in DTYPE_SIZES:
            raise UnknownDtypeError(f"{self.name}: unsupported dtype {self.dtype!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        expected = math.prod(self.shape) * DTYPE_SIZES[self.dtype]
        if len(self.data) != expected:
            raise ValueError(
                f"{self.name}: {len(self.data)} payload bytes, expected {expected} for "
                f"{self.dtype}{list(self.shape)}")


@dataclass(frozen=True)
class TensorInfo:
    dtype: str
    shape: tuple
    begin: int
    end: int
    file: Path
    payload_start: int


@dataclass
class CheckpointManifest:
    tensors: dict
    metadata: dict | None = None
    shard_map: dict | None = None

    def shapes(self):
        return {name: info.shape for name, info in self.tensors.items()}


def _parse_header(path):
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise HeaderError(f"{path}: file is {size} bytes, too short for the 8-byte header length")
        (n,) = struct.unpack("<Q", prefix)
        if n == 0 or n > MAX_HEADER_BYTES or 8 + n > size:
            raise HeaderError(f"{path}: header length {n} is invalid for a {size}-byte file")
        raw = fh.read(n)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderEncodingError(f"{path}: header is not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None and not (
            isinstance(metadata, dict) and all(isinstance(v, str) for v in metadata.values())):
        raise HeaderError(f"{path}: {METADATA_KEY} must map strings to strings")

    payload_start = 8 + n
    payload_len = size - payload_start
    tensors = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise HeaderError(f"{path}: malformed entry for tensor {name!r}")
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        if dtype not in DTYPE_SIZES:
            raise UnknownDtypeError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        if not isinstance(shape, list) or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
            raise HeaderError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        if not (isinstance(offsets, list) and len(offsets) == 2
                and all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)):
            raise OffsetError(f"{path}: tensor {name!r} has invalid data_offsets {offsets!r}")
        begin, end = offsets
        if not 0 <= begin <= end <= payload_len:
            raise OffsetError(
                f"{path}: tensor {name!r} range [{begin}, {end}) is outside the {payload_len}-byte payload")
        if end - begin != math.prod(shape) * DTYPE_SIZES[dtype]:
            raise OffsetError(
                f"{path}: tensor {name!r} spans {end - begin} bytes but {dtype}{shape} needs "
                f"{math.prod(shape) * DTYPE_SIZES[dtype]}")
        tensors[name] = TensorInfo(dtype, tuple(shape), begin, end, Path(path), payload_start)

    ordered = sorted(tensors.items(), key=lambda kv: (kv[1].begin, kv[1].end))
    for (prev_name, prev), (name, info) in zip(ordered, ordered[1:]):
        if info.begin < prev.end:
            raise OffsetError(f"{path}: tensors {prev_name!r} and {name!r} overlap")
    return tensors, metadata


class Checkpoint:
    """A parsed checkpoint; tensor payloads are read from disk on demand."""

    def __init__(self, manifest, path):
        self.manifest = manifest
        self.path = Path(path)

    def __contains__(self, name):
        return name in self.manifest.tensors

    def __len__(self):
        return len(self.manifest.tensors)

    @property
    def names(self):
        return list(self.manifest.tensors)

    @property
    def sharded(self):
        return self.manifest.shard_map is not None

    def info(self, name):
        return self.manifest.tensors[name]

    def read_bytes(self, name):
        info = self.manifest.tensors[name]
        with open(info.file, "rb") as fh:
            fh.seek(info.payload_start + info.begin)
            data = fh.read(info.end - info.begin)
        if len(data) != info.end - info.begin:
            raise OffsetError(f"{info.file}: short read for tensor {name!r}")
        return data

    def record(self, name):
        info = self.manifest.tensors[name]
        return TensorRecord(name, info.dtype, info.shape, self.read_bytes(name))

    def records(self):
        for name in self.manifest.tensors:
            yield self.record(name)

    def matrix(self, name):
        return to_working(self.record(name))

    def array(self, name):
        return decode(self.record(name))


def _find_index(path):
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*" + INDEX_SUFFIX))
        if len(found) == 1:
            return found[0], None
        singles = sorted(path.glob("*.safetensors"))
        if not found and len(singles) == 1:
            return None, singles[0]
        raise CheckpointError(f"{path}: expected exactly one index file or one .safetensors file")
    if path.name.endswith(INDEX_SUFFIX):
        return path, None
    sibling = path.with_name(path.name + ".index.json")
    if not path.exists() and sibling.exists():
        return sibling, None
    return None, path


def read_checkpoint(path):
    """Open a checkpoint: a ``.safetensors`` file, a shard index, or a directory holding one."""
    index_path, single = _find_index(path)
    if index_path is None:
        if not single.exists():
            raise FileNotFoundError(f"{single}: no such checkpoint")
        tensors, metadata = _parse_header(single)
        ordered = dict(sorted(tensors.items(), key=lambda kv: kv[0]))
        return Checkpoint(CheckpointManifest(ordered, metadata), single)

    try:
        index = json.loads(Path(index_path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShardError(f"{index_path}: unreadable shard index ({exc})") from None
    weight_map = index.get("weight_map") if isinstance(index, dict) else None
    if not isinstance(weight_map, dict) or not all(isinstance(v, str) for v in weight_map.values()):
        raise ShardError(f"{index_path}: shard index lacks a string-valued 'weight_map'")

    tensors, metadata = {}, {}
    for shard in sorted(set(weight_map.values())):
        shard_path = Path(index_path).parent / shard
        if not shard_path.exists():
            raise ShardError(f"{index_path}: shard {shard!r} is missing")
        shard_tensors, shard_meta = _parse_header(shard_path)
        expected = {n for n, s in weight_map.items() if s == shard}
        if set(shard_tensors) != expected:
            extra = sorted(set(shard_tensors) ^ expected)
            raise ShardError(f"{index_path}: weight_map disagrees with shard {shard!r} on {extra}")
        tensors.update(shard_tensors)
        metadata.update(shard_meta or {})
    ordered = dict(sorted(tensors.items(), key=lambda kv: kv[0]))
    shard_map = {name: weight_map[name] for name in ordered}
    return Checkpoint(CheckpointManifest(ordered, metadata or None, shard_map), index_path)


def _header_bytes(records, metadata):
    header = {}
    offset = 0
    for r in records:
        header[r.name] = {"dtype": r.dtype, "shape": list(r.shape),
                          "data_offsets": [offset, offset + len(r.data)]}
        offset += len(r.data)
    if metadata:
        header[METADATA_KEY] = dict(metadata)
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _write_file(path, records, metadata):
    header = _header_bytes(records, metadata)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for r in records:
            fh.write(r.data)


def _greedy_groups(records, limit):
    groups, current, size = [], [], 0
    for r in records:
        if current and size + len(r.data) > limit:
            groups.append(current)
            current, size = [], 0
        current.append(r)
        size += len(r.data)
    if current:
        groups.append(current)
    return groups


def shard_filename(stem, i, n):
    return f"{stem}-{i:05d}-of-{n:05d}.safetensors"


def write_checkpoint(records, path, metadata=None, shard_size_limit=None, shard_groups=None):
    """Write records sorted by name; returns the list of files written.

    With ``shard_size_limit`` (bytes) tensors are split greedily in name order;
    ``shard_groups`` (lists of names) fixes the split explicitly. Either way the
    shards are ``<stem>-0000i-of-0000n.safetensors`` next to ``<stem>.safetensors.index.json``.
    """
    records = sorted(records, key=lambda r: r.name)
    names = [r.name for r in records]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DuplicateTensorError(f"duplicate tensor names: {dupes}")
    path = Path(path)
    if shard_size_limit is None and shard_groups is None:
        _write_file(path, records, metadata)
        return [path]

    if shard_groups is not None:
        by_name = {r.name: r for r in records}
        grouped = [sorted(g) for g in shard_groups if g]
        covered = [n for g in grouped for n in g]
        if sorted(covered) != names:
            raise ShardError("shard_groups must cover every tensor exactly once")
        groups = [[by_name[n] for n in g] for g in sorted(grouped)]
    else:
        if shard_size_limit < 1:
            raise ValueError("shard_size_limit must be positive")
        groups = _greedy_groups(records, shard_size_limit)

    stem = path.name[:-len(".safetensors")] if path.name.endswith(".safetensors") else path.name
    written, weight_map = [], {}
    for i, group in enumerate(groups, start=1):
        fname = shard_filename(stem, i, len(groups))
        _write_file(path.with_name(fname), group, metadata)
        written.append(path.with_name(fname))
        weight_map.update({r.name: fname for r in group})
    index = {"metadata": {"total_size": sum(len(r.data) for r in records)}, "weight_map": weight_map}
    index_path = path.with_name(stem + INDEX_SUFFIX)
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(index_path)
    return written


def decode(record):
    """Payload as a float64 array of the record's shape (exact widening)."""
    if record.dtype == "BF16":
        bits = np.frombuffer(record.data, dtype="<u2").astype("<u4") << 16
        out = bits.view("<f4").astype(np.float64)
    elif record.dtype == "F16":
        out = np.frombuffer(record.data, dtype="<f2").astype(np.float64)
    elif record.dtype == "F32":
        out = np.frombuffer(record.data, dtype="<f4").astype(np.float64)
    elif record.dtype == "F64":
        out = np.frombuffer(record.data, dtype="<f8").astype(np.float64)
    else:
        raise UnknownDtypeError(f"{record.name}: unsupported dtype {record.dtype!r}")
    return out.reshape(record.shape)


def to_working(record):
    """Widen a 2-D record to a float64 matrix, rejecting non-finite payloads."""
    if len(record.shape) != 2:
        raise NotAMatrixError(f"{record.name}: shape {list(record.shape)} is not 2-D")
    m = decode(record)
    if not np.isfinite(m).all():
        bad = int(np.count_nonzero(~np.isfinite(m)))
        raise NonFiniteError(f"{record.name}: {bad} non-finite values in checkpoint payload")
    return m


def _bf16_bits(f32):
    # round the low 16 bits of the f32 encoding to nearest, ties to even
    bits = f32.view("<u4").astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype("<u2")


def _overflow(name, dtype, values, narrowed):
    bad = np.flatnonzero(~np.isfinite(narrowed))
    if bad.size:
        value = values.ravel()[bad[0]]
        raise DtypeOverflowError(f"{name}: value {value!r} exceeds the finite range of {dtype}")


def from_working(m, dtype, name="tensor"):
    """Narrow a float64 array to ``dtype`` with round-to-nearest-even.

    BF16 goes through float32 first (f64 -> f32 -> bf16, each step RNE).
    """
    a = np.asarray(m, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name}: cannot encode non-finite values")
    with np.errstate(over="ignore"):
        if dtype == "F64":
            data = a.astype("<f8").tobytes()
        elif dtype == "F32":
            f32 = a.astype("<f4")
            _overflow(name, dtype, a, f32)
            data = f32.tobytes()
        elif dtype == "F16":
            f16 = a.astype("<f2")
            _overflow(name, dtype, a, f16)
            data = f16.tobytes()
        elif dtype == "BF16":
            f32 = a.astype("<f4")
            _overflow(name, dtype, a, f32)
            bits = _bf16_bits(f32)
            _overflow(name, dtype, a, (bits.astype("<u4") << 16).view("<f4"))
            data = bits.tobytes()
        else:
            raise UnknownDtypeError(f"{name}: unsupported dtype {dtype!r}")
    return TensorRecord(name, dtype, a.shape, data)
