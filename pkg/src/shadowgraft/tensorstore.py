"""Safetensors checkpoints: strict header parsing, lazy positioned reads, streamed writes.

Tensor data is never loaded when a checkpoint is opened. Reads go through
positioned ``readinto`` calls on the shard file, so resident memory is bounded
by the size of the chunks callers ask for, not by the size of the file.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

DEFAULT_MAX_HEADER_BYTES = 100 * 1024 * 1024
DEFAULT_TENSOR_BUDGET = 64 * 1024 * 1024
INDEX_SUFFIX = ".index.json"


class CheckpointFormatError(ValueError):
    """A checkpoint file (or index) does not follow the format."""

    def __init__(self, msg: str, path: str | os.PathLike | None = None, offset: int | None = None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)


class NonFiniteError(ArithmeticError):
    """Raised when non-finite values are produced under a reject-non-finite policy."""


class ElementType(enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    I64 = "I64"
    I32 = "I32"
    I16 = "I16"
    I8 = "I8"
    U8 = "U8"
    BOOL = "BOOL"

    @property
    def width(self) -> int:
        return _WIDTH[self]

    @property
    def arithmetic(self) -> bool:
        return self in _ARITHMETIC

    @property
    def storage_dtype(self) -> np.dtype:
        """Little-endian numpy dtype of the stored words (BF16 is raw ``uint16``)."""
        return _STORAGE[self]

    @classmethod
    def parse(cls, value: "ElementType | str") -> "ElementType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown dtype {value!r}") from None


_WIDTH = {
    ElementType.F64: 8, ElementType.F32: 4, ElementType.F16: 2, ElementType.BF16: 2,
    ElementType.I64: 8, ElementType.I32: 4, ElementType.I16: 2, ElementType.I8: 1,
    ElementType.U8: 1, ElementType.BOOL: 1,
}
_ARITHMETIC = frozenset({ElementType.F64, ElementType.F32, ElementType.F16, ElementType.BF16})
_STORAGE = {
    ElementType.F64: np.dtype("<f8"), ElementType.F32: np.dtype("<f4"),
    ElementType.F16: np.dtype("<f2"), ElementType.BF16: np.dtype("<u2"),
    ElementType.I64: np.dtype("<i8"), ElementType.I32: np.dtype("<i4"),
    ElementType.I16: np.dtype("<i2"), ElementType.I8: np.dtype("i1"),
    ElementType.U8: np.dtype("u1"), ElementType.BOOL: np.dtype("?"),
}


@dataclass(frozen=True)
class ShardInfo:
    path: Path
    header_size: int
    data_start: int
    file_size: int
    metadata: dict[str, str]

    @property
    def name(self) -> str:
        return self.path.name


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: ElementType
    shape: tuple[int, ...]
    offset: int  # relative to the shard's data region
    length: int
    shard: str

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def byte_range(self) -> tuple[int, int]:
        return self.offset, self.length


@dataclass(frozen=True)
class CheckpointView:
    """Immutable, lazily-resolved view over one file or a sharded set of files."""

    path: Path
    tensors: dict[str, TensorEntry]
    shards: tuple[ShardInfo, ...]
    metadata: dict[str, Any] = field(default_factory=dict)
    index_name: str | None = None

    @property
    def sharded(self) -> bool:
        return self.index_name is not None

    def names(self) -> list[str]:
        return list(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> TensorEntry:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"unknown tensor {name!r}") from None

    def __len__(self) -> int:
        return len(self.tensors)

    def shard(self, shard_name: str) -> ShardInfo:
        for s in self.shards:
            if s.name == shard_name:
                return s
        raise KeyError(shard_name)

    def weight_map(self) -> dict[str, str]:
        return {name: e.shard for name, e in self.tensors.items()}

    def read_raw(self, name: str, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Raw little-endian words for elements ``[start, stop)`` of a tensor."""
        entry = self[name]
        n = entry.numel
        stop = n if stop is None else stop
        if not 0 <= start <= stop <= n:
            raise IndexError(f"element range [{start}, {stop}) outside tensor {name!r} of {n} elements")
        width = entry.dtype.width
        out = np.empty(stop - start, dtype=entry.dtype.storage_dtype)
        if stop > start:
            info = self.shard(entry.shard)
            with open(info.path, "rb") as f:
                f.seek(info.data_start + entry.offset + start * width)
                got = f.readinto(memoryview(out).cast("B"))
            if got != (stop - start) * width:
                raise CheckpointFormatError(f"short read on tensor {name!r}", info.path)
        return out

    def read_f64(self, name: str, start: int = 0, stop: int | None = None) -> np.ndarray:
        entry = self[name]
        if not entry.dtype.arithmetic:
            raise TypeError(f"tensor {name!r} has opaque dtype {entry.dtype.value}")
        return promote(self.read_raw(name, start, stop), entry.dtype)

    def iter_raw_chunks(self, name: str, chunk_bytes: int = DEFAULT_TENSOR_BUDGET) -> Iterator[np.ndarray]:
        """Stored words in pieces of at most ``chunk_bytes``; only one piece is alive at a time."""
        entry = self[name]
        step = max(1, chunk_bytes // entry.dtype.width)
        for start in range(0, entry.numel, step):
            yield self.read_raw(name, start, min(entry.numel, start + step))


# ---------------------------------------------------------------- conversions


def promote(raw: np.ndarray, dtype: ElementType | str) -> np.ndarray:
    """Exactly widen stored words of an arithmetic dtype to float64."""
    dtype = ElementType.parse(dtype)
    raw = np.asarray(raw)
    if not dtype.arithmetic:
        raise TypeError(f"opaque dtype {dtype.value}")
    if raw.dtype != dtype.storage_dtype:
        # reinterpret the stored words, never convert them
        raw = np.ascontiguousarray(raw).view(np.uint8).view(dtype.storage_dtype)
    if dtype is ElementType.BF16:
        raw = (raw.astype(np.uint32) << np.uint32(16)).view(np.float32)
    with np.errstate(invalid="ignore"):  # signalling NaNs are quieted, not an error
        return raw.astype(np.float64)


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    # Round-to-odd into a format with >= 2 extra bits makes the later
    # round-to-nearest-even into bf16 free of double rounding.
    with np.errstate(over="ignore", invalid="ignore"):
        y = x.astype(np.float32)
    bits = y.view(np.uint32).copy()
    yd = y.astype(np.float64)
    finite_src = ~np.isnan(x)
    overshoot = finite_src & (np.abs(yd) > np.abs(x))
    bits[overshoot] -= np.uint32(1)
    inexact = finite_src & (yd != x)
    bits[inexact] |= np.uint32(1)
    return bits


def _f64_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    bits = _f64_to_f32_round_to_odd(x).astype(np.uint64)
    lsb = (bits >> np.uint64(16)) & np.uint64(1)
    out = ((bits + np.uint64(0x7FFF) + lsb) >> np.uint64(16)).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        out[nan] = ((bits[nan] >> np.uint64(16)) | np.uint64(0x0040)).astype(np.uint16)
    return out


def demote(values: np.ndarray, target: ElementType | str, reject_nonfinite: bool = False) -> np.ndarray:
    """Round float64 values to ``target`` storage words (IEEE nearest-even).

    Overflow saturates to infinity. With ``reject_nonfinite`` any non-finite
    result raises :class:`NonFiniteError`.
    """
    target = ElementType.parse(target)
    if not target.arithmetic:
        raise TypeError(f"cannot cast to opaque dtype {target.value}")
    values = np.asarray(values, dtype=np.float64)
    if target is ElementType.BF16:
        out = _f64_to_bf16_bits(values.ravel()).reshape(values.shape)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            out = values.astype(target.storage_dtype)
    if reject_nonfinite:
        bad = ~np.isfinite(promote(out, target))
        if bad.any():
            raise NonFiniteError(f"{int(bad.sum())} non-finite value(s) after cast to {target.value}")
    return out


def cast_from_f64(values: np.ndarray, target: ElementType | str, reject_nonfinite: bool = False) -> bytes:
    return demote(values, target, reject_nonfinite).tobytes()


def read_tensor_f64(view: CheckpointView, name: str) -> tuple[np.ndarray, tuple[int, ...]]:
    """Whole tensor promoted to a flat float64 array, plus its shape."""
    entry = view[name]
    if not entry.dtype.arithmetic:
        raise TypeError(f"tensor {name!r} has opaque dtype {entry.dtype.value}")
    return view.read_f64(name), entry.shape


def encode(values: Any, dtype: ElementType | str) -> bytes:
    """Bytes for ``values`` stored as ``dtype`` (rounded for floats, cast for opaque types)."""
    dtype = ElementType.parse(dtype)
    if dtype.arithmetic:
        return cast_from_f64(np.asarray(values, dtype=np.float64), dtype)
    return np.asarray(values).astype(dtype.storage_dtype).tobytes()


# ---------------------------------------------------------------- reading


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ValueError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _read_header(path: Path, max_header_bytes: int) -> tuple[dict, ShardInfo]:
    file_size = path.stat().st_size
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError("file too small for header length", path, 0)
        (n,) = struct.unpack("<Q", prefix)
        if n > max_header_bytes:
            raise CheckpointFormatError(f"header length {n} exceeds cap {max_header_bytes}", path, 0)
        if 8 + n > file_size:
            raise CheckpointFormatError(f"header length {n} runs past end of file", path, 0)
        raw = f.read(n)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError("header is not valid UTF-8", path, 8 + e.start) from None
    try:
        header = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        offset = 8 + len(text[: e.pos].encode("utf-8"))
        raise CheckpointFormatError(f"malformed header JSON: {e.msg}", path, offset) from None
    except ValueError as e:
        raise CheckpointFormatError(f"malformed header: {e}", path, 8) from None
    if not isinstance(header, dict):
        raise CheckpointFormatError("header is not a JSON object", path, 8)
    meta = header.pop("__metadata__", None) or {}
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise CheckpointFormatError("__metadata__ must map strings to strings", path, 8)
    info = ShardInfo(path=path, header_size=n, data_start=8 + n, file_size=file_size, metadata=meta)
    return header, info


def _parse_entries(header: dict, info: ShardInfo) -> list[TensorEntry]:
    path = info.path
    data_size = info.file_size - info.data_start
    entries = []
    for name, decl in header.items():
        if not isinstance(decl, dict):
            raise CheckpointFormatError(f"tensor {name!r}: declaration is not an object", path, 8)
        try:
            dtype = ElementType.parse(decl["dtype"])
            shape = decl["shape"]
            begin, end = decl["data_offsets"]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"tensor {name!r}: bad declaration ({e})", path, 8) from None
        if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
            raise CheckpointFormatError(f"tensor {name!r}: invalid shape {shape!r}", path, 8)
        if not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in (begin, end)) or end < begin:
            raise CheckpointFormatError(f"tensor {name!r}: invalid data_offsets", path, 8)
        length = math.prod(shape) * dtype.width
        if end - begin != length:
            raise CheckpointFormatError(
                f"tensor {name!r}: byte length {end - begin} != {length} implied by shape and dtype", path, 8)
        if end > data_size:
            raise CheckpointFormatError(f"out-of-bounds tensor {name!r}", path, info.data_start + begin)
        entries.append(TensorEntry(name, dtype, tuple(shape), begin, length, info.name))

    cursor = 0
    for e in sorted(entries, key=lambda e: (e.offset, e.offset + e.length)):
        if e.offset < cursor:
            raise CheckpointFormatError(f"overlapping tensor {e.name!r}", path, info.data_start + e.offset)
        if e.offset > cursor:
            raise CheckpointFormatError(f"gap before tensor {e.name!r}", path, info.data_start + cursor)
        cursor = e.offset + e.length
    if cursor != data_size:
        raise CheckpointFormatError(f"{data_size - cursor} trailing byte(s) after last tensor", path,
                                    info.data_start + cursor)
    return entries


def _open_file(path: Path, max_header_bytes: int) -> tuple[list[TensorEntry], ShardInfo]:
    header, info = _read_header(path, max_header_bytes)
    return _parse_entries(header, info), info


def _find_checkpoint(path: Path) -> Path:
    if not path.is_dir():
        return path
    indexes = sorted(path.glob("*" + INDEX_SUFFIX))
    if len(indexes) == 1:
        return indexes[0]
    files = sorted(path.glob("*.safetensors"))
    if not indexes and len(files) == 1:
        return files[0]
    raise CheckpointFormatError("directory does not hold exactly one checkpoint", path)


def open_checkpoint(path: str | os.PathLike, max_header_bytes: int = DEFAULT_MAX_HEADER_BYTES) -> CheckpointView:
    """Open a single ``.safetensors`` file, a shard index JSON, or a directory holding one."""
    path = _find_checkpoint(Path(path))
    if not path.exists():
        raise FileNotFoundError(path)
    if path.name.endswith(".json"):
        return _open_sharded(path, max_header_bytes)
    entries, info = _open_file(path, max_header_bytes)
    tensors = {e.name: e for e in sorted(entries, key=lambda e: e.name)}
    return CheckpointView(path=path, tensors=tensors, shards=(info,), metadata=dict(info.metadata))


def _open_sharded(index_path: Path, max_header_bytes: int) -> CheckpointView:
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicates)
    except (json.JSONDecodeError, ValueError) as e:
        raise CheckpointFormatError(f"malformed index: {e}", index_path) from None
    weight_map = index.get("weight_map") if isinstance(index, dict) else None
    if not isinstance(weight_map, dict) or not all(isinstance(v, str) for v in weight_map.values()):
        raise CheckpointFormatError("index has no valid weight_map", index_path)
    shard_names = sorted(set(weight_map.values()))
    shards, tensors = [], {}
    for shard_name in shard_names:
        if Path(shard_name).name != shard_name:
            raise CheckpointFormatError(f"shard {shard_name!r} is not in the index directory", index_path)
        shard_path = index_path.parent / shard_name
        if not shard_path.exists():
            raise FileNotFoundError(shard_path)
        entries, info = _open_file(shard_path, max_header_bytes)
        shards.append(info)
        for e in entries:
            if e.name in tensors:
                raise CheckpointFormatError(f"duplicate tensor {e.name!r} across shards", shard_path)
            if weight_map.get(e.name) != shard_name:
                raise CheckpointFormatError(f"tensor {e.name!r} is not mapped to this shard by the index", shard_path)
            tensors[e.name] = e
    missing = sorted(set(weight_map) - set(tensors))
    if missing:
        raise CheckpointFormatError(f"index names tensors absent from their shards: {missing[:5]}", index_path)
    meta = index.get("metadata") or {}
    return CheckpointView(
        path=index_path,
        tensors=dict(sorted(tensors.items())),
        shards=tuple(shards),
        metadata=dict(meta) if isinstance(meta, dict) else {},
        index_name=index_path.name,
    )


# ---------------------------------------------------------------- writing

TensorData = Union[bytes, bytearray, memoryview, np.ndarray, Iterable[bytes]]
TensorSpec = tuple  # (dtype, shape, data)


def _chunks(data: TensorData) -> Iterator[bytes]:
    if isinstance(data, (bytes, bytearray, memoryview)):
        yield data
    elif isinstance(data, np.ndarray):
        yield memoryview(np.ascontiguousarray(data)).cast("B")
    else:
        yield from data


def _normalize_entries(entries) -> dict[str, tuple[ElementType, tuple[int, ...], TensorData]]:
    items = entries.items() if isinstance(entries, Mapping) else entries
    out = {}
    for name, (dtype, shape, data) in items:
        if name in out or name == "__metadata__":
            raise ValueError(f"tensor name collision: {name!r}")
        out[name] = (ElementType.parse(dtype), tuple(int(d) for d in shape), data)
    return out


def _header_bytes(specs: Sequence[tuple[str, ElementType, tuple[int, ...]]], metadata: Mapping[str, str] | None) -> bytes:
    header: dict[str, Any] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for name, dtype, shape in specs:
        length = math.prod(shape) * dtype.width
        header[name] = {"dtype": dtype.value, "shape": list(shape), "data_offsets": [offset, offset + length]}
        offset += length
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return raw


def _write_file(path: Path, entries: dict, names: Sequence[str], metadata: Mapping[str, str] | None) -> int:
    specs = [(n, entries[n][0], entries[n][1]) for n in names]
    header = _header_bytes(specs, metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    total = 0
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for name, dtype, shape in specs:
                expected = math.prod(shape) * dtype.width
                written = 0
                for chunk in _chunks(entries[name][2]):
                    buf = memoryview(chunk).cast("B")
                    written += len(buf)
                    f.write(buf)
                    del chunk, buf  # drop before the producer builds the next piece
                if written != expected:
                    raise ValueError(f"tensor {name!r}: got {written} data bytes, expected {expected}")
                total += written
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return total


def save_checkpoint(
    entries,
    path: str | os.PathLike,
    shard_plan: str | Mapping[str, str] | None = None,
    *,
    reference: CheckpointView | None = None,
    metadata: Mapping[str, Any] | None = None,
    shard_metadata: Mapping[str, str] | None = None,
    index_name: str | None = None,
) -> Path:
    """Write tensors to ``path``.

    ``entries`` maps name to ``(dtype, shape, data)`` where data is a bytes-like
    object, a raw ndarray, or an iterable of byte chunks (streamed to disk).
    Tensors are packed in lexicographic name order.

    ``shard_plan`` is ``None`` for one file, ``"mirror"`` to copy the tensor to
    shard assignment of ``reference``, or an explicit name -> shard filename
    map. Sharded output goes into the directory ``path`` together with an index
    file; the returned path is what :func:`open_checkpoint` should be given.
    """
    entries = _normalize_entries(entries)
    path = Path(path)
    if shard_plan == "mirror":
        if reference is None:
            raise ValueError('shard_plan "mirror" needs a reference view')
        if not reference.sharded:
            shard_plan = None
        else:
            ref_map = reference.weight_map()
            index_name = index_name or reference.index_name
            shard_plan = {n: ref_map[n] for n in entries if n in ref_map}
            unplaced = sorted(set(entries) - set(ref_map))
            if unplaced:
                raise ValueError(f"tensors absent from the reference layout: {unplaced[:5]}")
    if shard_plan is None:
        _write_file(path, entries, sorted(entries), metadata)
        return path
    if isinstance(shard_plan, str):
        raise ValueError(f"unknown shard plan {shard_plan!r}")

    unknown = sorted(set(shard_plan) - set(entries))
    if unknown:
        raise ValueError(f"shard plan references unknown tensors: {unknown[:5]}")
    unplaced = sorted(set(entries) - set(shard_plan))
    if unplaced:
        raise ValueError(f"tensors missing from shard plan: {unplaced[:5]}")
    by_shard: dict[str, list[str]] = {}
    for name in sorted(entries):
        by_shard.setdefault(shard_plan[name], []).append(name)
    path.mkdir(parents=True, exist_ok=True)
    total = 0
    for shard_name in sorted(by_shard):
        total += _write_file(path / shard_name, entries, by_shard[shard_name], shard_metadata)
    index_meta = dict(metadata or {})
    index_meta["total_size"] = total
    index = {"metadata": index_meta, "weight_map": {n: shard_plan[n] for n in sorted(entries)}}
    index_path = path / (index_name or "model.safetensors" + INDEX_SUFFIX)
    index_path.write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return index_path


def copy_checkpoint(view: CheckpointView, path: str | os.PathLike, budget: int = DEFAULT_TENSOR_BUDGET) -> Path:
    """Re-save ``view`` to ``path`` (same layout and metadata), streaming at most ``budget`` bytes at a time."""
    entries = {
        name: (e.dtype, e.shape, view.iter_raw_chunks(name, budget))
        for name, e in view.tensors.items()
    }
    if view.sharded:
        meta = {k: v for k, v in view.metadata.items() if k != "total_size"}
        return save_checkpoint(entries, path, "mirror", reference=view, metadata=meta,
                               shard_metadata=view.shards[0].metadata or None)
    return save_checkpoint(entries, path, metadata=view.metadata or None)
