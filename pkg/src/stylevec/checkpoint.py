"""Checkpoints and the safetensors container.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of UTF-8
JSON, then the raw little-endian tensor data. Every header entry is
``{"dtype", "shape", "data_offsets": [begin, end]}`` with offsets relative
to the data section; an optional ``"__metadata__"`` object carries
string-to-string metadata.

Writes are canonical: tensors packed gaplessly in lexicographic key order,
compact JSON with sorted keys, header padded with spaces to 8 bytes. The
same checkpoint always serializes to the same bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

from .errors import MalformedHeader, StylevecIOError, UnsupportedDtype
from .tensor import Dtype, Tensor

METADATA_KEY = "__metadata__"
MAX_HEADER_BYTES = 100 * 1024 * 1024


def validate_key(key: str) -> None:
    if not isinstance(key, str) or not key:
        raise ValueError("tensor key must be a non-empty string")
    if key == METADATA_KEY:
        raise ValueError(f"{METADATA_KEY!r} is reserved")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in key):
        raise ValueError(f"tensor key {key!r} contains control characters")


@dataclass(frozen=True)
class Checkpoint:
    """Named tensors plus string metadata, iterated in key order."""

    entries: Mapping[str, Tensor] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key in self.entries:
            validate_key(key)
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("metadata must map str to str")
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))
        object.__setattr__(self, "metadata", dict(sorted(self.metadata.items())))

    def __getitem__(self, key: str) -> Tensor:
        return self.entries[key]

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    @property
    def n_params(self) -> int:
        return sum(t.numel for t in self.entries.values())

    def with_metadata(self, **updates: str) -> "Checkpoint":
        return Checkpoint(self.entries, {**self.metadata, **updates})

    def bit_equal(self, other: "Checkpoint") -> bool:
        if list(self.entries) != list(other.entries) or self.metadata != other.metadata:
            return False
        return all(self[k].bit_equal(other[k]) for k in self.entries)


# -- header parsing ----------------------------------------------------------


@dataclass(frozen=True)
class TensorInfo:
    key: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Violation:
    kind: str  # overlap | gap | misorder | out_of_bounds | size_mismatch | unsupported_dtype
    keys: tuple[str, ...]
    detail: str = ""

    def to_json(self) -> dict:
        return {"kind": self.kind, "keys": list(self.keys), "detail": self.detail}


@dataclass(frozen=True)
class HeaderReport:
    header_size: int
    data_size: int
    tensors: tuple[TensorInfo, ...]
    metadata: Mapping[str, str]
    violations: tuple[Violation, ...]

    @property
    def tensor_count(self) -> int:
        return len(self.tensors)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "header_size": self.header_size,
            "data_size": self.data_size,
            "tensor_count": self.tensor_count,
            "tensors": [
                {
                    "key": t.key,
                    "dtype": t.dtype,
                    "shape": list(t.shape),
                    "data_offsets": [t.begin, t.end],
                }
                for t in self.tensors
            ],
            "metadata": dict(self.metadata),
            "violations": [v.to_json() for v in self.violations],
        }


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _header_length(prefix: bytes, available: int) -> int:
    if len(prefix) < 8:
        raise MalformedHeader("file shorter than the 8-byte length prefix")
    (n,) = struct.unpack("<Q", prefix[:8])
    if n > MAX_HEADER_BYTES:
        raise MalformedHeader(f"header length {n} exceeds limit")
    if n > available:
        raise MalformedHeader(f"header length {n} exceeds the {available} bytes after the prefix")
    return n


def _unique_pairs(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise MalformedHeader(f"duplicate header key {k!r}")
        seen[k] = v
    return seen


def _parse_header_json(raw: bytes) -> tuple[list[TensorInfo], dict[str, str]]:
    try:
        doc = json.loads(raw.decode("utf-8"), object_pairs_hook=_unique_pairs)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedHeader("header JSON must be an object")

    metadata = doc.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    infos = []
    for key, entry in doc.items():
        try:
            validate_key(key)
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from None
        if not isinstance(entry, dict):
            raise MalformedHeader(f"{key}: entry must be an object")
        missing = {"dtype", "shape", "data_offsets"} - entry.keys()
        if missing:
            raise MalformedHeader(f"{key}: missing {sorted(missing)}")
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        if not isinstance(dtype, str):
            raise MalformedHeader(f"{key}: dtype must be a string")
        if not isinstance(shape, list) or not all(_is_int(s) and s >= 0 for s in shape):
            raise MalformedHeader(f"{key}: shape must be a list of non-negative integers")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_is_int(o) and o >= 0 for o in offsets)
        ):
            raise MalformedHeader(f"{key}: data_offsets must be two non-negative integers")
        infos.append(TensorInfo(key, dtype, tuple(shape), offsets[0], offsets[1]))
    return infos, metadata


def _violations(infos: list[TensorInfo], data_size: int) -> list[Violation]:
    out = []
    supported = {d.value for d in Dtype}
    for t in infos:
        if t.dtype not in supported:
            out.append(Violation("unsupported_dtype", (t.key,), t.dtype))
            continue
        if t.begin > t.end or t.end > data_size:
            out.append(Violation("out_of_bounds", (t.key,), f"[{t.begin}, {t.end}) vs {data_size}"))
            continue
        expected = t.numel * Dtype(t.dtype).itemsize
        if t.end - t.begin != expected:
            out.append(
                Violation("size_mismatch", (t.key,), f"{t.end - t.begin} bytes, expected {expected}")
            )

    ranged = sorted(
        (t for t in infos if t.begin <= t.end <= data_size), key=lambda t: (t.begin, t.end, t.key)
    )
    cursor, last = 0, None
    for t in ranged:
        if t.begin == t.end:
            continue
        if last is not None and t.begin < cursor:
            out.append(Violation("overlap", (last.key, t.key), f"at byte {t.begin}"))
        elif t.begin > cursor:
            keys = (last.key, t.key) if last is not None else (t.key,)
            out.append(Violation("gap", keys, f"bytes [{cursor}, {t.begin})"))
        if t.end > cursor:
            cursor, last = t.end, t
    if cursor < data_size:
        keys = (last.key,) if last is not None else ()
        out.append(Violation("gap", keys, f"trailing bytes [{cursor}, {data_size})"))

    by_offset = [t.key for t in ranged if t.begin < t.end]
    if by_offset != sorted(by_offset):
        out.append(Violation("misorder", tuple(by_offset), "data not packed in key order"))
    return out


def _report(header_len: int, raw: bytes, data_size: int) -> HeaderReport:
    infos, metadata = _parse_header_json(raw)
    infos.sort(key=lambda t: t.key)
    return HeaderReport(
        header_size=header_len,
        data_size=data_size,
        tensors=tuple(infos),
        metadata=metadata,
        violations=tuple(_violations(infos, data_size)),
    )


def validate_header(buf: bytes) -> HeaderReport:
    """Inspect a serialized checkpoint's header without decoding tensor data.

    Structural defects (bad prefix, invalid JSON, wrong field types) raise
    ``MalformedHeader``; layout problems are listed in ``violations``.
    """
    n = _header_length(buf[:8], len(buf) - 8)
    return _report(n, bytes(buf[8 : 8 + n]), len(buf) - 8 - n)


def read_header(path: str | os.PathLike) -> HeaderReport:
    """Like :func:`validate_header` but reads only the header bytes of a file."""
    try:
        with open(path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            n = _header_length(fh.read(8), size - 8)
            raw = fh.read(n)
    except OSError as exc:
        raise StylevecIOError(str(exc)) from exc
    return _report(n, raw, size - 8 - n)


_FATAL = {"out_of_bounds", "size_mismatch", "overlap"}


def _decode(report: HeaderReport, data: memoryview) -> Checkpoint:
    for v in report.violations:
        if v.kind == "unsupported_dtype":
            raise UnsupportedDtype(f"{v.keys[0]}: dtype {v.detail} is not supported")
    for v in report.violations:
        if v.kind in _FATAL:
            raise MalformedHeader(f"{v.kind} ({', '.join(v.keys)}): {v.detail}")
    entries = {
        t.key: Tensor.from_bytes(Dtype(t.dtype), t.shape, bytes(data[t.begin : t.end]))
        for t in report.tensors
    }
    return Checkpoint(entries, report.metadata)


def loads(buf: bytes) -> Checkpoint:
    report = validate_header(buf)
    return _decode(report, memoryview(buf)[8 + report.header_size :])


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            n = _header_length(fh.read(8), size - 8)
            report = _report(n, fh.read(n), size - 8 - n)
            data = fh.read(report.data_size)
    except OSError as exc:
        raise StylevecIOError(str(exc)) from exc
    return _decode(report, memoryview(data))


def dumps(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    offset = 0
    for key, t in ckpt.items():
        header[key] = {
            "dtype": t.dtype.value,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + t.nbytes],
        }
        offset += t.nbytes
    if ckpt.metadata:
        header[METADATA_KEY] = dict(ckpt.metadata)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    raw += b" " * (-len(raw) % 8)
    parts = [struct.pack("<Q", len(raw)), raw]
    parts.extend(t.data for t in ckpt.entries.values())
    return b"".join(parts)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    payload = dumps(ckpt)
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.chmod(tmp, 0o644)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StylevecIOError(str(exc)) from exc
