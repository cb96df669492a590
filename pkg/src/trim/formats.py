"""Binary activation interchange: TRMV / TRMC / TRME files and JSONL manifests.

All formats are little-endian, row-major, version 1. Tensors are stored at
true sequence length (no padding) in f32 or f16; readers always widen to
f32 so a write/read round-trip is bit-exact after quantization.

Layouts:
    TRMV  magic "TRMV" | version u32 | dtype u8 | D u32 | L u32 | H u32 |
          record_count u64 | records.  Record: id_len u16 | id utf8 |
          T u32 | token_ids u32[T] | roles u8[T] | hidden dtype[T*D] |
          attention dtype[L*H*T*T]
    TRMC  magic "TRMC" | version u32 | dtype u8 | D u32 | record_count u64 |
          records (as TRMV minus attention, minus L and H)
    TRME  magic "TRME" | version u32 | dtype u8 | D_e u32 | entry_count u64 |
          entries {class u32 | vec dtype[D_e]}
Manifests are JSON lines: {sample_id, source, n_tokens, prompt_len?}.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1

MAGIC_VALIDATION = b"TRMV"
MAGIC_CANDIDATE = b"TRMC"
MAGIC_EMBEDDING = b"TRME"
MAGIC_FINGERPRINT = b"TRMF"

_DTYPE_CODES = {"f32": 0, "f16": 1}
_DTYPE_NAMES = {0: "f32", 1: "f16"}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}

# Row-stochasticity tolerance depends on on-disk precision.
ROW_SUM_TOL = {"f16": 1e-3, "f32": 1e-5}


class Role(IntEnum):
    SPECIAL = 0
    PROMPT = 1
    RESPONSE = 2


class FormatError(Exception):
    """Base class for interchange file errors."""


class TruncatedFileError(FormatError):
    """File ended in the middle of a header or record frame."""

    def __init__(self, path, ordinal: int, needed: int, got: int):
        self.ordinal = ordinal
        super().__init__(
            f"{path}: truncated at record {ordinal}: needed {needed} bytes, got {got}"
        )


class CorruptFrameError(FormatError):
    """Frame contents are structurally invalid (not merely short)."""

    def __init__(self, path, offset: int, ordinal: int, detail: str):
        self.offset = offset
        self.ordinal = ordinal
        super().__init__(f"{path}: corrupt frame at byte {offset} (record {ordinal}): {detail}")


class RecordRejectedError(FormatError):
    """A record handed to a writer does not match the file header."""

    def __init__(self, index: int, detail: str):
        self.index = index
        super().__init__(f"record {index} rejected: {detail}")


@dataclass
class ValidationRecord:
    """One target-task sample with attention from the last L layers."""

    sample_id: str
    token_ids: np.ndarray  # u32[T]
    roles: np.ndarray  # u8[T]
    hidden: np.ndarray  # f32[T, D]
    attention: np.ndarray  # f32[L, H, T, T]

    @property
    def T(self) -> int:
        return len(self.token_ids)


@dataclass
class CandidateRecord:
    """One corpus sample; hidden states only, no attention."""

    sample_id: str
    token_ids: np.ndarray  # u32[T]
    roles: np.ndarray  # u8[T]
    hidden: np.ndarray  # f32[T, D]

    @property
    def T(self) -> int:
        return len(self.token_ids)


@dataclass
class EmbeddingTable:
    """Raw (unnormalized) input-embedding rows keyed by token class."""

    entries: dict[int, np.ndarray]
    d_e: int


@dataclass
class ManifestEntry:
    sample_id: str
    source: str
    n_tokens: int
    prompt_len: int | None = None


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    path: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, passed, detail))

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]


# ---------------------------------------------------------------------------
# low-level helpers


def _atomic_writer(path):
    """Open a temp file next to `path`; caller renames on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".trim-tmp-")
    return os.fdopen(fd, "wb"), tmp


def _read_exact(f: BinaryIO, n: int, path, ordinal: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(path, ordinal, n, len(buf))
    return buf


def _quantize(arr: np.ndarray, dtype: str) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype])


def _widen(buf: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(buf, dtype=_NP_DTYPES[dtype]).reshape(shape)
    return arr.astype(np.float32)


def _write_id(f: BinaryIO, sample_id: str) -> None:
    raw = sample_id.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"sample_id longer than 65535 bytes: {sample_id[:40]}...")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_id(f: BinaryIO, path, ordinal: int) -> str:
    (id_len,) = struct.unpack("<H", _read_exact(f, 2, path, ordinal))
    raw = _read_exact(f, id_len, path, ordinal)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFrameError(path, f.tell() - id_len, ordinal, f"bad utf-8 id: {exc}")


def peek_magic(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


# ---------------------------------------------------------------------------
# TRMV: validation records


def write_validation_file(
    path,
    records: Sequence[ValidationRecord],
    dtype: str = "f32",
    dims: tuple[int, int, int] | None = None,
) -> None:
    """Write a TRMV file atomically.

    `dims` = (D, L, H); inferred from the first record when omitted (0,0,0
    for an empty sequence). Records whose tensors disagree with the header
    raise RecordRejectedError with their index.
    """
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    if dims is None:
        if records:
            first = records[0]
            dims = (first.hidden.shape[1], first.attention.shape[0], first.attention.shape[1])
        else:
            dims = (0, 0, 0)
    d, n_layers, n_heads = dims

    f, tmp = _atomic_writer(path)
    try:
        with f:
            f.write(MAGIC_VALIDATION)
            f.write(struct.pack("<IBIIIQ", FORMAT_VERSION, _DTYPE_CODES[dtype],
                                d, n_layers, n_heads, len(records)))
            for index, rec in enumerate(records):
                t = rec.T
                if rec.hidden.shape != (t, d):
                    raise RecordRejectedError(
                        index, f"hidden shape {rec.hidden.shape} != ({t}, {d})")
                if rec.attention.shape != (n_layers, n_heads, t, t):
                    raise RecordRejectedError(
                        index,
                        f"attention shape {rec.attention.shape} != "
                        f"({n_layers}, {n_heads}, {t}, {t})")
                if len(rec.roles) != t:
                    raise RecordRejectedError(index, f"roles length {len(rec.roles)} != {t}")
                _write_id(f, rec.sample_id)
                f.write(struct.pack("<I", t))
                f.write(np.ascontiguousarray(rec.token_ids, dtype="<u4").tobytes())
                f.write(np.ascontiguousarray(rec.roles, dtype="u1").tobytes())
                f.write(_quantize(rec.hidden, dtype).tobytes())
                f.write(_quantize(rec.attention, dtype).tobytes())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _read_trmv_header(f: BinaryIO, path):
    magic = _read_exact(f, 4, path, -1)
    if magic != MAGIC_VALIDATION:
        raise CorruptFrameError(path, 0, -1, f"bad magic {magic!r}, expected TRMV")
    version, dtype_code, d, n_layers, n_heads, count = struct.unpack(
        "<IBIIIQ", _read_exact(f, 25, path, -1))
    if version != FORMAT_VERSION:
        raise CorruptFrameError(path, 4, -1, f"unsupported version {version}")
    if dtype_code not in _DTYPE_NAMES:
        raise CorruptFrameError(path, 8, -1, f"unknown dtype code {dtype_code}")
    return _DTYPE_NAMES[dtype_code], d, n_layers, n_heads, count


def read_validation_file(path) -> list[ValidationRecord]:
    with open(path, "rb") as f:
        dtype, d, n_layers, n_heads, count = _read_trmv_header(f, path)
        itemsize = _NP_DTYPES[dtype].itemsize
        records = []
        for ordinal in range(count):
            sample_id = _read_id(f, path, ordinal)
            (t,) = struct.unpack("<I", _read_exact(f, 4, path, ordinal))
            token_ids = np.frombuffer(
                _read_exact(f, 4 * t, path, ordinal), dtype="<u4").copy()
            roles = np.frombuffer(
                _read_exact(f, t, path, ordinal), dtype="u1").copy()
            if roles.size and roles.max() > int(Role.RESPONSE):
                raise CorruptFrameError(path, f.tell(), ordinal,
                                        f"role code {roles.max()} out of range")
            hidden = _widen(_read_exact(f, itemsize * t * d, path, ordinal), dtype, (t, d))
            attn = _widen(
                _read_exact(f, itemsize * n_layers * n_heads * t * t, path, ordinal),
                dtype, (n_layers, n_heads, t, t))
            records.append(ValidationRecord(sample_id, token_ids, roles, hidden, attn))
        trailing = f.read(1)
        if trailing:
            raise CorruptFrameError(path, f.tell() - 1, count,
                                    "trailing bytes after declared record count")
    return records


# ---------------------------------------------------------------------------
# TRMC: candidate records


def write_candidate_file(
    path,
    records: Iterable[CandidateRecord],
    dtype: str = "f32",
    d: int | None = None,
) -> None:
    """Write a TRMC file atomically; `records` may be any iterable."""
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    records = list(records) if not isinstance(records, (list, tuple)) else records
    if d is None:
        d = records[0].hidden.shape[1] if records else 0

    f, tmp = _atomic_writer(path)
    try:
        with f:
            f.write(MAGIC_CANDIDATE)
            f.write(struct.pack("<IBIQ", FORMAT_VERSION, _DTYPE_CODES[dtype], d, len(records)))
            for index, rec in enumerate(records):
                t = rec.T
                if rec.hidden.shape != (t, d):
                    raise RecordRejectedError(
                        index, f"hidden shape {rec.hidden.shape} != ({t}, {d})")
                if len(rec.roles) != t:
                    raise RecordRejectedError(index, f"roles length {len(rec.roles)} != {t}")
                _write_id(f, rec.sample_id)
                f.write(struct.pack("<I", t))
                f.write(np.ascontiguousarray(rec.token_ids, dtype="<u4").tobytes())
                f.write(np.ascontiguousarray(rec.roles, dtype="u1").tobytes())
                f.write(_quantize(rec.hidden, dtype).tobytes())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _read_trmc_header(f: BinaryIO, path):
    magic = _read_exact(f, 4, path, -1)
    if magic != MAGIC_CANDIDATE:
        raise CorruptFrameError(path, 0, -1, f"bad magic {magic!r}, expected TRMC")
    version, dtype_code, d, count = struct.unpack("<IBIQ", _read_exact(f, 17, path, -1))
    if version != FORMAT_VERSION:
        raise CorruptFrameError(path, 4, -1, f"unsupported version {version}")
    if dtype_code not in _DTYPE_NAMES:
        raise CorruptFrameError(path, 8, -1, f"unknown dtype code {dtype_code}")
    return _DTYPE_NAMES[dtype_code], d, count


def read_candidate_header(path) -> tuple[str, int, int]:
    """Return (dtype, D, record_count) without reading any records."""
    with open(path, "rb") as f:
        return _read_trmc_header(f, path)


def read_candidate_stream(path) -> Iterator[CandidateRecord]:
    """Yield candidate records in file order, one resident at a time."""
    with open(path, "rb", buffering=1 << 20) as f:
        dtype, d, count = _read_trmc_header(f, path)
        itemsize = _NP_DTYPES[dtype].itemsize
        for ordinal in range(count):
            sample_id = _read_id(f, path, ordinal)
            (t,) = struct.unpack("<I", _read_exact(f, 4, path, ordinal))
            # one read per record body: tokens, roles, hidden back to back
            body = _read_exact(f, 5 * t + itemsize * t * d, path, ordinal)
            token_ids = np.frombuffer(body, dtype="<u4", count=t).copy()
            roles = np.frombuffer(body, dtype="u1", count=t, offset=4 * t).copy()
            if roles.size and roles.max() > int(Role.RESPONSE):
                raise CorruptFrameError(path, f.tell(), ordinal,
                                        f"role code {roles.max()} out of range")
            hidden = _widen(memoryview(body)[5 * t:], dtype, (t, d))
            yield CandidateRecord(sample_id, token_ids, roles, hidden)
        trailing = f.read(1)
        if trailing:
            raise CorruptFrameError(path, f.tell() - 1, count,
                                    "trailing bytes after declared record count")


# ---------------------------------------------------------------------------
# TRME: embedding tables


def write_embedding_table(path, table: EmbeddingTable, dtype: str = "f32") -> None:
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    f, tmp = _atomic_writer(path)
    try:
        with f:
            f.write(MAGIC_EMBEDDING)
            f.write(struct.pack("<IBIQ", FORMAT_VERSION, _DTYPE_CODES[dtype],
                                table.d_e, len(table.entries)))
            for cls in sorted(table.entries):
                vec = table.entries[cls]
                if vec.shape != (table.d_e,):
                    raise RecordRejectedError(cls, f"vector shape {vec.shape} != ({table.d_e},)")
                f.write(struct.pack("<I", cls))
                f.write(_quantize(vec, dtype).tobytes())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_embedding_table(path) -> EmbeddingTable:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, -1)
        if magic != MAGIC_EMBEDDING:
            raise CorruptFrameError(path, 0, -1, f"bad magic {magic!r}, expected TRME")
        version, dtype_code, d_e, count = struct.unpack("<IBIQ", _read_exact(f, 17, path, -1))
        if version != FORMAT_VERSION:
            raise CorruptFrameError(path, 4, -1, f"unsupported version {version}")
        if dtype_code not in _DTYPE_NAMES:
            raise CorruptFrameError(path, 8, -1, f"unknown dtype code {dtype_code}")
        dtype = _DTYPE_NAMES[dtype_code]
        itemsize = _NP_DTYPES[dtype].itemsize
        entries: dict[int, np.ndarray] = {}
        for ordinal in range(count):
            (cls,) = struct.unpack("<I", _read_exact(f, 4, path, ordinal))
            entries[cls] = _widen(_read_exact(f, itemsize * d_e, path, ordinal), dtype, (d_e,))
    return EmbeddingTable(entries, d_e)


# ---------------------------------------------------------------------------
# corpus manifest (JSONL)


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    f, tmp = _atomic_writer(path)
    try:
        with f:
            for e in entries:
                obj = {"sample_id": e.sample_id, "source": e.source, "n_tokens": e.n_tokens}
                if e.prompt_len is not None:
                    obj["prompt_len"] = e.prompt_len
                f.write((json.dumps(obj, sort_keys=True) + "\n").encode("utf-8"))
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_manifest(path) -> dict[str, ManifestEntry]:
    entries: dict[str, ManifestEntry] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "sample_id" in obj:
                sid = obj["sample_id"]
                if sid in entries:
                    raise FormatError(f"{path}:{lineno}: duplicate sample_id {sid!r}")
                entries[sid] = ManifestEntry(
                    sample_id=sid,
                    source=obj.get("source", ""),
                    n_tokens=int(obj["n_tokens"]),
                    prompt_len=obj.get("prompt_len"),
                )
    return entries


# ---------------------------------------------------------------------------
# file validator


def validate_file(path) -> ValidationReport:
    """Structural and invariant checks; failures are report entries, not raises."""
    report = ValidationReport(str(path))
    try:
        magic = peek_magic(path)
    except OSError as exc:
        report.add("readable", False, str(exc))
        return report
    if magic == MAGIC_VALIDATION:
        _validate_trmv(path, report)
    elif magic == MAGIC_CANDIDATE:
        _validate_trmc(path, report)
    elif magic == MAGIC_EMBEDDING:
        _validate_trme(path, report)
    elif magic == MAGIC_FINGERPRINT:
        _validate_trmf(path, report)
    else:
        report.add("magic", False, f"unrecognized magic {magic!r}")
    return report


def _validate_trmv(path, report: ValidationReport) -> None:
    try:
        with open(path, "rb") as f:
            dtype, d, n_layers, n_heads, count = _read_trmv_header(f, path)
        records = read_validation_file(path)
    except FormatError as exc:
        report.add("frame", False, str(exc))
        return
    report.add("frame", True, f"{count} records, dtype={dtype}, D={d}, L={n_layers}, H={n_heads}")
    tol = ROW_SUM_TOL[dtype]

    for ordinal, rec in enumerate(records):
        t = rec.T
        attn = rec.attention
        # causal support: exact zeros strictly above the diagonal
        upper = np.triu(np.ones((t, t), dtype=bool), k=1)
        leak = np.argwhere(attn[:, :, upper] != 0.0) if t else np.empty((0, 3))
        if leak.size:
            l, h, flat = leak[0]
            i, j = np.argwhere(upper)[flat]
            report.add("causal_support", False,
                       f"record {ordinal} ({rec.sample_id}): A[{l},{h},{i},{j}] != 0")
            return
        # row-stochastic over non-masked keys
        sums = attn.sum(axis=3)
        bad = np.argwhere(np.abs(sums - 1.0) > tol)
        if bad.size:
            l, h, i = bad[0]
            report.add("row_stochastic", False,
                       f"record {ordinal} ({rec.sample_id}): row sum A[{l},{h},{i},:]"
                       f" = {sums[l, h, i]:.6f}")
            return
        # row sums within tol of 1 also rule out all-zero rows
    report.add("causal_support", True)
    report.add("row_stochastic", True)


def _validate_trmc(path, report: ValidationReport) -> None:
    try:
        dtype, d, count = read_candidate_header(path)
        seen: set[str] = set()
        for ordinal, rec in enumerate(read_candidate_stream(path)):
            if rec.sample_id in seen:
                report.add("unique_ids", False,
                           f"record {ordinal}: duplicate sample_id {rec.sample_id!r}")
                return
            seen.add(rec.sample_id)
    except FormatError as exc:
        report.add("frame", False, str(exc))
        return
    report.add("frame", True, f"{count} records, dtype={dtype}, D={d}")
    report.add("unique_ids", True)


def _validate_trme(path, report: ValidationReport) -> None:
    try:
        table = read_embedding_table(path)
    except FormatError as exc:
        report.add("frame", False, str(exc))
        return
    report.add("frame", True, f"{len(table.entries)} entries, D_e={table.d_e}")


def _validate_trmf(path, report: ValidationReport) -> None:
    # imported here to avoid a module cycle
    from trim.fingerprint import load_fingerprints

    try:
        fdict = load_fingerprints(path)
    except FormatError as exc:
        report.add("frame", False, str(exc))
        return
    report.add("frame", True, f"{len(fdict.entries)} classes, D={fdict.meta.d}")
    report.add("unit_norms", True)
