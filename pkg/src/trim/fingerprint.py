"""Token-class fingerprints: saliency-weighted means of normalized hidden states.

Each fingerprint is the unit-normalized, saliency-weighted sum of the
L2-normalized last-layer hidden states of every in-scope occurrence of a
token class across the validation set. Serialized as TRMF.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from trim.formats import (
    MAGIC_FINGERPRINT,
    FORMAT_VERSION,
    CorruptFrameError,
    FormatError,
    Role,
    ValidationRecord,
    _atomic_writer,
    _read_exact,
)
from trim.saliency import SaliencyMap

NORM_TOL = 1e-6
DEGENERATE_NORM = 1e-10


class ScoringScope(IntEnum):
    ALL = 0
    PROMPT_ONLY = 1
    RESPONSE_ONLY = 2

    @classmethod
    def from_name(cls, name: str) -> "ScoringScope":
        return {"all": cls.ALL, "prompt": cls.PROMPT_ONLY,
                "response": cls.RESPONSE_ONLY}[name.lower()]

    @property
    def flag_name(self) -> str:
        return {ScoringScope.ALL: "all", ScoringScope.PROMPT_ONLY: "prompt",
                ScoringScope.RESPONSE_ONLY: "response"}[self]


def role_in_scope(role: int, scope: ScoringScope) -> bool:
    """SPECIAL positions are never in scope; PROMPT/RESPONSE follow the scope."""
    if role == Role.SPECIAL:
        return False
    if scope == ScoringScope.ALL:
        return True
    if scope == ScoringScope.PROMPT_ONLY:
        return role == Role.PROMPT
    return role == Role.RESPONSE


class NoFingerprintsError(FormatError):
    """No in-scope occurrences at all; nothing to build from."""


class DimensionMismatchError(FormatError):
    pass


class ScopeMismatchError(FormatError):
    pass


@dataclass
class FingerprintEntry:
    vector: np.ndarray  # f32[D], unit norm
    occurrence_count: int
    weight_sum: float


@dataclass
class FingerprintMeta:
    d: int
    l_used: int
    w_q: float
    w_k: float
    scope: ScoringScope
    builder_version: str = "1"
    validation_sample_ids: list[str] = field(default_factory=list)
    config_hash: str = ""

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "l_used": self.l_used,
            "w_q": self.w_q,
            "w_k": self.w_k,
            "scope": self.scope.flag_name,
            "builder_version": self.builder_version,
            "validation_sample_ids": self.validation_sample_ids,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FingerprintMeta":
        return cls(
            d=obj["d"],
            l_used=obj["l_used"],
            w_q=obj["w_q"],
            w_k=obj["w_k"],
            scope=ScoringScope.from_name(obj["scope"]),
            builder_version=obj.get("builder_version", "1"),
            validation_sample_ids=list(obj.get("validation_sample_ids", [])),
            config_hash=obj.get("config_hash", ""),
        )


@dataclass
class FingerprintDictionary:
    entries: dict[int, FingerprintEntry]
    meta: FingerprintMeta
    dropped_classes: list[int] = field(default_factory=list)

    def __contains__(self, token_class: int) -> bool:
        return token_class in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class OccurrenceSet:
    """Per-class (saliency, hidden state) pairs, deterministically ordered."""

    by_class: dict[int, list[tuple[float, np.ndarray]]]
    zero_norm_dropped: int = 0


def collect_occurrences(
    records: Sequence[tuple[ValidationRecord, SaliencyMap]],
    scope: ScoringScope,
) -> OccurrenceSet:
    """Group in-scope, non-SPECIAL positions by token class.

    Accumulation order is fixed by (sample_id, position) so the resulting
    dictionary is independent of input record order. Zero-norm hidden
    states are dropped and counted.
    """
    by_class: dict[int, list[tuple[float, np.ndarray]]] = {}
    dropped = 0
    for record, smap in sorted(records, key=lambda pair: pair[0].sample_id):
        if len(smap.alpha) != record.T:
            raise FormatError(
                f"saliency map length {len(smap.alpha)} != record length {record.T} "
                f"for sample {record.sample_id!r}")
        for i in range(record.T):
            if not role_in_scope(int(record.roles[i]), scope):
                continue
            h = record.hidden[i]
            if float(np.linalg.norm(h)) == 0.0:
                dropped += 1
                continue
            by_class.setdefault(int(record.token_ids[i]), []).append(
                (float(smap.alpha[i]), h))
    return OccurrenceSet(by_class, dropped)


def build_fingerprints(occurrences: OccurrenceSet, meta: FingerprintMeta) -> FingerprintDictionary:
    """Normalize, weight by saliency, sum, and re-normalize per class.

    A class whose weighted sum is degenerate falls back to the unweighted
    mean of normalized states; if that is degenerate too the class is
    dropped and reported.
    """
    if not occurrences.by_class:
        raise NoFingerprintsError("no in-scope occurrences to fingerprint")
    entries: dict[int, FingerprintEntry] = {}
    dropped: list[int] = []
    for cls in sorted(occurrences.by_class):
        pairs = occurrences.by_class[cls]
        hats = np.stack([np.asarray(h, dtype=np.float64) for _, h in pairs])
        hats /= np.linalg.norm(hats, axis=1, keepdims=True)
        alphas = np.array([a for a, _ in pairs], dtype=np.float64)
        s = alphas @ hats
        norm = np.linalg.norm(s)
        if norm < DEGENERATE_NORM:
            s = hats.mean(axis=0)
            norm = np.linalg.norm(s)
            if norm < DEGENERATE_NORM:
                dropped.append(cls)
                continue
        entries[cls] = FingerprintEntry(
            vector=(s / norm).astype(np.float32),
            occurrence_count=len(pairs),
            weight_sum=float(alphas.sum()),
        )
    if not entries:
        raise NoFingerprintsError("every class degenerated to a zero vector")
    return FingerprintDictionary(entries, meta, dropped)


# ---------------------------------------------------------------------------
# TRMF serialization


def save_fingerprints(fdict: FingerprintDictionary, path) -> None:
    meta_blob = json.dumps(fdict.meta.to_json(), sort_keys=True).encode("utf-8")
    f, tmp = _atomic_writer(path)
    try:
        with f:
            f.write(MAGIC_FINGERPRINT)
            f.write(struct.pack("<IIBQ", FORMAT_VERSION, fdict.meta.d,
                                int(fdict.meta.scope), len(fdict.entries)))
            f.write(struct.pack("<I", len(meta_blob)))
            f.write(meta_blob)
            for cls in sorted(fdict.entries):
                e = fdict.entries[cls]
                f.write(struct.pack("<IIf", cls, e.occurrence_count, e.weight_sum))
                f.write(np.ascontiguousarray(e.vector, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def load_fingerprints(
    path,
    expected_d: int | None = None,
    expected_scope: ScoringScope | None = None,
) -> FingerprintDictionary:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, -1)
        if magic != MAGIC_FINGERPRINT:
            raise CorruptFrameError(path, 0, -1, f"bad magic {magic!r}, expected TRMF")
        version, d, scope_code, count = struct.unpack("<IIBQ", _read_exact(f, 17, path, -1))
        if version != FORMAT_VERSION:
            raise CorruptFrameError(path, 4, -1, f"unsupported version {version}")
        try:
            scope = ScoringScope(scope_code)
        except ValueError:
            raise CorruptFrameError(path, 12, -1, f"bad scope code {scope_code}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, path, -1))
        meta = FingerprintMeta.from_json(json.loads(_read_exact(f, meta_len, path, -1)))
        if meta.d != d or meta.scope != scope:
            raise CorruptFrameError(path, 21, -1, "meta blob disagrees with header")
        entries: dict[int, FingerprintEntry] = {}
        for ordinal in range(count):
            cls, occ, wsum = struct.unpack("<IIf", _read_exact(f, 12, path, ordinal))
            vec = np.frombuffer(_read_exact(f, 4 * d, path, ordinal), dtype="<f4").copy()
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > NORM_TOL:
                raise CorruptFrameError(path, f.tell(), ordinal,
                                        f"class {cls}: vector norm {norm:.8f} not unit")
            entries[cls] = FingerprintEntry(vec, occ, wsum)
    if expected_d is not None and expected_d != d:
        raise DimensionMismatchError(f"expected D={expected_d}, file has D={d}")
    if expected_scope is not None and expected_scope != scope:
        raise ScopeMismatchError(
            f"expected scope {expected_scope.flag_name}, file has {scope.flag_name}")
    return FingerprintDictionary(entries, meta)
