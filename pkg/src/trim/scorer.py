"""Candidate scoring: cosine match against class fingerprints with OOV backoff.

Every in-scope, non-special, nonzero-norm token contributes a cosine score
between its normalized hidden state and its class fingerprint; classes
absent from the dictionary back off to the nearest fingerprinted class in
input-embedding space, penalized by lambda. Token scores pool into a
sample score via a mean/max blend plus a small coverage bonus.

All arithmetic runs in float64 regardless of on-disk precision, so results
are identical for any worker count or shard layout.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from trim.fingerprint import (
    DimensionMismatchError,
    FingerprintDictionary,
    ScoringScope,
)
from trim.formats import CandidateRecord, EmbeddingTable, Role

NEG_INF = float("-inf")


class ConfigMismatchError(Exception):
    """Scoring config disagrees with the fingerprint dictionary's metadata."""


class EmbeddingGapError(Exception):
    """A token class needed by OOV resolution has no embedding row."""

    def __init__(self, token_class: int):
        self.token_class = token_class
        super().__init__(f"no embedding for token class {token_class}")


class OovPolicy(Enum):
    BACKOFF = "backoff"
    SKIP = "skip"


@dataclass
class ScoringConfig:
    lam: float = 1.0  # penalty for backed-off classes, in (0, 1]
    w_mu: float = 0.5
    w_m: float = 0.5
    eta: float = 0.05  # coverage bonus weight
    scope: ScoringScope = ScoringScope.ALL
    oov_policy: OovPolicy = OovPolicy.BACKOFF

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.w_mu < 0 or self.w_m < 0 or abs(self.w_mu + self.w_m - 1.0) > 1e-9:
            raise ValueError(f"mean/max weights must be a convex pair, got "
                             f"({self.w_mu}, {self.w_m})")
        if not (0.0 <= self.eta <= 0.5):
            raise ValueError(f"eta must be in [0, 0.5], got {self.eta}")


@dataclass
class ScoreRecord:
    sample_id: str
    S: float
    mu: float | None
    m: float | None
    kappa: float
    scored_tokens: int
    total_tokens: int
    oov_tokens: int
    source: str = ""

    @property
    def empty_scope(self) -> bool:
        return self.scored_tokens == 0

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "S": None if self.empty_scope else self.S,
            "mu": self.mu,
            "m": self.m,
            "kappa": self.kappa,
            "scored_tokens": self.scored_tokens,
            "total_tokens": self.total_tokens,
            "oov_tokens": self.oov_tokens,
            "source": self.source,
            "empty_scope": self.empty_scope,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreRecord":
        empty = obj.get("empty_scope", obj.get("S") is None)
        return cls(
            sample_id=obj["sample_id"],
            S=NEG_INF if empty else float(obj["S"]),
            mu=obj.get("mu"),
            m=obj.get("m"),
            kappa=float(obj.get("kappa", 0.0)),
            scored_tokens=int(obj.get("scored_tokens", 0)),
            total_tokens=int(obj.get("total_tokens", 0)),
            oov_tokens=int(obj.get("oov_tokens", 0)),
            source=obj.get("source", ""),
        )


@dataclass
class ScoreError:
    sample_id: str
    message: str

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "error": self.message}


class OovResolver:
    """Maps non-fingerprinted classes to the nearest fingerprinted class.

    Nearest = max cosine between unit-normalized input-embedding rows; ties
    break toward the lowest class id. Resolutions are memoized per class.
    """

    def __init__(self, embeddings: EmbeddingTable, fingerprinted_classes: Iterable[int]):
        self._embeddings = embeddings
        self._classes = sorted(fingerprinted_classes)
        missing = [c for c in self._classes if c not in embeddings.entries]
        if missing:
            raise EmbeddingGapError(missing[0])
        mat = np.stack([embeddings.entries[c] for c in self._classes]).astype(np.float64)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        self._matrix = mat / norms
        self._cache: dict[int, int] = {}

    def resolve(self, token_class: int) -> int:
        cached = self._cache.get(token_class)
        if cached is not None:
            return cached
        emb = self._embeddings.entries.get(token_class)
        if emb is None:
            raise EmbeddingGapError(token_class)
        q = np.asarray(emb, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm > 0.0:
            q = q / norm
        cosines = self._matrix @ q
        resolved = self._classes[int(np.argmax(cosines))]  # first max = lowest id
        self._cache[token_class] = resolved
        return resolved


def resolve_oov(token_class: int, embeddings: EmbeddingTable,
                fdict: FingerprintDictionary) -> int:
    """One-shot nearest-fingerprinted-class lookup (uncached convenience)."""
    return OovResolver(embeddings, fdict.entries.keys()).resolve(token_class)


class ScoringKernel:
    """Fingerprint matrix plus class->row index for vectorized scoring."""

    def __init__(self, fdict: FingerprintDictionary):
        self.classes = sorted(fdict.entries)
        self.index = {c: i for i, c in enumerate(self.classes)}
        self.matrix = np.stack(
            [fdict.entries[c].vector for c in self.classes]).astype(np.float64)
        self.d = fdict.meta.d
        self.scope = fdict.meta.scope
        # dense class -> row table; -1 marks classes without a fingerprint
        self.lut = np.full(self.classes[-1] + 1, -1, dtype=np.int64)
        self.lut[self.classes] = np.arange(len(self.classes))

    def rows_for(self, classes: np.ndarray) -> np.ndarray:
        """Vectorized class -> fingerprint row lookup (-1 when absent)."""
        clipped = np.minimum(classes, len(self.lut) - 1)
        return np.where(classes < len(self.lut), self.lut[clipped], -1)


def token_score(
    hidden: np.ndarray,
    token_class: int,
    fdict: FingerprintDictionary,
    resolver: OovResolver | None,
    cfg: ScoringConfig,
) -> tuple[float | None, bool]:
    """Score one token; returns (score, was_oov). score is None when the
    token is excluded under the SKIP policy."""
    h = np.asarray(hidden, dtype=np.float64)
    h = h / np.linalg.norm(h)
    entry = fdict.entries.get(int(token_class))
    if entry is not None:
        return float(h @ entry.vector.astype(np.float64)), False
    if cfg.oov_policy == OovPolicy.SKIP:
        return None, True
    if resolver is None:
        raise EmbeddingGapError(int(token_class))
    resolved = resolver.resolve(int(token_class))
    f = fdict.entries[resolved].vector.astype(np.float64)
    return cfg.lam * float(h @ f), True


def score_candidate(
    record: CandidateRecord,
    fdict: FingerprintDictionary,
    resolver: OovResolver | None,
    cfg: ScoringConfig,
    kernel: ScoringKernel | None = None,
    source: str = "",
) -> ScoreRecord:
    """Pool token scores for one candidate into a ScoreRecord.

    The scored set excludes SPECIAL positions, positions outside the
    configured scope, zero-norm hidden states, and (under SKIP) OOV
    classes. An empty scored set yields the -inf sentinel.
    """
    kernel = kernel or ScoringKernel(fdict)
    if record.hidden.ndim != 2 or record.hidden.shape[1] != kernel.d:
        raise DimensionMismatchError(
            f"sample {record.sample_id!r}: hidden dim {record.hidden.shape} "
            f"vs dictionary D={kernel.d}")
    if cfg.scope != kernel.scope:
        raise ConfigMismatchError(
            f"scoring scope {cfg.scope.flag_name} != dictionary scope "
            f"{kernel.scope.flag_name}")

    total = record.T
    roles = record.roles
    if cfg.scope == ScoringScope.ALL:
        eligible = roles != int(Role.SPECIAL)
    elif cfg.scope == ScoringScope.PROMPT_ONLY:
        eligible = roles == int(Role.PROMPT)
    else:
        eligible = roles == int(Role.RESPONSE)

    idx = np.nonzero(eligible)[0]
    picked = record.hidden if len(idx) == total else record.hidden[idx]
    hidden = picked.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", hidden, hidden))
    nonzero = norms > 0.0
    if not nonzero.all():
        idx, hidden, norms = idx[nonzero], hidden[nonzero], norms[nonzero]

    rows = kernel.rows_for(record.token_ids[idx].astype(np.int64))
    oov_mask = rows < 0
    oov_count = int(oov_mask.sum())
    mult = None
    if oov_count:
        if cfg.oov_policy == OovPolicy.SKIP:
            keep = ~oov_mask
            idx, hidden, norms, rows = \
                idx[keep], hidden[keep], norms[keep], rows[keep]
        else:
            if resolver is None:
                raise EmbeddingGapError(int(record.token_ids[idx][oov_mask][0]))
            oov_pos = np.nonzero(oov_mask)[0]
            for k in oov_pos:
                cls = int(record.token_ids[idx[k]])
                rows[k] = kernel.index[resolver.resolve(cls)]
            mult = np.ones(len(rows))
            mult[oov_pos] = cfg.lam

    n_scored = len(idx)
    kappa = n_scored / total if total else 0.0
    if n_scored == 0:
        return ScoreRecord(record.sample_id, NEG_INF, None, None, kappa,
                           0, total, oov_count, source)

    # cos(h_hat, f) computed as (h . f) / ||h||, saving the hats matrix
    scores = np.einsum("ij,ij->i", hidden, kernel.matrix[rows]) / norms
    if mult is not None:
        scores *= mult
    # mean over distinct values weighted by frequency: c/N and (k*c)/(k*N)
    # round to the same float, so the mean is exactly invariant under
    # duplication or permutation of the token-score multiset
    vals, counts = np.unique(scores, return_counts=True)
    mu = float(vals @ (counts / n_scored))
    m = float(scores.max())
    s = cfg.w_mu * mu + cfg.w_m * m + cfg.eta * kappa
    return ScoreRecord(record.sample_id, s, mu, m, kappa,
                       n_scored, total, oov_count, source)


def score_corpus(
    candidates: Iterable[CandidateRecord],
    fdict: FingerprintDictionary,
    embeddings: EmbeddingTable | None,
    cfg: ScoringConfig,
    workers: int = 1,
    strict: bool = False,
    sources: dict[str, str] | None = None,
) -> tuple[list[ScoreRecord], list[ScoreError]]:
    """Score a candidate stream; results come back sorted by sample_id.

    Record tensors are streamed (bounded memory); only the small score rows
    are retained. Output is schedule-independent: the same records produce
    the same bytes for any worker count or shard split.
    """
    kernel = ScoringKernel(fdict)
    if cfg.scope != kernel.scope:
        raise ConfigMismatchError(
            f"scoring scope {cfg.scope.flag_name} != dictionary scope "
            f"{kernel.scope.flag_name}")
    resolver = OovResolver(embeddings, fdict.entries.keys()) if embeddings else None

    def score_one(record: CandidateRecord) -> ScoreRecord | ScoreError:
        source = sources.get(record.sample_id, "") if sources else ""
        try:
            return score_candidate(record, fdict, resolver, cfg, kernel, source)
        except (DimensionMismatchError, EmbeddingGapError) as exc:
            if strict:
                raise
            return ScoreError(record.sample_id, str(exc))

    results: list[ScoreRecord] = []
    errors: list[ScoreError] = []

    def sink(item: ScoreRecord | ScoreError) -> None:
        if isinstance(item, ScoreError):
            errors.append(item)
        else:
            results.append(item)

    if workers <= 1:
        for record in candidates:
            sink(score_one(record))
    else:
        # resolver cache writes are insert-once with identical values, so
        # concurrent resolution is benign
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for item in pool.map(score_one, candidates, chunksize=16):
                sink(item)

    results.sort(key=lambda r: r.sample_id)
    errors.sort(key=lambda e: e.sample_id)
    return results, errors


def chain_candidate_files(paths) -> Iterator[CandidateRecord]:
    """Stream several TRMC shards back to back."""
    from trim.formats import read_candidate_stream

    for path in paths:
        yield from read_candidate_stream(path)
