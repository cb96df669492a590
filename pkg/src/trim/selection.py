"""Top-K coreset selection and diagnostic reports.

Selection is a streaming reduction with O(K) working memory; the total
order is (score desc, sample_id asc), so output is deterministic and
shard-mergeable. Empty-scope sentinel records are never selected.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from trim.formats import ManifestEntry
from trim.scorer import NEG_INF, ScoreRecord

DEFAULT_BUCKET_EDGES = [0, 128, 256, 512, 1024, 2048]


class BudgetKind(Enum):
    TOP_K = "top_k"
    TOP_P = "top_p"


@dataclass
class Budget:
    kind: BudgetKind
    value: float

    def __post_init__(self):
        if self.kind == BudgetKind.TOP_K:
            if int(self.value) < 1:
                raise ValueError(f"top-k count must be >= 1, got {self.value}")
        else:
            if not (0.0 < self.value <= 1.0):
                raise ValueError(f"top-p fraction must be in (0, 1], got {self.value}")

    def resolve(self, corpus_size: int) -> int:
        if self.kind == BudgetKind.TOP_K:
            return int(self.value)
        return math.ceil(self.value * corpus_size)


@dataclass
class SelectionRow:
    rank: int
    sample_id: str
    S: float
    source: str


@dataclass
class SelectionManifest:
    rows: list[SelectionRow]
    corpus_size: int
    requested: int
    excluded_empty_scope: int
    config: dict = field(default_factory=dict)
    truncated: bool = False  # budget exceeded the number of selectable records


class _HeapItem:
    """Orders by badness: lower score first, then higher sample_id."""

    __slots__ = ("record",)

    def __init__(self, record: ScoreRecord):
        self.record = record

    def __lt__(self, other: "_HeapItem") -> bool:
        a, b = self.record, other.record
        if a.S != b.S:
            return a.S < b.S
        return a.sample_id > b.sample_id


def select_top(scores: Iterable[ScoreRecord], budget: Budget,
               corpus_size: int | None = None, config: dict | None = None) -> SelectionManifest:
    """Exact top-K under (S desc, sample_id asc) with a bounded heap.

    TOP_P budgets resolve against `corpus_size` when given, else against
    the number of score records seen. Sentinel (-inf) records are counted
    but never selected.
    """
    records = scores
    heap: list[_HeapItem] = []
    seen = 0
    excluded = 0
    deferred: list[ScoreRecord] | None = None
    k: int | None = None
    if budget.kind == BudgetKind.TOP_K or corpus_size is not None:
        k = budget.resolve(corpus_size or 0)  # corpus_size unused for TOP_K
    else:
        deferred = []

    for rec in records:
        seen += 1
        if rec.S == NEG_INF or rec.empty_scope:
            excluded += 1
            continue
        if deferred is not None:
            deferred.append(rec)
            continue
        item = _HeapItem(rec)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif not item < heap[0]:  # item beats the current worst kept
            heapq.heapreplace(heap, item)

    if deferred is not None:
        k = budget.resolve(seen)
        for rec in deferred:
            item = _HeapItem(rec)
            if len(heap) < k:
                heapq.heappush(heap, item)
            elif not item < heap[0]:
                heapq.heapreplace(heap, item)

    ordered = sorted((h.record for h in heap),
                     key=lambda r: (-r.S, r.sample_id))
    rows = [SelectionRow(rank, r.sample_id, r.S, r.source)
            for rank, r in enumerate(ordered, 1)]
    return SelectionManifest(
        rows=rows,
        corpus_size=corpus_size if corpus_size is not None else seen,
        requested=k,
        excluded_empty_scope=excluded,
        config=config or {},
        truncated=len(rows) < k,
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class LengthReport:
    bucket_labels: list[str]
    selected_counts: list[int]
    selected_pct: list[float]
    pool_counts: list[int]
    pool_pct: list[float]
    selected_mean: float
    selected_median: float
    pool_mean: float
    pool_median: float

    def to_json(self) -> dict:
        return {
            "buckets": [
                {
                    "label": label,
                    "selected_count": sc,
                    "selected_pct": sp,
                    "pool_count": pc,
                    "pool_pct": pp,
                }
                for label, sc, sp, pc, pp in zip(
                    self.bucket_labels, self.selected_counts, self.selected_pct,
                    self.pool_counts, self.pool_pct)
            ],
            "selected_mean_tokens": self.selected_mean,
            "selected_median_tokens": self.selected_median,
            "pool_mean_tokens": self.pool_mean,
            "pool_median_tokens": self.pool_median,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "selected_count", "selected_pct", "pool_count", "pool_pct"])
        for row in zip(self.bucket_labels, self.selected_counts, self.selected_pct,
                       self.pool_counts, self.pool_pct):
            w.writerow(row)
        return buf.getvalue()


@dataclass
class SubsetReport:
    sources: list[str]
    selected_counts: list[int]
    selected_pct: list[float]
    pool_counts: list[int]
    pool_pct: list[float]

    def to_json(self) -> dict:
        return {
            "sources": [
                {
                    "source": src,
                    "selected_count": sc,
                    "selected_pct": sp,
                    "pool_count": pc,
                    "pool_pct": pp,
                }
                for src, sc, sp, pc, pp in zip(
                    self.sources, self.selected_counts, self.selected_pct,
                    self.pool_counts, self.pool_pct)
            ]
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "selected_count", "selected_pct", "pool_count", "pool_pct"])
        for row in zip(self.sources, self.selected_counts, self.selected_pct,
                       self.pool_counts, self.pool_pct):
            w.writerow(row)
        return buf.getvalue()


class MissingManifestEntryError(KeyError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r} missing from corpus manifest")


def _bucket_labels(edges: list[int]) -> list[str]:
    labels = [f"[{lo},{hi})" for lo, hi in zip(edges, edges[1:])]
    labels.append(f"[{edges[-1]},inf)")
    return labels


def _bucket_index(n: int, edges: list[int]) -> int:
    for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
        if lo <= n < hi:
            return i
    return len(edges) - 1


def _pct(counts: list[int]) -> list[float]:
    total = sum(counts)
    if total == 0:
        return [0.0 for _ in counts]
    return [100.0 * c / total for c in counts]


def length_report(
    manifest: SelectionManifest,
    corpus_manifest: dict[str, ManifestEntry],
    bucket_edges: list[int] | None = None,
) -> LengthReport:
    edges = bucket_edges or DEFAULT_BUCKET_EDGES
    n_buckets = len(edges)
    sel_counts = [0] * n_buckets
    sel_lengths = []
    for row in manifest.rows:
        entry = corpus_manifest.get(row.sample_id)
        if entry is None:
            raise MissingManifestEntryError(row.sample_id)
        sel_counts[_bucket_index(entry.n_tokens, edges)] += 1
        sel_lengths.append(entry.n_tokens)
    pool_counts = [0] * n_buckets
    pool_lengths = []
    for entry in corpus_manifest.values():
        pool_counts[_bucket_index(entry.n_tokens, edges)] += 1
        pool_lengths.append(entry.n_tokens)
    return LengthReport(
        bucket_labels=_bucket_labels(edges),
        selected_counts=sel_counts,
        selected_pct=_pct(sel_counts),
        pool_counts=pool_counts,
        pool_pct=_pct(pool_counts),
        selected_mean=statistics.fmean(sel_lengths) if sel_lengths else 0.0,
        selected_median=float(statistics.median(sel_lengths)) if sel_lengths else 0.0,
        pool_mean=statistics.fmean(pool_lengths) if pool_lengths else 0.0,
        pool_median=float(statistics.median(pool_lengths)) if pool_lengths else 0.0,
    )


def subset_report(
    manifest: SelectionManifest,
    corpus_manifest: dict[str, ManifestEntry],
) -> SubsetReport:
    sel: dict[str, int] = {}
    for row in manifest.rows:
        entry = corpus_manifest.get(row.sample_id)
        if entry is None:
            raise MissingManifestEntryError(row.sample_id)
        sel[entry.source] = sel.get(entry.source, 0) + 1
    pool: dict[str, int] = {}
    for entry in corpus_manifest.values():
        pool[entry.source] = pool.get(entry.source, 0) + 1
    sources = sorted(pool.keys() | sel.keys())
    sel_counts = [sel.get(s, 0) for s in sources]
    pool_counts = [pool.get(s, 0) for s in sources]
    return SubsetReport(
        sources=sources,
        selected_counts=sel_counts,
        selected_pct=_pct(sel_counts),
        pool_counts=pool_counts,
        pool_pct=_pct(pool_counts),
    )


# ---------------------------------------------------------------------------
# selection manifest I/O (JSONL: meta line, then one row per selected sample)


def write_selection_manifest(path, manifest: SelectionManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        meta = {
            "_meta": {
                "corpus_size": manifest.corpus_size,
                "requested": manifest.requested,
                "excluded_empty_scope": manifest.excluded_empty_scope,
                "truncated": manifest.truncated,
                "config": manifest.config,
            }
        }
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for row in manifest.rows:
            f.write(json.dumps(
                {"rank": row.rank, "sample_id": row.sample_id,
                 "S": row.S, "source": row.source}, sort_keys=True) + "\n")


def read_selection_manifest(path) -> SelectionManifest:
    rows: list[SelectionRow] = []
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_meta" in obj:
                meta = obj["_meta"]
                continue
            rows.append(SelectionRow(obj["rank"], obj["sample_id"], obj["S"],
                                     obj.get("source", "")))
    return SelectionManifest(
        rows=rows,
        corpus_size=meta.get("corpus_size", len(rows)),
        requested=meta.get("requested", len(rows)),
        excluded_empty_scope=meta.get("excluded_empty_scope", 0),
        config=meta.get("config", {}),
        truncated=meta.get("truncated", False),
    )
