"""Row, column, and aggregated token saliency from attention tensors.

Row saliency rewards tokens whose outgoing attention is sharply allocated
(1 minus entropy normalized by the log of the key support size); column
saliency rewards tokens that receive attention, min-max scaled per sample.
The aggregate is a convex combination of the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trim.formats import ValidationRecord


class EmptyRowError(ValueError):
    """Attention row with no valid keys."""


@dataclass
class SaliencyConfig:
    l_used: int = 6  # last N layers to aggregate
    w_q: float = 0.5
    w_k: float = 0.5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.w_q < 0 or self.w_k < 0 or abs(self.w_q + self.w_k - 1.0) > 1e-9:
            raise ValueError(f"row/column weights must be a convex pair, got "
                             f"({self.w_q}, {self.w_k})")
        if self.l_used < 1:
            raise ValueError(f"l_used must be >= 1, got {self.l_used}")


@dataclass
class SaliencyMap:
    q: np.ndarray  # f64[T], row saliency
    k: np.ndarray  # f64[T], normalized column saliency
    alpha: np.ndarray = field(default=None)  # f64[T], aggregated

    @property
    def T(self) -> int:
        return len(self.alpha)


def row_entropy(attention_row: np.ndarray, valid_keys: int, epsilon: float = 1e-8) -> float:
    """Entropy of one attention row; zero entries contribute nothing."""
    if valid_keys < 1:
        raise EmptyRowError("attention row with zero valid keys")
    row = np.asarray(attention_row, dtype=np.float64)
    return float(-np.sum(row * np.log(row + epsilon)))


def row_saliency(attention_row: np.ndarray, valid_keys: int, epsilon: float = 1e-8) -> float:
    """1 - entropy / log(support size), clamped to [0, 1].

    A row with a single nonzero key is maximally sharp by convention
    (the continuous limit of [1-d, d] as d -> 0).
    """
    h = row_entropy(attention_row, valid_keys, epsilon)
    support = int(np.count_nonzero(np.asarray(attention_row)))
    if support <= 1:
        return 1.0
    return float(np.clip(1.0 - h / np.log(support), 0.0, 1.0))


def _used_layers(record: ValidationRecord, cfg: SaliencyConfig) -> np.ndarray:
    n_layers = record.attention.shape[0]
    if cfg.l_used > n_layers:
        raise ValueError(f"l_used={cfg.l_used} exceeds {n_layers} stored layers")
    return np.asarray(record.attention[n_layers - cfg.l_used:], dtype=np.float64)


def aggregate_row_saliency(record: ValidationRecord, cfg: SaliencyConfig) -> np.ndarray:
    """Mean of per-(layer, head) row saliency over the last l_used layers."""
    attn = _used_layers(record, cfg)  # [L', H, T, T]
    support = np.count_nonzero(attn, axis=3)  # [L', H, T]
    entropy = -np.sum(attn * np.log(attn + cfg.epsilon), axis=3)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 1.0 - entropy / np.log(support)
    q = np.where(support <= 1, 1.0, q)
    q = np.clip(q, 0.0, 1.0)
    return q.mean(axis=(0, 1))


def column_saliency(record: ValidationRecord, cfg: SaliencyConfig) -> np.ndarray:
    """Per-column received-attention average, min-max scaled per sample.

    Columns with no nonzero entries contribute raw 0 and are excluded from
    the min/max statistics.
    """
    attn = _used_layers(record, cfg)  # [L', H, T, T]
    t = attn.shape[-1]
    if t == 0:
        return np.zeros(0)
    colsum = attn.sum(axis=2)  # [L', H, T]
    receivers = np.count_nonzero(attn, axis=2)  # [L', H, T]
    k = np.where(receivers > 0, colsum / np.maximum(receivers, 1), 0.0)
    k_raw = k.mean(axis=(0, 1))  # [T]
    supported = receivers.sum(axis=(0, 1)) > 0
    if not supported.any():
        return np.zeros(t)
    k_min = k_raw[supported].min()
    k_max = k_raw[supported].max()
    return np.clip((k_raw - k_min) / (k_max - k_min + cfg.epsilon), 0.0, 1.0)


def aggregated_saliency(record: ValidationRecord, cfg: SaliencyConfig | None = None) -> SaliencyMap:
    """Convex combination of row and column saliency for every position.

    SPECIAL positions get values too; exclusion is the consumer's job.
    """
    cfg = cfg or SaliencyConfig()
    q = aggregate_row_saliency(record, cfg)
    k = column_saliency(record, cfg)
    return SaliencyMap(q=q, k=k, alpha=cfg.w_q * q + cfg.w_k * k)
