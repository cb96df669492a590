"""Pipeline configuration: defaults, JSON config files, and provenance hashes.

Precedence is CLI flags > config file > built-in defaults. Every output
artifact carries the sha256 hash of the effective config that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from trim.fingerprint import ScoringScope
from trim.saliency import SaliencyConfig
from trim.scorer import OovPolicy, ScoringConfig


@dataclass
class PipelineConfig:
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def to_json(self) -> dict:
        return {
            "layers": self.saliency.l_used,
            "wq": self.saliency.w_q,
            "wk": self.saliency.w_k,
            "epsilon": self.saliency.epsilon,
            "lambda": self.scoring.lam,
            "wmu": self.scoring.w_mu,
            "wm": self.scoring.w_m,
            "eta": self.scoring.eta,
            "scope": self.scoring.scope.flag_name,
            "oov": self.scoring.oov_policy.value,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        base = cls()
        merged = base.to_json()
        unknown = set(obj) - set(merged)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(obj)
        return cls(
            saliency=SaliencyConfig(
                l_used=int(merged["layers"]),
                w_q=float(merged["wq"]),
                w_k=float(merged["wk"]),
                epsilon=float(merged["epsilon"]),
            ),
            scoring=ScoringConfig(
                lam=float(merged["lambda"]),
                w_mu=float(merged["wmu"]),
                w_m=float(merged["wm"]),
                eta=float(merged["eta"]),
                scope=ScoringScope.from_name(merged["scope"]),
                oov_policy=OovPolicy(merged["oov"]),
            ),
        )


def load_config(path: str | None, overrides: dict) -> PipelineConfig:
    """Merge defaults <- config file <- non-None overrides."""
    file_obj: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            file_obj = json.load(f)
    file_obj.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(file_obj)
