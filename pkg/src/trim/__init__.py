"""Forward-only coreset selection over token fingerprints.

Stage I builds saliency-weighted fingerprints per token class from a small
set of target-task activation records; Stage II streams a large candidate
corpus and scores every sample token-by-token against those fingerprints.
All heavy inputs travel as binary activation files (TRMV/TRMC/TRME/TRMF)
so the engine never touches a model.
"""

from trim.formats import (
    CandidateRecord,
    EmbeddingTable,
    ManifestEntry,
    Role,
    ValidationRecord,
    read_candidate_stream,
    read_embedding_table,
    read_manifest,
    read_validation_file,
    validate_file,
    write_candidate_file,
    write_embedding_table,
    write_manifest,
    write_validation_file,
)
from trim.saliency import SaliencyConfig, SaliencyMap, aggregated_saliency
from trim.fingerprint import (
    FingerprintDictionary,
    ScoringScope,
    build_fingerprints,
    collect_occurrences,
    load_fingerprints,
    save_fingerprints,
)
from trim.scorer import (
    OovPolicy,
    OovResolver,
    ScoreRecord,
    ScoringConfig,
    score_candidate,
    score_corpus,
)
from trim.selection import Budget, SelectionManifest, length_report, select_top, subset_report

__version__ = "0.1.0"
