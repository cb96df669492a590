"""Forward-pass activation extractor for the TRIM interchange formats.

Runs a user-supplied causal-LM checkpoint over instruction datasets and
writes TRMV (validation), TRMC (candidate), and TRME (embedding) files
that the `trim` engine consumes.
"""

from trim_extract.extract import (
    EncodedSample,
    ExtractionJob,
    TEMPLATE_ID,
    encode_sample,
    extract,
    load_dataset,
)
from trim_extract.embeddings import dump_embeddings

__version__ = "0.1.0"

__all__ = [
    "EncodedSample",
    "ExtractionJob",
    "TEMPLATE_ID",
    "dump_embeddings",
    "encode_sample",
    "extract",
    "load_dataset",
]
