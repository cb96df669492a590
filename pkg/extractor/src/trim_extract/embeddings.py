"""Input-embedding table export (TRME)."""

from __future__ import annotations

import numpy as np

from trim.formats import (
    EmbeddingTable,
    peek_magic,
    read_candidate_stream,
    read_validation_file,
    write_embedding_table,
)

FROM_RECORDS = "from-records"
FULL = "full"


class MissingClassError(Exception):
    """A record references a token class outside the model vocabulary."""


def observed_classes(record_paths) -> set[int]:
    """Union of token classes appearing in TRMV/TRMC files."""
    classes: set[int] = set()
    for path in record_paths:
        magic = peek_magic(path)
        if magic == b"TRMV":
            records = read_validation_file(path)
        else:
            records = read_candidate_stream(path)
        for rec in records:
            classes.update(int(c) for c in np.unique(rec.token_ids))
    return classes


def dump_embeddings(model_path: str, out_path, classes: str = FROM_RECORDS,
                    record_paths=(), dtype: str = "f32") -> int:
    """Write the input-embedding rows for the requested classes.

    `classes` selects either the union of classes observed in
    `record_paths` or the full vocabulary. Returns the entry count.
    """
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(model_path)
    model.eval()
    weight = model.get_input_embeddings().weight.detach().numpy()
    vocab, d_e = weight.shape

    if classes == FULL:
        wanted = range(vocab)
    elif classes == FROM_RECORDS:
        if not record_paths:
            raise ValueError("from-records mode needs at least one record file")
        wanted = sorted(observed_classes(record_paths))
        missing = [c for c in wanted if c >= vocab]
        if missing:
            raise MissingClassError(
                f"class {missing[0]} referenced by records but vocabulary "
                f"has only {vocab} entries")
    else:
        raise ValueError(f"unknown classes mode {classes!r}")

    entries = {int(c): weight[c].astype(np.float32) for c in wanted}
    write_embedding_table(out_path, EmbeddingTable(entries, d_e), dtype=dtype)
    return len(entries)
