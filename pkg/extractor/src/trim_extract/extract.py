"""Dataset encoding and batched forward-pass extraction.

Every sample is tokenized as the prompt+response concatenation under a
fixed instruction template (BOS, prompt, SEP, response, EOS). Template
special tokens are marked SPECIAL, prompt tokens PROMPT, and response
tokens RESPONSE, so the role mask always partitions the sequence.

Hidden states are taken after the final transformer block and after the
final normalization layer (the representation feeding the LM head);
attention comes back as inference-mode post-softmax probabilities, which
requires the eager attention implementation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from trim.formats import (
    CandidateRecord,
    ManifestEntry,
    Role,
    ValidationRecord,
    write_candidate_file,
    write_manifest,
    write_validation_file,
)

log = logging.getLogger("trim_extract")

TEMPLATE_ID = "bos+prompt+sep+response+eos/v1"

VALIDATION = "validation"
CANDIDATE = "candidate"


@dataclass
class ExtractionJob:
    model_path: str
    data_path: str
    kind: str  # "validation" or "candidate"
    out_path: str
    layers: int = 6  # last N layers to capture (validation only)
    dtype: str = "f16"
    max_len: int = 512
    batch_size: int = 8

    def __post_init__(self):
        if self.kind not in (VALIDATION, CANDIDATE):
            raise ValueError(f"kind must be validation or candidate, got {self.kind!r}")
        if self.max_len < 4:
            raise ValueError("max_len must leave room for the template tokens")
        if self.layers < 1 or self.batch_size < 1:
            raise ValueError("layers and batch size must be positive")


@dataclass
class EncodedSample:
    sample_id: str
    token_ids: list[int]
    roles: list[int]
    source: str
    truncated: bool = False


@dataclass
class ExtractionSummary:
    written: int = 0
    truncated_ids: list[str] = field(default_factory=list)
    skipped_ids: list[str] = field(default_factory=list)


def load_dataset(path) -> list[dict]:
    """Read a JSONL dataset with id/prompt/response/source keys."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "id" not in row or "prompt" not in row:
                raise ValueError(f"{path}:{line_no}: rows need at least id and prompt")
            rows.append(row)
    return rows


def encode_sample(tokenizer, row: dict, max_len: int) -> EncodedSample:
    """Apply the instruction template and build the role mask.

    Overlong sequences lose response tokens from the tail first; only if
    the prompt alone exceeds the budget is the prompt tail cut too.
    """
    prompt_ids = tokenizer.encode(row["prompt"], add_special_tokens=False)
    response = row.get("response") or ""
    response_ids = tokenizer.encode(response, add_special_tokens=False) if response else []

    n_special = 3 if response_ids else 2  # bos (+ sep) + eos
    truncated = False
    budget = max_len - n_special
    if len(prompt_ids) + len(response_ids) > budget:
        truncated = True
        keep_resp = max(0, budget - len(prompt_ids))
        response_ids = response_ids[:keep_resp]
        if not response_ids:
            n_special = 2
            prompt_ids = prompt_ids[: max_len - n_special]

    ids = [tokenizer.bos_token_id]
    roles = [int(Role.SPECIAL)]
    ids += prompt_ids
    roles += [int(Role.PROMPT)] * len(prompt_ids)
    if response_ids:
        ids.append(tokenizer.sep_token_id)
        roles.append(int(Role.SPECIAL))
        ids += response_ids
        roles += [int(Role.RESPONSE)] * len(response_ids)
    ids.append(tokenizer.eos_token_id)
    roles.append(int(Role.SPECIAL))
    return EncodedSample(str(row["id"]), ids, roles, row.get("source", ""), truncated)


def _load_model(model_path: str, need_attentions: bool):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_path)
    kwargs = {"attn_implementation": "eager"} if need_attentions else {}
    model = AutoModelForCausalLM.from_pretrained(model_path, **kwargs)
    model.eval()
    return tokenizer, model


def _batched_forward(model, samples: list[EncodedSample], pad_id: int,
                     capture_attention: bool):
    """Right-pad one batch and run it; returns (hidden, attentions)."""
    width = max(len(s.token_ids) for s in samples)
    ids = torch.full((len(samples), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(samples), width), dtype=torch.long)
    for b, s in enumerate(samples):
        ids[b, : len(s.token_ids)] = torch.tensor(s.token_ids, dtype=torch.long)
        mask[b, : len(s.token_ids)] = 1
    with torch.no_grad():
        out = model(input_ids=ids, attention_mask=mask,
                    output_hidden_states=True,
                    output_attentions=capture_attention)
    return out.hidden_states[-1], out.attentions if capture_attention else None


def extract(job: ExtractionJob) -> ExtractionSummary:
    """Run forward passes and write the record file, manifest, and meta."""
    tokenizer, model = _load_model(job.model_path, job.kind == VALIDATION)
    n_layers = model.config.num_hidden_layers
    l_used = min(job.layers, n_layers)
    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = tokenizer.eos_token_id

    summary = ExtractionSummary()
    encoded: list[EncodedSample] = []
    for row in load_dataset(job.data_path):
        try:
            sample = encode_sample(tokenizer, row, job.max_len)
        except Exception as exc:
            log.warning("skipping sample %r: %s", row.get("id"), exc)
            summary.skipped_ids.append(str(row.get("id")))
            continue
        if sample.truncated:
            summary.truncated_ids.append(sample.sample_id)
        encoded.append(sample)

    records = []
    manifest = []
    for start in range(0, len(encoded), job.batch_size):
        batch = encoded[start: start + job.batch_size]
        hidden, attentions = _batched_forward(
            model, batch, pad_id, job.kind == VALIDATION)
        for b, sample in enumerate(batch):
            t = len(sample.token_ids)
            token_ids = np.asarray(sample.token_ids, dtype=np.uint32)
            roles = np.asarray(sample.roles, dtype=np.uint8)
            h = hidden[b, :t].numpy().astype(np.float32)
            if job.kind == VALIDATION:
                attn = np.stack(
                    [attentions[layer][b, :, :t, :t].numpy()
                     for layer in range(n_layers - l_used, n_layers)],
                ).astype(np.float32)
                records.append(ValidationRecord(sample.sample_id, token_ids,
                                                roles, h, attn))
            else:
                records.append(CandidateRecord(sample.sample_id, token_ids,
                                               roles, h))
            manifest.append(ManifestEntry(sample.sample_id, sample.source, t))

    writer = write_validation_file if job.kind == VALIDATION else write_candidate_file
    writer(job.out_path, records, dtype=job.dtype)
    write_manifest(_sibling(job.out_path, ".manifest.jsonl"), manifest)
    meta = {
        "template": TEMPLATE_ID,
        "hidden_states": "post-final-norm",
        "model": str(job.model_path),
        "kind": job.kind,
        "dtype": job.dtype,
        "layers_captured": l_used if job.kind == VALIDATION else 0,
        "truncated_ids": summary.truncated_ids,
        "skipped_ids": summary.skipped_ids,
    }
    _sibling(job.out_path, ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary.written = len(records)
    return summary


def _sibling(out_path, suffix: str) -> Path:
    out = Path(out_path)
    return out.with_name(out.name + suffix)
