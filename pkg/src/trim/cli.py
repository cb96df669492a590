"""Command-line pipeline: validate, fingerprint, score, select, report, inspect.

Exit codes: 0 success, 1 no fingerprints, 2 validation / referential
failure, 3 config mismatch, 64 usage error. Set TRIM_LOG=debug for
verbose progress on stderr.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from trim.config import PipelineConfig, load_config
from trim.fingerprint import (
    FingerprintMeta,
    NoFingerprintsError,
    ScopeMismatchError,
    ScoringScope,
    build_fingerprints,
    collect_occurrences,
    load_fingerprints,
    save_fingerprints,
)
from trim.formats import (
    read_embedding_table,
    read_manifest,
    read_validation_file,
    validate_file,
)
from trim.saliency import SaliencyConfig, aggregated_saliency
from trim.scorer import (
    ConfigMismatchError,
    ScoreRecord,
    chain_candidate_files,
    score_corpus,
)
from trim.selection import (
    Budget,
    BudgetKind,
    MissingManifestEntryError,
    length_report,
    read_selection_manifest,
    select_top,
    subset_report,
    write_selection_manifest,
)

EXIT_OK = 0
EXIT_NO_FINGERPRINTS = 1
EXIT_VALIDATION = 2
EXIT_CONFIG_MISMATCH = 3
EXIT_USAGE = 64

log = logging.getLogger("trim")


def _setup_logging() -> None:
    level = os.environ.get("TRIM_LOG", "info").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )


_CONFIG_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="JSON config file; flags override it."),
    click.option("--layers", type=int, default=None, help="last N layers for saliency"),
    click.option("--wq", type=float, default=None, help="row-saliency weight"),
    click.option("--wk", type=float, default=None, help="column-saliency weight"),
    click.option("--wmu", type=float, default=None, help="mean-pooling weight"),
    click.option("--wm", type=float, default=None, help="max-pooling weight"),
    click.option("--eta", type=float, default=None, help="coverage bonus weight"),
    click.option("--lambda", "lam", type=float, default=None, help="OOV penalty"),
    click.option("--scope", type=click.Choice(["all", "prompt", "response"]),
                 default=None, help="token scoring scope"),
    click.option("--oov", type=click.Choice(["backoff", "skip"]), default=None,
                 help="policy for non-fingerprinted classes"),
]


def config_options(fn):
    for opt in reversed(_CONFIG_OPTIONS):
        fn = opt(fn)
    return fn


def _build_config(config_path, layers, wq, wk, wmu, wm, eta, lam, scope, oov) -> PipelineConfig:
    try:
        return load_config(config_path, {
            "layers": layers, "wq": wq, "wk": wk, "wmu": wmu, "wm": wm,
            "eta": eta, "lambda": lam, "scope": scope, "oov": oov,
        })
    except (ValueError, KeyError) as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        sys.exit(EXIT_USAGE)


def _capped_saliency(cfg: PipelineConfig, available_layers: int) -> SaliencyConfig:
    # l_used is capped at what the file actually stores
    s = cfg.saliency
    return SaliencyConfig(l_used=min(s.l_used, available_layers),
                          w_q=s.w_q, w_k=s.w_k, epsilon=s.epsilon)


@click.group()
def main() -> None:
    """Forward-only coreset selection over token fingerprints."""
    _setup_logging()


@main.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True))
def validate(files) -> None:
    """Check interchange files against their format invariants."""
    failed = False
    for path in files:
        report = validate_file(path)
        for check in report.checks:
            status = "ok" if check.passed else "FAIL"
            detail = f": {check.detail}" if check.detail else ""
            click.echo(f"{path}: {check.name}: {status}{detail}")
        failed |= not report.ok
    sys.exit(EXIT_VALIDATION if failed else EXIT_OK)


@main.command()
@click.argument("val_file", type=click.Path(exists=True))
@click.option("-o", "--out", "out_file", required=True, type=click.Path())
@config_options
def fingerprint(val_file, out_file, config_path, layers, wq, wk, wmu, wm, eta,
                lam, scope, oov) -> None:
    """Build a fingerprint dictionary (TRMF) from a validation file (TRMV)."""
    cfg = _build_config(config_path, layers, wq, wk, wmu, wm, eta, lam, scope, oov)
    report = validate_file(val_file)
    if not report.ok:
        for check in report.failures():
            click.echo(f"error: {val_file}: {check.name}: {check.detail}", err=True)
        sys.exit(EXIT_VALIDATION)

    records = read_validation_file(val_file)
    n_layers = records[0].attention.shape[0] if records else 0
    scfg = _capped_saliency(cfg, max(n_layers, 1))
    pairs = [(rec, aggregated_saliency(rec, scfg)) for rec in records]
    occurrences = collect_occurrences(pairs, cfg.scoring.scope)
    meta = FingerprintMeta(
        d=records[0].hidden.shape[1] if records else 0,
        l_used=scfg.l_used,
        w_q=scfg.w_q,
        w_k=scfg.w_k,
        scope=cfg.scoring.scope,
        validation_sample_ids=sorted(r.sample_id for r in records),
        config_hash=cfg.config_hash(),
    )
    try:
        fdict = build_fingerprints(occurrences, meta)
    except NoFingerprintsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NO_FINGERPRINTS)
    save_fingerprints(fdict, out_file)
    total_occ = sum(e.occurrence_count for e in fdict.entries.values())
    click.echo(
        f"built {len(fdict.entries)} fingerprints from {total_occ} occurrences "
        f"({occurrences.zero_norm_dropped} zero-norm positions dropped, "
        f"{len(fdict.dropped_classes)} degenerate classes dropped)", err=True)
    sys.exit(EXIT_OK)


@main.command()
@click.argument("cand_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-f", "--fingerprints", "fp_file", required=True, type=click.Path(exists=True))
@click.option("-e", "--embeddings", "emb_file", default=None, type=click.Path(exists=True))
@click.option("-o", "--out", "out_file", required=True, type=click.Path())
@click.option("--manifest", "manifest_file", default=None, type=click.Path(exists=True),
              help="corpus manifest; fills the source field of score rows")
@click.option("--workers", type=int, default=1)
@click.option("--strict", is_flag=True, help="abort on the first per-record error")
@config_options
def score(cand_files, fp_file, emb_file, out_file, manifest_file, workers, strict,
          config_path, layers, wq, wk, wmu, wm, eta, lam, scope, oov) -> None:
    """Score candidate files (TRMC) against a fingerprint dictionary."""
    cfg = _build_config(config_path, layers, wq, wk, wmu, wm, eta, lam, scope, oov)
    try:
        fdict = load_fingerprints(fp_file)
    except Exception as exc:
        click.echo(f"error: {fp_file}: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)

    scope_explicit = scope is not None or (
        config_path is not None and "scope" in json.load(open(config_path)))
    if not scope_explicit:
        # adopt the dictionary's scope unless the caller pinned one
        cfg.scoring.scope = fdict.meta.scope
    if cfg.scoring.scope != fdict.meta.scope:
        click.echo(
            f"error: scope {cfg.scoring.scope.flag_name} does not match dictionary "
            f"scope {fdict.meta.scope.flag_name}", err=True)
        sys.exit(EXIT_CONFIG_MISMATCH)

    embeddings = read_embedding_table(emb_file) if emb_file else None
    sources = None
    if manifest_file:
        sources = {sid: e.source for sid, e in read_manifest(manifest_file).items()}

    start = time.perf_counter()
    try:
        results, errors = score_corpus(
            chain_candidate_files(cand_files), fdict, embeddings, cfg.scoring,
            workers=workers, strict=strict, sources=sources)
    except ConfigMismatchError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_MISMATCH)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    elapsed = time.perf_counter() - start

    if strict and errors:
        click.echo(f"error: {errors[0].message}", err=True)
        sys.exit(EXIT_VALIDATION)

    meta = {
        "_meta": {
            "config": cfg.to_json(),
            "config_hash": cfg.config_hash(),
            "fingerprint_config_hash": fdict.meta.config_hash,
            "n_scored": len(results),
            "n_errors": len(errors),
        }
    }
    with open(out_file, "w", encoding="utf-8") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for rec in results:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        for err in errors:
            f.write(json.dumps(err.to_json(), sort_keys=True) + "\n")

    total_tokens = sum(r.total_tokens for r in results)
    oov_tokens = sum(r.oov_tokens for r in results)
    empty = sum(1 for r in results if r.empty_scope)
    rate = len(results) / elapsed if elapsed > 0 else float("inf")
    click.echo(
        f"scored {len(results)} records in {elapsed:.2f}s ({rate:.0f} rec/s); "
        f"oov tokens {oov_tokens}/{total_tokens}; empty-scope {empty}; "
        f"errors {len(errors)}", err=True)
    sys.exit(EXIT_OK)


def _read_score_file(path) -> tuple[list[ScoreRecord], dict]:
    records: list[ScoreRecord] = []
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
            if "error" in obj:
                continue
            records.append(ScoreRecord.from_json(obj))
    return records, meta


@main.command()
@click.argument("score_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-m", "--manifest", "manifest_file", required=True,
              type=click.Path(exists=True))
@click.option("-o", "--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--top-k", type=int, default=None)
@click.option("--top-p", type=float, default=None)
@click.option("--buckets", default=None,
              help="comma-separated length bucket edges, e.g. 0,128,256")
def select(score_files, manifest_file, out_dir, top_k, top_p, buckets) -> None:
    """Rank scores, select the coreset, and write diagnostic reports."""
    if (top_k is None) == (top_p is None):
        click.echo("error: exactly one of --top-k / --top-p is required", err=True)
        sys.exit(EXIT_USAGE)
    try:
        if top_k is not None:
            budget = Budget(BudgetKind.TOP_K, top_k)
        else:
            budget = Budget(BudgetKind.TOP_P, top_p)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)

    corpus = read_manifest(manifest_file)
    all_scores: list[ScoreRecord] = []
    hashes = set()
    config_echo: dict = {}
    for path in score_files:
        records, meta = _read_score_file(path)
        all_scores.extend(records)
        if meta:
            hashes.add(meta.get("config_hash", ""))
            config_echo = meta.get("config", config_echo)
    if len(hashes) > 1:
        click.echo(f"error: score files carry mixed config hashes: {sorted(hashes)}",
                   err=True)
        sys.exit(EXIT_CONFIG_MISMATCH)

    missing = [r.sample_id for r in all_scores if r.sample_id not in corpus]
    if missing:
        click.echo(f"error: {len(missing)} scored samples missing from manifest, "
                   f"first: {missing[0]!r}", err=True)
        sys.exit(EXIT_VALIDATION)

    for rec in all_scores:
        if not rec.source:
            rec.source = corpus[rec.sample_id].source

    config_echo = dict(config_echo)
    config_echo["config_hash"] = next(iter(hashes)) if hashes else ""
    manifest = select_top(all_scores, budget, corpus_size=len(corpus),
                          config=config_echo)
    if manifest.truncated:
        log.warning("budget %d exceeds %d selectable records; returning all",
                    manifest.requested, len(manifest.rows))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_selection_manifest(out / "selection.jsonl", manifest)

    edges = [int(x) for x in buckets.split(",")] if buckets else None
    try:
        lrep = length_report(manifest, corpus, edges)
        srep = subset_report(manifest, corpus)
    except MissingManifestEntryError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)

    (out / "length_report.csv").write_text(lrep.to_csv())
    (out / "subset_report.csv").write_text(srep.to_csv())
    lrep_json = lrep.to_json()
    lrep_json["config"] = config_echo
    srep_json = srep.to_json()
    srep_json["config"] = config_echo
    (out / "length_report.json").write_text(json.dumps(lrep_json, sort_keys=True, indent=2))
    (out / "subset_report.json").write_text(json.dumps(srep_json, sort_keys=True, indent=2))

    click.echo(f"selected {len(manifest.rows)} of {manifest.corpus_size} "
               f"({manifest.excluded_empty_scope} empty-scope excluded)", err=True)
    sys.exit(EXIT_OK)


@main.command()
@click.argument("selection_file", type=click.Path(exists=True))
@click.option("-m", "--manifest", "manifest_file", required=True,
              type=click.Path(exists=True))
@click.option("-o", "--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--buckets", default=None)
def report(selection_file, manifest_file, out_dir, buckets) -> None:
    """Regenerate reports from an existing selection manifest."""
    corpus = read_manifest(manifest_file)
    manifest = read_selection_manifest(selection_file)
    edges = [int(x) for x in buckets.split(",")] if buckets else None
    try:
        lrep = length_report(manifest, corpus, edges)
        srep = subset_report(manifest, corpus)
    except MissingManifestEntryError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "length_report.csv").write_text(lrep.to_csv())
    (out / "subset_report.csv").write_text(srep.to_csv())
    (out / "length_report.json").write_text(json.dumps(lrep.to_json(), sort_keys=True, indent=2))
    (out / "subset_report.json").write_text(json.dumps(srep.to_json(), sort_keys=True, indent=2))
    sys.exit(EXIT_OK)


@main.command()
@click.argument("val_file", type=click.Path(exists=True))
@click.option("-o", "--out", "out_file", default=None, type=click.Path(),
              help="write JSONL here instead of stdout")
@config_options
def inspect(val_file, out_file, config_path, layers, wq, wk, wmu, wm, eta,
            lam, scope, oov) -> None:
    """Dump per-position saliency for a validation file as JSON lines."""
    cfg = _build_config(config_path, layers, wq, wk, wmu, wm, eta, lam, scope, oov)
    records = read_validation_file(val_file)
    n_layers = records[0].attention.shape[0] if records else 1
    scfg = _capped_saliency(cfg, max(n_layers, 1))
    sink = open(out_file, "w", encoding="utf-8") if out_file else sys.stdout
    try:
        for rec in records:
            smap = aggregated_saliency(rec, scfg)
            for i in range(rec.T):
                sink.write(json.dumps({
                    "sample_id": rec.sample_id,
                    "position": i,
                    "token_class": int(rec.token_ids[i]),
                    "Q": smap.q[i],
                    "K": smap.k[i],
                    "alpha": smap.alpha[i],
                }, sort_keys=True) + "\n")
    finally:
        if out_file:
            sink.close()
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
