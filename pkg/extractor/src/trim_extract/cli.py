"""Command line interface for the activation extractor."""

import logging
import os
import sys

import click

from trim_extract.embeddings import FROM_RECORDS, FULL, MissingClassError, dump_embeddings
from trim_extract.extract import ExtractionJob, extract

EXIT_FAILURE = 2


@click.group()
def main():
    """Dump causal-LM activations into TRIM interchange files."""
    level = os.environ.get("TRIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("extract")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--kind", required=True, type=click.Choice(["validation", "candidate"]))
@click.option("--layers", type=int, default=6, show_default=True,
              help="last N layers of attention to capture (validation only)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dtype", type=click.Choice(["f16", "f32"]), default="f16",
              show_default=True)
@click.option("--max-len", type=int, default=512, show_default=True)
@click.option("--batch", "batch_size", type=int, default=8, show_default=True)
def cmd_extract(model_path, data_path, kind, layers, out_path, dtype,
                max_len, batch_size):
    """Run forward passes over a dataset and write a record file."""
    try:
        job = ExtractionJob(model_path, data_path, kind, out_path,
                            layers=layers, dtype=dtype, max_len=max_len,
                            batch_size=batch_size)
        summary = extract(job)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    click.echo(f"wrote {summary.written} {kind} records to {out_path}")
    if summary.truncated_ids:
        click.echo(f"truncated {len(summary.truncated_ids)} overlong samples")
    if summary.skipped_ids:
        click.echo(f"skipped {len(summary.skipped_ids)} samples", err=True)


@main.command("dump-embeddings")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--classes", type=click.Choice([FROM_RECORDS, FULL]),
              default=FROM_RECORDS, show_default=True)
@click.option("--records", "record_paths", multiple=True,
              type=click.Path(exists=True),
              help="record files defining the class set (from-records mode)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dtype", type=click.Choice(["f16", "f32"]), default="f32",
              show_default=True)
def cmd_dump_embeddings(model_path, classes, record_paths, out_path, dtype):
    """Write the model's input-embedding rows as a TRME table."""
    try:
        count = dump_embeddings(model_path, out_path, classes=classes,
                                record_paths=record_paths, dtype=dtype)
    except (MissingClassError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    click.echo(f"wrote {count} embedding rows to {out_path}")


if __name__ == "__main__":
    main()
