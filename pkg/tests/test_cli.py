import json

import numpy as np
import pytest
from click.testing import CliRunner

from trim.cli import main
from trim.config import PipelineConfig
from trim.fingerprint import load_fingerprints
from trim.formats import (
    EmbeddingTable,
    Role,
    write_candidate_file,
    write_embedding_table,
    write_manifest,
    write_validation_file,
)
from synth import (
    random_corpus,
    random_embedding_table,
    random_validation_record,
)

VOCAB, D, L, H = 24, 6, 2, 2


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path, rng):
    val = [random_validation_record(rng, f"v{i}", 10, L, H, D, VOCAB)
           for i in range(5)]
    write_validation_file(tmp_path / "val.trmv", val)
    cands, manifest = random_corpus(rng, 40, 12, D, VOCAB)
    write_candidate_file(tmp_path / "cands.trmc", cands)
    write_manifest(tmp_path / "manifest.jsonl", manifest)
    write_embedding_table(tmp_path / "emb.trme", random_embedding_table(rng, VOCAB, D))
    return tmp_path, val, cands


def run(runner, args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestValidateCommand:
    def test_ok_file(self, runner, workspace):
        ws, _, _ = workspace
        res = run(runner, ["validate", ws / "val.trmv"])
        assert res.exit_code == 0

    def test_corrupt_file_exits_2(self, runner, workspace):
        ws, _, _ = workspace
        data = bytearray((ws / "val.trmv").read_bytes())
        data[:4] = b"NOPE"
        (ws / "bad.trmv").write_bytes(bytes(data))
        res = run(runner, ["validate", ws / "bad.trmv"])
        assert res.exit_code == 2


class TestFingerprintCommand:
    def test_class_count_bounded_by_tokens(self, runner, workspace):
        ws, val, _ = workspace
        res = run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf"])
        assert res.exit_code == 0
        fdict = load_fingerprints(ws / "f.trmf")
        in_scope = sum(int((r.roles != int(Role.SPECIAL)).sum()) for r in val)
        assert 1 <= len(fdict.entries) <= in_scope
        assert fdict.meta.l_used == 2  # capped at stored layers

    def test_rerun_byte_identical(self, runner, workspace):
        ws, _, _ = workspace
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "a.trmf"])
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "b.trmf"])
        assert (ws / "a.trmf").read_bytes() == (ws / "b.trmf").read_bytes()

    def test_empty_scope_exits_1(self, runner, tmp_path, rng):
        rec = random_validation_record(rng, "v0", 6, 1, 1, D, VOCAB)
        rec.roles[:] = int(Role.PROMPT)
        write_validation_file(tmp_path / "p.trmv", [rec])
        res = run(runner, ["fingerprint", tmp_path / "p.trmv",
                           "-o", tmp_path / "f.trmf", "--scope", "response"])
        assert res.exit_code == 1

    def test_invalid_input_exits_2(self, runner, workspace, rng):
        ws, val, _ = workspace
        val[0].attention[0, 0, 1, :2] *= 0.5
        write_validation_file(ws / "broken.trmv", val)
        res = run(runner, ["fingerprint", ws / "broken.trmv", "-o", ws / "f.trmf"])
        assert res.exit_code == 2


class TestScoreCommand:
    def _fingerprint(self, runner, ws):
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf"])

    def test_score_and_output_schema(self, runner, workspace):
        ws, _, cands = workspace
        self._fingerprint(runner, ws)
        res = run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                           "-e", ws / "emb.trme", "-o", ws / "scores.jsonl",
                           "--manifest", ws / "manifest.jsonl"])
        assert res.exit_code == 0
        lines = (ws / "scores.jsonl").read_text().strip().split("\n")
        meta = json.loads(lines[0])["_meta"]
        assert meta["n_scored"] == len(cands)
        row = json.loads(lines[1])
        assert set(row) == {"sample_id", "S", "mu", "m", "kappa", "scored_tokens",
                            "total_tokens", "oov_tokens", "source", "empty_scope"}
        ids = [json.loads(l)["sample_id"] for l in lines[1:]]
        assert ids == sorted(ids)

    def test_full_coverage_has_no_oov(self, runner, tmp_path, rng):
        # validation covers every class the candidates use
        classes = np.arange(VOCAB, dtype=np.uint32)
        val = [random_validation_record(rng, f"v{i}", VOCAB, 1, 1, D, VOCAB)
               for i in range(2)]
        for rec in val:
            rec.token_ids = classes.copy()
            rec.roles[:] = int(Role.PROMPT)
        write_validation_file(tmp_path / "val.trmv", val)
        cands, _ = random_corpus(rng, 10, 8, D, VOCAB)
        write_candidate_file(tmp_path / "c.trmc", cands)
        run(runner, ["fingerprint", tmp_path / "val.trmv", "-o", tmp_path / "f.trmf"])
        res = run(runner, ["score", tmp_path / "c.trmc", "-f", tmp_path / "f.trmf",
                           "-o", tmp_path / "s.jsonl"])
        assert res.exit_code == 0
        rows = [json.loads(l) for l in
                (tmp_path / "s.jsonl").read_text().strip().split("\n")[1:]]
        assert all(r["oov_tokens"] == 0 for r in rows)

    def test_shards_equal_concatenated(self, runner, workspace, rng):
        ws, _, cands = workspace
        self._fingerprint(runner, ws)
        write_candidate_file(ws / "shard1.trmc", cands[:17])
        write_candidate_file(ws / "shard2.trmc", cands[17:])
        run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                     "-e", ws / "emb.trme", "-o", ws / "one.jsonl"])
        run(runner, ["score", ws / "shard1.trmc", ws / "shard2.trmc",
                     "-f", ws / "f.trmf", "-e", ws / "emb.trme",
                     "-o", ws / "two.jsonl"])
        assert (ws / "one.jsonl").read_bytes() == (ws / "two.jsonl").read_bytes()

    def test_worker_counts_byte_identical(self, runner, workspace):
        ws, _, _ = workspace
        self._fingerprint(runner, ws)
        outs = []
        for w in (1, 4, 8):
            out = ws / f"w{w}.jsonl"
            run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                         "-e", ws / "emb.trme", "-o", out, "--workers", w])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_scope_mismatch_exits_3(self, runner, workspace):
        ws, _, _ = workspace
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf",
                     "--scope", "response"])
        res = run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                           "-e", ws / "emb.trme", "-o", ws / "s.jsonl",
                           "--scope", "all"])
        assert res.exit_code == 3

    def test_scope_adopted_from_dictionary(self, runner, workspace):
        ws, _, _ = workspace
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf",
                     "--scope", "response"])
        res = run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                           "-e", ws / "emb.trme", "-o", ws / "s.jsonl"])
        assert res.exit_code == 0


class TestSelectCommand:
    def _pipeline(self, runner, ws):
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf"])
        run(runner, ["score", ws / "cands.trmc", "-f", ws / "f.trmf",
                     "-e", ws / "emb.trme", "-o", ws / "scores.jsonl",
                     "--manifest", ws / "manifest.jsonl"])

    def test_top_p_resolution(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        res = run(runner, ["select", ws / "scores.jsonl", "-m", ws / "manifest.jsonl",
                           "-o", ws / "out", "--top-p", "0.05"])
        assert res.exit_code == 0
        rows = [json.loads(l) for l in
                (ws / "out" / "selection.jsonl").read_text().strip().split("\n")]
        assert len([r for r in rows if "rank" in r]) == 2  # ceil(0.05*40)
        assert (ws / "out" / "length_report.csv").exists()
        assert (ws / "out" / "subset_report.csv").exists()
        assert (ws / "out" / "length_report.json").exists()
        assert (ws / "out" / "subset_report.json").exists()

    def test_top_k_zero_is_usage_error(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        res = run(runner, ["select", ws / "scores.jsonl", "-m", ws / "manifest.jsonl",
                           "-o", ws / "out", "--top-k", "0"])
        assert res.exit_code == 64

    def test_both_budgets_is_usage_error(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        res = run(runner, ["select", ws / "scores.jsonl", "-m", ws / "manifest.jsonl",
                           "-o", ws / "out", "--top-k", "5", "--top-p", "0.1"])
        assert res.exit_code == 64

    def test_referential_gap_exits_2(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        write_manifest(ws / "short.jsonl", [])
        res = run(runner, ["select", ws / "scores.jsonl", "-m", ws / "short.jsonl",
                           "-o", ws / "out", "--top-k", "5"])
        assert res.exit_code == 2

    def test_selection_sources_filled_from_manifest(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        run(runner, ["select", ws / "scores.jsonl", "-m", ws / "manifest.jsonl",
                     "-o", ws / "out", "--top-k", "10"])
        rows = [json.loads(l) for l in
                (ws / "out" / "selection.jsonl").read_text().strip().split("\n")
                if "rank" in json.loads(l)]
        assert all(r["source"] for r in rows)

    def test_rerun_byte_identical(self, runner, workspace):
        ws, _, _ = workspace
        self._pipeline(runner, ws)
        for d in ("o1", "o2"):
            run(runner, ["select", ws / "scores.jsonl", "-m", ws / "manifest.jsonl",
                         "-o", ws / d, "--top-k", "10"])
        for name in ("selection.jsonl", "length_report.csv", "subset_report.csv",
                     "length_report.json", "subset_report.json"):
            assert (ws / "o1" / name).read_bytes() == (ws / "o2" / name).read_bytes()


class TestInspectCommand:
    def test_jsonl_schema(self, runner, workspace):
        ws, val, _ = workspace
        res = run(runner, ["inspect", ws / "val.trmv", "-o", ws / "sal.jsonl"])
        assert res.exit_code == 0
        lines = (ws / "sal.jsonl").read_text().strip().split("\n")
        assert len(lines) == sum(r.T for r in val)
        row = json.loads(lines[0])
        assert set(row) == {"sample_id", "position", "token_class", "Q", "K", "alpha"}
        assert 0.0 <= row["alpha"] <= 1.0


class TestConfigPrecedence:
    def test_flag_overrides_config_file(self, runner, workspace):
        ws, _, _ = workspace
        (ws / "cfg.json").write_text(json.dumps({"eta": 0.2, "lambda": 0.5}))
        run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf",
                     "--config", ws / "cfg.json", "--eta", "0.3"])
        fdict = load_fingerprints(ws / "f.trmf")
        expected = PipelineConfig.from_dict({"eta": 0.3, "lambda": 0.5}).config_hash()
        assert fdict.meta.config_hash == expected

    def test_unknown_config_key_is_usage_error(self, runner, workspace):
        ws, _, _ = workspace
        (ws / "cfg.json").write_text(json.dumps({"bogus": 1}))
        res = run(runner, ["fingerprint", ws / "val.trmv", "-o", ws / "f.trmf",
                           "--config", ws / "cfg.json"])
        assert res.exit_code == 64
