import numpy as np
import pytest

from trim.fingerprint import (
    DimensionMismatchError,
    FingerprintMeta,
    NoFingerprintsError,
    OccurrenceSet,
    ScoringScope,
    build_fingerprints,
    collect_occurrences,
    load_fingerprints,
    save_fingerprints,
)
from trim.formats import Role, ValidationRecord
from trim.saliency import SaliencyConfig, SaliencyMap, aggregated_saliency
from reference import ref_build_fingerprints, ref_saliency
from synth import random_validation_record


def meta(d=4, scope=ScoringScope.ALL):
    return FingerprintMeta(d=d, l_used=1, w_q=0.5, w_k=0.5, scope=scope)


def record_with(sample_id, token_ids, roles, hidden):
    t = len(token_ids)
    return ValidationRecord(
        sample_id,
        np.asarray(token_ids, dtype=np.uint32),
        np.asarray(roles, dtype=np.uint8),
        np.asarray(hidden, dtype=np.float32),
        np.zeros((1, 1, t, t), dtype=np.float32),
    )


def smap(alphas):
    a = np.asarray(alphas, dtype=np.float64)
    return SaliencyMap(q=a, k=a, alpha=a)


class TestCollectOccurrences:
    def test_counts_by_class(self):
        rec = record_with("v0", [7, 7, 9], [1, 1, 2], np.ones((3, 4)))
        occ = collect_occurrences([(rec, smap([0.1, 0.2, 0.3]))], ScoringScope.ALL)
        assert len(occ.by_class[7]) == 2
        assert len(occ.by_class[9]) == 1

    def test_out_of_scope_tokens_yield_empty_map(self):
        rec = record_with("v0", [7, 8], [1, 1], np.ones((2, 4)))
        occ = collect_occurrences([(rec, smap([0.1, 0.2]))], ScoringScope.RESPONSE_ONLY)
        assert occ.by_class == {}

    def test_special_tokens_always_excluded(self):
        rec = record_with("v0", [7, 8], [0, 1], np.ones((2, 4)))
        occ = collect_occurrences([(rec, smap([0.5, 0.5]))], ScoringScope.ALL)
        assert set(occ.by_class) == {8}

    def test_zero_norm_positions_dropped_and_counted(self):
        hidden = np.ones((2, 4))
        hidden[0] = 0.0
        rec = record_with("v0", [7, 8], [1, 1], hidden)
        occ = collect_occurrences([(rec, smap([0.5, 0.5]))], ScoringScope.ALL)
        assert occ.zero_norm_dropped == 1
        assert set(occ.by_class) == {8}

    def test_length_mismatch_names_sample(self):
        rec = record_with("v7", [7, 8], [1, 1], np.ones((2, 4)))
        with pytest.raises(Exception, match="v7"):
            collect_occurrences([(rec, smap([0.5]))], ScoringScope.ALL)

    def test_matches_brute_force_regrouping(self, rng):
        recs = []
        for i in range(2):
            rec = random_validation_record(rng, f"v{i}", 10, 1, 1, 4, 8)
            alpha = rng.uniform(size=10)
            recs.append((rec, smap(alpha)))
        occ = collect_occurrences(recs, ScoringScope.ALL)
        expected: dict[int, int] = {}
        for rec, sm in recs:
            for i in range(rec.T):
                if rec.roles[i] != int(Role.SPECIAL):
                    cls = int(rec.token_ids[i])
                    expected[cls] = expected.get(cls, 0) + 1
        assert {c: len(v) for c, v in occ.by_class.items()} == expected


class TestBuildFingerprints:
    def test_single_occurrence_scale_invariance(self):
        occ = OccurrenceSet({5: [(0.4, np.array([3.0, 4.0], dtype=np.float32))]})
        fdict = build_fingerprints(occ, meta(d=2))
        np.testing.assert_allclose(fdict.entries[5].vector, [0.6, 0.8], atol=1e-7)

    def test_two_occurrence_weighted_sum(self):
        occ = OccurrenceSet({5: [
            (0.3, np.array([1.0, 0.0], dtype=np.float32)),
            (0.1, np.array([0.0, 1.0], dtype=np.float32)),
        ]})
        fdict = build_fingerprints(occ, meta(d=2))
        np.testing.assert_allclose(
            fdict.entries[5].vector, [0.9486833, 0.31622777], atol=1e-6)
        assert fdict.entries[5].occurrence_count == 2
        assert fdict.entries[5].weight_sum == pytest.approx(0.4)

    def test_cancellation_falls_back_then_drops(self):
        h = np.array([1.0, 0.0], dtype=np.float32)
        occ = OccurrenceSet({5: [(0.5, h), (0.5, -h)],
                             6: [(0.5, h)]})
        fdict = build_fingerprints(occ, meta(d=2))
        assert 5 in fdict.dropped_classes
        assert 5 not in fdict.entries and 6 in fdict.entries

    def test_zero_alpha_uses_unweighted_fallback(self):
        h1 = np.array([1.0, 0.0], dtype=np.float32)
        h2 = np.array([0.0, 1.0], dtype=np.float32)
        occ = OccurrenceSet({5: [(0.0, h1), (0.0, h2)]})
        fdict = build_fingerprints(occ, meta(d=2))
        np.testing.assert_allclose(
            fdict.entries[5].vector, np.array([1.0, 1.0]) / np.sqrt(2), atol=1e-6)

    def test_empty_occurrences_rejected(self):
        with pytest.raises(NoFingerprintsError):
            build_fingerprints(OccurrenceSet({}), meta())

    def test_unit_norms(self, rng):
        occ = OccurrenceSet({
            c: [(rng.uniform(), rng.normal(size=8).astype(np.float32))
                for _ in range(int(rng.integers(1, 5)))]
            for c in range(20)
        })
        fdict = build_fingerprints(occ, meta(d=8))
        for e in fdict.entries.values():
            assert abs(np.linalg.norm(e.vector.astype(np.float64)) - 1.0) < 1e-6


class TestInvariances:
    def _pipeline(self, records, scale_h=1.0, scale_a=1.0, order=None):
        cfg = SaliencyConfig(l_used=1)
        pairs = []
        for rec in records:
            sm = aggregated_saliency(rec, cfg)
            sm = SaliencyMap(sm.q, sm.k, sm.alpha * scale_a)
            rec = ValidationRecord(rec.sample_id, rec.token_ids, rec.roles,
                                   rec.hidden * scale_h, rec.attention)
            pairs.append((rec, sm))
        if order is not None:
            pairs = [pairs[i] for i in order]
        occ = collect_occurrences(pairs, ScoringScope.ALL)
        return build_fingerprints(occ, meta())

    def test_record_order_invariance(self, rng):
        records = [random_validation_record(rng, f"v{i}", 8, 1, 1, 4, 6)
                   for i in range(4)]
        a = self._pipeline(records)
        b = self._pipeline(records, order=[2, 0, 3, 1])
        assert set(a.entries) == set(b.entries)
        for cls in a.entries:
            np.testing.assert_array_equal(a.entries[cls].vector, b.entries[cls].vector)

    def test_hidden_scale_invariance(self, rng):
        records = [random_validation_record(rng, f"v{i}", 8, 1, 1, 4, 6)
                   for i in range(3)]
        a = self._pipeline(records)
        b = self._pipeline(records, scale_h=37.5)
        for cls in a.entries:
            np.testing.assert_allclose(a.entries[cls].vector, b.entries[cls].vector,
                                       atol=1e-6)

    def test_alpha_global_rescale_invariance(self, rng):
        records = [random_validation_record(rng, f"v{i}", 8, 1, 1, 4, 6)
                   for i in range(3)]
        a = self._pipeline(records)
        b = self._pipeline(records, scale_a=10.0)
        for cls in a.entries:
            np.testing.assert_allclose(a.entries[cls].vector, b.entries[cls].vector,
                                       atol=1e-6)

    def test_matches_reference_builder(self, rng):
        records = [random_validation_record(rng, f"v{i}", 8, 2, 2, 4, 6)
                   for i in range(3)]
        pairs = [(rec, aggregated_saliency(rec, SaliencyConfig(l_used=2)))
                 for rec in records]
        occ = collect_occurrences(pairs, ScoringScope.ALL)
        fdict = build_fingerprints(occ, meta())
        ref_pairs = [(rec, ref_saliency(rec, 2, 0.5, 0.5)[2]) for rec in records]
        ref = ref_build_fingerprints(ref_pairs, "all")
        assert set(fdict.entries) == set(ref)
        for cls, vec in ref.items():
            np.testing.assert_allclose(fdict.entries[cls].vector, vec, atol=1e-6)


class TestSerialization:
    def _dict(self, rng, n_classes=10, d=8):
        occ = OccurrenceSet({
            c: [(rng.uniform(0.1, 1.0), rng.normal(size=d).astype(np.float32))]
            for c in range(n_classes)
        })
        m = meta(d=d)
        m.validation_sample_ids = ["v0", "v1"]
        m.config_hash = "abc123"
        return build_fingerprints(occ, m)

    def test_round_trip(self, tmp_path, rng):
        fdict = self._dict(rng)
        path = tmp_path / "f.trmf"
        save_fingerprints(fdict, path)
        back = load_fingerprints(path)
        assert set(back.entries) == set(fdict.entries)
        for cls in fdict.entries:
            np.testing.assert_array_equal(back.entries[cls].vector,
                                          fdict.entries[cls].vector)
            assert back.entries[cls].occurrence_count == \
                fdict.entries[cls].occurrence_count
        assert back.meta.validation_sample_ids == ["v0", "v1"]
        assert back.meta.config_hash == "abc123"
        assert back.meta.scope == ScoringScope.ALL

    def test_dimension_mismatch_on_load(self, tmp_path, rng):
        fdict = self._dict(rng, d=8)
        path = tmp_path / "f.trmf"
        save_fingerprints(fdict, path)
        with pytest.raises(DimensionMismatchError):
            load_fingerprints(path, expected_d=16)

    def test_large_dictionary_byte_stable(self, tmp_path, rng):
        fdict = self._dict(rng, n_classes=1000, d=8)
        p1, p2 = tmp_path / "a.trmf", tmp_path / "b.trmf"
        save_fingerprints(fdict, p1)
        save_fingerprints(load_fingerprints(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
