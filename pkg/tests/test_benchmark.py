import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhauds.benchmark import (Criterion, DatasetManifest, ExcludedCriterion, ManifestEntry, build_benchmark,
                              enumerate_criteria, manifest_digest, parse_criterion, read_benchmark_manifest,
                              read_manifest, reseed_check, split_by_folds, split_stratified, write_manifest)
from dhauds.corruption import derive_seed

from conftest import synthetic_dataset


def _manifest(counts, folds=None):
    entries = []
    for c, n in enumerate(counts):
        for i in range(n):
            fold = None if folds is None else folds[(len(entries)) % len(folds)]
            entries.append(ManifestEntry(f"{c}-{i}", f"a/{c}-{i}.wav", c, fold, 1.0, 16000))
    return DatasetManifest("RS", [f"k{c}" for c in range(len(counts))], entries)


class TestManifest:
    def test_invariants(self):
        e = ManifestEntry("a", "a.wav", 0)
        with pytest.raises(ValueError):
            DatasetManifest("RS", ["x"], [e, e])
        with pytest.raises(ValueError):
            DatasetManifest("RS", ["x"], [ManifestEntry("a", "a.wav", 1)])
        with pytest.raises(ValueError):
            DatasetManifest("RS", ["x"], [ManifestEntry("a", "a.wav", 0, fold=11)])

    def test_round_trip(self, tmp_path):
        m = _manifest([3, 2], folds=[1, 5, 10])
        write_manifest(m, tmp_path / "m.jsonl")
        back = read_manifest(tmp_path / "m.jsonl")
        assert back.entries == m.entries and back.class_names == m.class_names
        head = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
        assert head["dataset_id"] == "RS" and head["class_names"] == ["k0", "k1"]


class TestSplits:
    def test_seven_three(self):
        tr, te = split_stratified(_manifest([10]), 0.7, seed=1)
        assert len(tr.entries) == 7 and len(te.entries) == 3

    def test_imbalanced_per_class_counts(self):
        counts = [10, 3, 25, 7, 2, 101]
        tr, te = split_stratified(_manifest(counts), 0.7, seed=5)
        got = Counter(e.label for e in tr.entries)
        # round-half-up of 0.7 * n
        expect = {0: 7, 1: 2, 2: 18, 3: 5, 4: 1, 5: 71}
        assert dict(got) == expect
        assert abs(len(tr.entries) / sum(counts) - 0.7) < 0.01

    def test_deterministic(self):
        m = _manifest([9, 9])
        a, b = split_stratified(m, 0.7, 3), split_stratified(m, 0.7, 3)
        assert [e.sample_id for e in a[0].entries] == [e.sample_id for e in b[0].entries]
        c = split_stratified(m, 0.7, 4)
        assert [e.sample_id for e in a[0].entries] != [e.sample_id for e in c[0].entries]

    def test_errors(self):
        with pytest.raises(ValueError):
            split_stratified(_manifest([5, 1]), 0.7, 0)
        with pytest.raises(ValueError):
            split_stratified(_manifest([5]), 1.0, 0)

    @settings(max_examples=50, deadline=None)
    @given(counts=st.lists(st.integers(2, 40), min_size=1, max_size=6),
           frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**32))
    def test_partition_soundness(self, counts, frac, seed):
        m = _manifest(counts)
        tr, te = split_stratified(m, frac, seed)
        a, b = {e.sample_id for e in tr.entries}, {e.sample_id for e in te.entries}
        assert not a & b and a | b == {e.sample_id for e in m.entries}
        got = Counter(e.label for e in tr.entries)
        for c, n in enumerate(counts):
            assert got.get(c, 0) == int(np.floor(frac * n + 0.5 + 1e-9))

    def test_folds(self):
        m = _manifest([10, 10], folds=list(range(1, 11)))
        tr, te = split_by_folds(m, range(1, 8), range(8, 11))
        assert len(tr.entries) == 14 and len(te.entries) == 6
        assert all(e.fold <= 7 for e in tr.entries) and all(e.fold >= 8 for e in te.entries)

    def test_fold_errors(self):
        m = _manifest([4], folds=[1, 2, 3, 4])
        with pytest.raises(ValueError):
            split_by_folds(m, {1, 2}, set())
        with pytest.raises(ValueError):
            split_by_folds(m, {1, 2}, {2, 3})
        with pytest.raises(ValueError, match="0-3"):
            split_by_folds(m, {1, 2}, {3})
        with pytest.raises(ValueError):
            split_by_folds(_manifest([2]), {1}, {2})


class TestRegistry:
    def test_counts(self):
        assert len(enumerate_criteria()) == 50
        assert len(enumerate_criteria(["US8"])) == 8
        for ds in ("SC2", "VS", "RS"):
            assert len(enumerate_criteria([ds])) == 14

    def test_us8_exclusions(self):
        ids = {c.corruption_id for c in enumerate_criteria(["US8"])}
        assert ids == {"WHN", "ENSC", "PSH", "TST"}
        with pytest.raises(ExcludedCriterion):
            parse_criterion("US8", "ENQ-L1")

    def test_sc2_no_slowdown(self):
        tst = [c for c in enumerate_criteria(["SC2"]) if c.corruption_id == "TST"]
        assert len(tst) == 2 and not any(c.allow_slowdown for c in tst)
        assert all(c.allow_slowdown for c in enumerate_criteria(["RS"]))

    def test_unique_and_ordered(self):
        crits = enumerate_criteria()
        assert len({(c.dataset_id, c.id) for c in crits}) == 50
        assert enumerate_criteria() == crits

    def test_errors(self):
        with pytest.raises(ValueError):
            enumerate_criteria(["ESC50"])
        with pytest.raises(ValueError):
            parse_criterion("RS", "WHN-L3")
        with pytest.raises(ValueError):
            parse_criterion("RS", "WHN")


class TestBuild:
    def test_rebuild_is_byte_identical(self, tmp_path, noise_lib):
        m = synthetic_dataset(tmp_path / "ds")
        crit = parse_criterion("RS", "ENQ-L2")
        a = build_benchmark(m, crit, noise_lib, 2025, tmp_path / "a")
        b = build_benchmark(m, crit, noise_lib, 2025, tmp_path / "b")
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
        assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
        assert [(r.severity, r.noise_type, r.offset) for r in a.records] == \
               [(r.severity, r.noise_type, r.offset) for r in b.records]

    def test_seed_changes_severities(self, tmp_path):
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(10, 10))
        crit = parse_criterion("RS", "TST-L2")
        a = build_benchmark(m, crit, None, 2025, tmp_path / "a")
        b = build_benchmark(m, crit, None, 123456, tmp_path / "b")
        assert [r.severity for r in a.records] != [r.severity for r in b.records]

    def test_sc2_tst_l2_positive_only(self, tmp_path):
        m = synthetic_dataset(tmp_path / "ds", dataset_id="SC2", n_per_class=(8, 8))
        bm = build_benchmark(m, parse_criterion("SC2", "TST-L2"), None, 2025, tmp_path / "o")
        assert {r.severity for r in bm.records} <= {8.0, 9.0, 10.0, 11.0, 12.0}

    def test_records_reseed_and_round_trip(self, tmp_path, noise_lib):
        m = synthetic_dataset(tmp_path / "ds")
        bm = build_benchmark(m, parse_criterion("RS", "WHN-L1"), noise_lib, 7, tmp_path / "o")
        assert len(bm.records) == len(m.entries)
        assert reseed_check(bm) == []
        back = read_benchmark_manifest(tmp_path / "o")
        assert back.records == bm.records and back.criterion == bm.criterion
        for i, r in enumerate(back.records):
            assert r.seed == derive_seed(7, "RS", "WHN-L1", i)
        waves = back.load_audio()
        assert all(len(w) == 4000 for w in waves)

    def test_content_addressed_audio(self, tmp_path):
        import hashlib
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(3, 3))
        bm = build_benchmark(m, parse_criterion("RS", "PSH-L1"), None, 1, tmp_path / "o")
        for r in bm.records:
            data = (tmp_path / "o" / r.corrupted_path).read_bytes()
            assert r.corrupted_path.endswith(hashlib.sha256(data).hexdigest() + ".wav")

    def test_pool_failure_leaves_no_manifest(self, tmp_path):
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(2, 2))
        from dhauds.noise import NoiseLibrary
        from dhauds.audio import Waveform
        lib = NoiseLibrary.from_waveforms({"HOME": [Waveform(np.ones(10), 16000)]})
        with pytest.raises(KeyError):
            build_benchmark(m, parse_criterion("RS", "ENQ-L1"), lib, 1, tmp_path / "o")
        assert not (tmp_path / "o" / "manifest.jsonl").exists()

    def test_io_failure_leaves_no_manifest(self, tmp_path):
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(2, 2))
        build_benchmark(m, parse_criterion("RS", "TST-L1"), None, 1, tmp_path / "o")
        (tmp_path / "ds" / m.entries[-1].path).unlink()
        with pytest.raises(Exception):
            build_benchmark(m, parse_criterion("RS", "TST-L1"), None, 1, tmp_path / "o")
        assert not (tmp_path / "o" / "manifest.jsonl").exists()

    def test_workers_agree(self, tmp_path, noise_lib):
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(5, 5))
        crit = parse_criterion("RS", "END1-L2")
        a = build_benchmark(m, crit, noise_lib, 2025, tmp_path / "a", workers=1)
        b = build_benchmark(m, crit, noise_lib, 2025, tmp_path / "b", workers=3)
        assert a.records == b.records

    def test_histogram(self, tmp_path):
        m = synthetic_dataset(tmp_path / "ds", n_per_class=(6, 6))
        bm = build_benchmark(m, parse_criterion("RS", "PSH-L2"), None, 3, tmp_path / "o")
        h = bm.severity_histogram()
        assert sum(h.values()) == 12 and set(h) <= {-7, -6, -5, 5, 6, 7}
