import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhauds.audio import Waveform, rms_power
from dhauds.corruption import (CorruptionSpec, corrupt_sample, derive_seed, mix_at_snr, sample_severity,
                               snr_gain)
from dhauds.noise import NoiseLibrary, NoiseResolutionError, gen_white_noise, noise_segment_at, pick_noise_segment
from dhauds.stretch import pitch_shift, time_stretch, vocoder_params
from dhauds.tables import (CorruptionTables, NoisePool, SeverityGrid, default_tables, load_tables,
                           validate_config)

from conftest import peak_hz, sine

PINNED = json.loads((Path(__file__).parent / "fixtures" / "pinned.json").read_text())

# severity grids as printed in the source table (range, step)
TABLE2 = {
    ("WHN", "L1"): [6.0, 6.5, 7.0],
    ("WHN", "L2"): [5.0, 5.5, 6.0, 6.5, 7.0],
    ("EN", "L1"): [5.0, 5.5, 6.0],
    ("EN", "L2"): [5.0, 5.5, 6.0, 6.5, 7.0],
    ("TST", "L1"): [-6, -5, -4, 4, 5, 6],
    ("TST", "L2"): [-12, -11, -10, -9, -8, 8, 9, 10, 11, 12],
    ("PSH", "L1"): [-5, -4, 4, 5],
    ("PSH", "L2"): [-7, -6, -5, 5, 6, 7],
}
SC2_L2 = {"exercise_bike", "running_tap", "white_noise", "pink_noise", "doing_the_dishes", "dude_miaowing"}


class TestSeeds:
    def test_pinned_vectors(self):
        for v in PINNED["derive_seed"]:
            assert derive_seed(v["global_seed"], v["dataset_id"], v["corruption_id"], v["sample_index"]) == v["seed"]

    def test_deterministic_and_in_range(self):
        a = derive_seed(2025, "RS", "WHN-L1", 5)
        assert a == derive_seed(2025, "RS", "WHN-L1", 5)
        assert 0 <= a < 2**64

    def test_no_collisions_over_a_million_indices(self):
        seeds = {derive_seed(2025, "RS", "WHN-L1", i) for i in range(1_000_000)}
        assert len(seeds) == 1_000_000

    def test_field_boundaries_matter(self):
        assert derive_seed(1, "RS", "WHN-L1", 0) != derive_seed(1, "RSW", "HN-L1", 0)
        assert derive_seed(1, "RS", "WHN-L1", 0) != derive_seed(2, "RS", "WHN-L1", 0)


class TestTables:
    def test_shipped_grids_match_source_table(self):
        t = default_tables()
        for key, vals in TABLE2.items():
            assert list(t.grid(*key).values) == [float(v) for v in vals], key

    def test_shipped_pools(self):
        t = default_tables()
        assert set(t.pool("WHN", "L1").noise_types) == {"Gaussian", "Random"}
        assert set(t.pool("ENQ", "L2").noise_types) == {"CAFE", "CAR", "HOME", "REVERB", "STREET"}
        assert set(t.pool("ENSC", "L2").noise_types) == SC2_L2
        assert len(t.pool("END1", "L2").noise_types) == 6 and len(t.pool("END2", "L2").noise_types) == 6

    def test_defaults_validate(self):
        rep = validate_config(default_tables())
        assert rep.ok, rep.violations

    def test_pool_not_nested_is_named(self):
        t = default_tables()
        pools = dict(t.pools)
        pools[("ENQ", "L1")] = NoisePool("ENQ", "L1", ("HOME", "SUBWAY"))
        rep = validate_config(CorruptionTables(dict(t.grids), pools, t.version))
        assert [c for c, _ in rep.violations] == ["pool_not_nested"]
        assert "SUBWAY" in rep.violations[0][1]

    def test_tst_zero_is_named(self):
        t = default_tables()
        grids = dict(t.grids)
        grids[("TST", "L1")] = SeverityGrid("TST", "L1", (-4.0, 0.0, 4.0))
        rep = validate_config(CorruptionTables(grids, dict(t.pools), t.version))
        assert "grid_contains_zero" in [c for c, _ in rep.violations]

    def test_snr_grid_positive_and_nested(self):
        t = default_tables()
        grids = dict(t.grids)
        grids[("EN", "L1")] = SeverityGrid("EN", "L1", (-1.0, 4.0))
        codes = {c for c, _ in validate_config(CorruptionTables(grids, dict(t.pools), 1)).violations}
        assert {"snr_not_positive", "grid_not_nested"} <= codes

    def test_yaml_round_trip(self, tmp_path):
        import yaml
        t = default_tables()
        p = tmp_path / "t.yaml"
        p.write_text(yaml.safe_dump(t.to_dict()))
        assert load_tables(p).to_dict() == t.to_dict()

    def test_load_rejects_bad_version(self, tmp_path):
        p = tmp_path / "t.yaml"
        p.write_text("version: 99\nseverity: {}\nnoise_pools: {}\n")
        with pytest.raises(ValueError):
            load_tables(p)


class TestSeverity:
    def test_grid_membership(self):
        t = default_tables()
        rng = np.random.default_rng(0)
        assert {sample_severity(t.grid("WHN", "L1"), rng) for _ in range(200)} == {6.0, 6.5, 7.0}
        assert {sample_severity(t.grid("PSH", "L2"), rng) for _ in range(300)} == {-7, -6, -5, 5, 6, 7}

    def test_single_value(self):
        g = SeverityGrid("WHN", "X", (5.0,))
        rng = np.random.default_rng(1)
        assert all(sample_severity(g, rng) == 5.0 for _ in range(20))


class TestWhiteNoise:
    def test_gaussian_lln(self):
        w = gen_white_noise("gaussian", 10**6, np.random.default_rng(0))
        assert -0.01 < w.samples.mean() < 0.01
        assert 0.99 < rms_power(w) < 1.01

    def test_uniform_raw_power(self):
        w = gen_white_noise("uniform", 10**6, np.random.default_rng(0), normalize=False)
        assert abs(rms_power(w) - 1 / 3) < 0.005
        assert abs(rms_power(gen_white_noise("uniform", 1000, np.random.default_rng(0))) - 1) < 1e-12

    def test_seeded(self):
        a = gen_white_noise("gaussian", 100, np.random.default_rng(4)).samples
        assert np.array_equal(a, gen_white_noise("gaussian", 100, np.random.default_rng(4)).samples)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            gen_white_noise("gaussian", 0, np.random.default_rng(0))


class TestMix:
    def test_zero_db_equal_power(self):
        rng = np.random.default_rng(0)
        c, n = Waveform(rng.standard_normal(500), 8000), Waveform(rng.uniform(-1, 1, 500), 8000)
        g = snr_gain(c, n, 0.0)
        assert abs(rms_power(Waveform(g * n.samples, 8000)) / rms_power(c) - 1) < 1e-9

    def test_closed_form_gain(self):
        c = Waveform(np.array([1.0, -1.0, 0.0, 0.0]), 8000)  # P = 0.5
        n = Waveform(np.array([1.0, -1.0, 1.0, -1.0]), 8000)  # P = 1
        assert snr_gain(c, n, 10.0) ** 2 == pytest.approx(0.05, rel=1e-12)
        out = mix_at_snr(c, n, 10.0)
        np.testing.assert_allclose(out.samples - c.samples, math.sqrt(0.05) * n.samples, rtol=1e-12)

    def test_thousand_random_cases(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            L = int(rng.integers(10, 2000))
            c = Waveform(rng.standard_normal(L) * rng.uniform(1e-3, 2), 16000)
            n = Waveform(rng.uniform(-1, 1, L) * rng.uniform(1e-3, 2), 16000)
            snr = rng.uniform(-20, 40)
            scaled = mix_at_snr(c, n, snr).samples - c.samples
            got = 10 * np.log10(np.mean(c.samples ** 2) / np.mean(scaled ** 2))
            worst = max(worst, abs(got - snr))
        assert worst < 1e-6

    def test_errors(self):
        c = Waveform(np.ones(10), 8000)
        with pytest.raises(ValueError):
            mix_at_snr(c, Waveform(np.ones(9), 8000), 5)
        with pytest.raises(ValueError):
            mix_at_snr(Waveform(np.zeros(10), 8000), c, 5)
        with pytest.raises(ValueError):
            mix_at_snr(c, Waveform(np.zeros(10), 8000), 5)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), snr=st.floats(-30, 60), L=st.integers(2, 500))
    def test_snr_property(self, seed, snr, L):
        rng = np.random.default_rng(seed)
        c = Waveform(rng.standard_normal(L) + 0.1, 8000)
        n = Waveform(rng.standard_normal(L) + 0.1, 8000)
        scaled = mix_at_snr(c, n, snr).samples - c.samples
        assert abs(10 * np.log10(rms_power(c) / np.mean(scaled ** 2)) - snr) < 1e-6


class TestNoiseSegments:
    def _lib(self, n):
        return NoiseLibrary.from_waveforms({"hum": [Waveform(np.arange(n, dtype=float) + 1, 1000)]})

    def test_exact_length_source(self):
        seg, sid, off = pick_noise_segment(self._lib(300), "hum", 300, 1000, np.random.default_rng(0))
        assert off == 0 and sid == "hum/0"
        assert np.array_equal(seg.samples, np.arange(300) + 1.0)

    def test_tiling_oracle(self):
        src = np.arange(100, dtype=float) + 1
        for seed in range(20):
            seg, _, off = pick_noise_segment(self._lib(100), "hum", 250, 1000, np.random.default_rng(seed))
            expect = np.array([src[(off + i) % 100] for i in range(250)])
            assert 0 <= off < 100
            assert np.array_equal(seg.samples, expect)

    def test_long_source_window(self):
        for seed in range(20):
            seg, _, off = pick_noise_segment(self._lib(1000), "hum", 100, 1000, np.random.default_rng(seed))
            assert 0 <= off <= 900
            assert np.array_equal(seg.samples, np.arange(off, off + 100) + 1.0)

    def test_seeded_and_replayable(self):
        lib = self._lib(5000)
        a = pick_noise_segment(lib, "hum", 700, 1000, np.random.default_rng(9))
        b = pick_noise_segment(lib, "hum", 700, 1000, np.random.default_rng(9))
        assert a[1:] == b[1:]
        assert np.array_equal(noise_segment_at(lib, "hum", a[1], a[2], 700, 1000).samples, a[0].samples)

    def test_unknown_type(self):
        with pytest.raises(NoiseResolutionError):
            pick_noise_segment(self._lib(10), "rain", 5, 1000, np.random.default_rng(0))

    def test_resamples_to_target_rate(self):
        lib = NoiseLibrary.from_waveforms({"hum": [Waveform(np.sin(np.arange(22050) * 0.1), 22050)]})
        seg, _, _ = pick_noise_segment(lib, "hum", 16000, 16000, np.random.default_rng(0))
        assert seg.sample_rate == 16000 and len(seg) == 16000


class TestStretchShift:
    def test_stretch_length(self):
        hop = vocoder_params(16000)[1]
        out = time_stretch(sine(440), 10)
        assert abs(len(out) - 16000 / 1.1) <= hop
        assert abs(out.duration_seconds - 0.909) < hop / 16000 + 1e-3

    def test_stretch_keeps_pitch(self):
        out = time_stretch(sine(440), -8)
        assert abs(peak_hz(out) / 440 - 1) < 0.02

    def test_stretch_deterministic(self):
        assert np.array_equal(time_stretch(sine(300), 4).samples, time_stretch(sine(300), 4).samples)

    def test_pitch_octaves(self):
        assert abs(peak_hz(pitch_shift(sine(440), 12)) / 880 - 1) < 0.02
        assert abs(peak_hz(pitch_shift(sine(880), -12)) / 440 - 1) < 0.02

    def test_pitch_length_preserved_on_grids(self):
        w = sine(500, seconds=0.5)
        for s in TABLE2[("PSH", "L1")] + TABLE2[("PSH", "L2")]:
            assert len(pitch_shift(w, s)) == len(w)

    def test_guards(self):
        for bad in (0, 50, -60):
            with pytest.raises(ValueError):
                time_stretch(sine(100), bad)
        for bad in (0, 25, -30):
            with pytest.raises(ValueError):
                pitch_shift(sine(100), bad)

    def test_vocoder_scaling(self):
        assert vocoder_params(44100) == (2048, 512)
        assert vocoder_params(16000) == (1024, 256)


class TestCorruptSample:
    def test_whn_l1_record(self):
        spec = CorruptionSpec.from_tables("WHN", "L1")
        w = sine(300)
        for s in range(30):
            out, rec = corrupt_sample(w, spec, None, s, "x")
            assert rec.severity in (6.0, 6.5, 7.0)
            assert rec.noise_type in ("Gaussian", "Random")
            assert len(out) == len(w)

    def test_ensc_l2_types(self, noise_lib):
        spec = CorruptionSpec.from_tables("ENSC", "L2")
        seen = set()
        for s in range(80):
            out, rec = corrupt_sample(sine(300), spec, noise_lib, s)
            assert rec.noise_type in SC2_L2 and rec.source_id is not None
            seen.add(rec.noise_type)
        assert seen == SC2_L2

    def test_bit_identical_repeat(self, noise_lib):
        for cid, lvl in (("WHN", "L2"), ("END1", "L2"), ("TST", "L1"), ("PSH", "L2")):
            spec = CorruptionSpec.from_tables(cid, lvl)
            a = corrupt_sample(sine(300), spec, noise_lib, 77, "s")
            b = corrupt_sample(sine(300), spec, noise_lib, 77, "s")
            assert a[1] == b[1]
            assert np.array_equal(a[0].samples, b[0].samples)

    def test_snr_fidelity_from_components(self, noise_lib):
        w = sine(350, amp=0.3)
        for cid in ("WHN", "ENQ", "END2", "ENSC"):
            spec = CorruptionSpec.from_tables(cid, "L2")
            for s in range(10):
                out, rec, noise = corrupt_sample(w, spec, noise_lib, s, return_noise=True)
                got = 10 * np.log10(rms_power(w) / np.mean(noise ** 2))
                assert abs(got - rec.severity) < 1e-6
                np.testing.assert_allclose(out.samples, w.samples + noise, atol=1e-15)

    def test_slowdown_suppression(self):
        spec = CorruptionSpec.from_tables("TST", "L2", allow_slowdown=False)
        assert spec.severity_grid.values == (8.0, 9.0, 10.0, 11.0, 12.0)
        for s in range(40):
            _, rec = corrupt_sample(sine(300, seconds=0.25), spec, None, s)
            assert rec.severity > 0

    def test_duration_contracts(self, noise_lib):
        w = sine(300, seconds=0.5)
        hop = vocoder_params(16000)[1]
        for cid in ("WHN", "ENQ", "PSH"):
            out, _ = corrupt_sample(w, CorruptionSpec.from_tables(cid, "L1"), noise_lib, 3)
            assert len(out) == len(w)
        for s in range(10):
            out, rec = corrupt_sample(w, CorruptionSpec.from_tables("TST", "L2"), None, s)
            assert abs(len(out) - len(w) / (1 + rec.severity / 100)) <= hop

    def test_pool_iff_noise_family(self):
        g = SeverityGrid("TST", "L1", (4.0,))
        with pytest.raises(ValueError):
            CorruptionSpec("TST", "L1", g, NoisePool("WHN", "L1", ("Gaussian",)))
        with pytest.raises(ValueError):
            CorruptionSpec("WHN", "L1", SeverityGrid("WHN", "L1", (5.0,)))

    def test_missing_library(self):
        with pytest.raises(ValueError):
            corrupt_sample(sine(300), CorruptionSpec.from_tables("ENQ", "L1"), None, 0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**64 - 1),
           key=st.sampled_from(sorted(TABLE2)))
    def test_record_severity_on_grid(self, seed, key):
        fam, lvl = key
        cid = {"EN": "ENQ"}.get(fam, fam)
        spec = CorruptionSpec.from_tables(cid, lvl)
        if fam in ("TST", "PSH"):
            rng = np.random.default_rng(seed)
            assert sample_severity(spec.severity_grid, rng) in TABLE2[key]
        else:
            lib = NoiseLibrary.from_waveforms({t: [Waveform(np.ones(64) * 0.5 + np.arange(64) % 3, 16000)]
                                               for t in spec.noise_pool.noise_types})
            _, rec = corrupt_sample(sine(200, seconds=0.01), spec, lib, seed)
            assert rec.severity in TABLE2[key] and rec.noise_type in spec.noise_pool.noise_types
