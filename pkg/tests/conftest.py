import numpy as np
import pytest

from dhauds.audio import Waveform, save_wav
from dhauds.benchmark import DatasetManifest, ManifestEntry, write_manifest
from dhauds.noise import NoiseLibrary
from dhauds.tables import default_tables
from dhauds.toymodel import ToyModel, ToyTaskConfig, TrainConfig, gen_toy_dataset, train_source


def sine(freq, sr=16000, seconds=1.0, amp=0.5, phase=0.0):
    t = np.arange(int(round(sr * seconds))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def peak_hz(w: Waveform, pad: int = 8) -> float:
    """Parabolic-interpolated FFT peak of a Hann-windowed signal."""
    x = w.samples * np.hanning(len(w.samples))
    n = len(x) * pad
    mag = np.abs(np.fft.rfft(x, n))
    k = int(np.argmax(mag[1:])) + 1
    a, b, c = np.log(mag[k - 1:k + 2] + 1e-300)
    delta = 0.5 * (a - c) / (a - 2 * b + c)
    return (k + delta) * w.sample_rate / n


def synthetic_dataset(root, dataset_id="RS", n_per_class=(6, 4, 5), sr=16000, seconds=0.25,
                      folds=False, seed=0):
    """Small labelled manifest of random tones written as float32 WAVs."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for c, n in enumerate(n_per_class):
        for i in range(n):
            f = 200 + 150 * c + rng.uniform(-20, 20)
            w = sine(f, sr, seconds, amp=rng.uniform(0.2, 0.6), phase=rng.uniform(0, 6.28))
            rel = f"audio/c{c}_{i:03d}.wav"
            (root / "audio").mkdir(exist_ok=True)
            save_wav(w, root / rel, "float32")
            fold = (i % 10) + 1 if folds else None
            entries.append(ManifestEntry(f"s{c}_{i:03d}", rel, c, fold, seconds, sr))
    m = DatasetManifest(dataset_id, [f"class{c}" for c in range(len(n_per_class))], entries, root)
    write_manifest(m, root / "manifest.jsonl")
    return m


def every_noise_type():
    t = default_tables()
    names = set()
    for (cid, _), pool in t.pools.items():
        if cid != "WHN":
            names.update(pool.noise_types)
    return sorted(names)


def synthetic_library(seed=0, sr=16000):
    """In-memory library with one short and one long source for every environmental noise type."""
    rng = np.random.default_rng(seed)
    mapping = {}
    for name in every_noise_type():
        mapping[name] = [Waveform(rng.standard_normal(sr // 8) * 0.1, sr),
                         Waveform(rng.standard_normal(22050) * 0.2, 22050)]
    return NoiseLibrary.from_waveforms(mapping)


@pytest.fixture(scope="session")
def noise_lib():
    return synthetic_library()


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    train, test = gen_toy_dataset(ToyTaskConfig(), out)
    return out, train, test


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    _, train, test = toy_data
    model, acc = train_source(ToyModel(seed=0), train, TrainConfig(), test)
    return model, acc


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def record(number, title, ok, detail=""):
        line = f"[ACCEPTANCE {number:>2}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
