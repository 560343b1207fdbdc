"""Noise sources: synthetic white noise and file-backed noise libraries."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioError, Waveform, load_wav, resample

log = logging.getLogger(__name__)

WHITE_NOISE_KINDS = {"Gaussian": "gaussian", "Random": "uniform"}


class NoiseResolutionError(KeyError):
    """A noise type cannot be resolved to any source."""


def gen_white_noise(kind: str, length: int, rng: np.random.Generator,
                    sample_rate: int = 16000, normalize: bool = True) -> Waveform:
    """i.i.d. white noise, Gaussian N(0, 1) or uniform U(-1, 1).

    With ``normalize`` the draw is rescaled to unit measured power so both
    kinds enter SNR mixing on an equal footing.
    """
    if length <= 0:
        raise ValueError(f"noise length must be positive, got {length}")
    if kind == "gaussian":
        x = rng.standard_normal(length)
    elif kind == "uniform":
        x = rng.uniform(-1.0, 1.0, length)
    else:
        raise ValueError(f"unknown white-noise kind {kind!r}")
    if normalize:
        x = x / math.sqrt(float(np.mean(x * x)))
    return Waveform(x, sample_rate)


@dataclass(frozen=True)
class NoiseSource:
    noise_type: str
    source_id: str
    path: Path | None = None
    duration_s: float | None = None
    waveform: Waveform | None = None


class NoiseLibrary:
    """Read-only mapping from noise-type name to its recordings.

    File-backed sources load lazily and are cached per process; the cache
    is dropped on pickling so a library can be shipped to worker processes.
    """

    def __init__(self, sources):
        self._sources = {t: list(v) for t, v in sources.items()}
        self._cache: dict = {}

    def __getstate__(self):
        return {"_sources": self._sources, "_cache": {}}

    @classmethod
    def from_waveforms(cls, mapping) -> "NoiseLibrary":
        """Build an in-memory library from ``{type: [Waveform, ...]}``."""
        sources = {}
        for t, waves in mapping.items():
            sources[t] = [NoiseSource(t, f"{t}/{i}", waveform=w, duration_s=w.duration_seconds)
                          for i, w in enumerate(waves)]
        return cls(sources)

    @classmethod
    def from_index(cls, index_path, root=None) -> "NoiseLibrary":
        index_path = Path(index_path)
        root = Path(root) if root is not None else index_path.parent
        sources: dict = {}
        for t, rel, dur in read_noise_index(index_path):
            sources.setdefault(t, []).append(NoiseSource(t, rel, root / rel, dur))
        return cls(sources)

    @property
    def noise_types(self) -> list[str]:
        return sorted(self._sources)

    def sources(self, noise_type: str) -> list[NoiseSource]:
        srcs = self._sources.get(noise_type)
        if not srcs:
            raise NoiseResolutionError(f"noise type {noise_type!r} has no sources in the library")
        return srcs

    def missing(self, noise_types) -> list[str]:
        return [t for t in noise_types if not self._sources.get(t)]

    def load(self, src: NoiseSource, sample_rate: int | None = None) -> Waveform:
        key = (src.noise_type, src.source_id, sample_rate)
        w = self._cache.get(key)
        if w is not None:
            return w
        base = src.waveform if src.waveform is not None else load_wav(src.path)
        if len(base) == 0:
            raise ValueError(f"noise source {src.source_id} is empty")
        w = base if sample_rate is None or sample_rate == base.sample_rate else resample(base, sample_rate)
        self._cache[key] = w
        return w


def _window(x: np.ndarray, offset: int, length: int) -> np.ndarray:
    n = len(x)
    if offset + length <= n:
        return x[offset:offset + length].copy()
    reps = int(math.ceil((offset + length) / n))
    return np.tile(x, reps)[offset:offset + length]


def pick_noise_segment(lib: NoiseLibrary, noise_type: str, length: int, target_rate: int,
                       rng: np.random.Generator) -> tuple[Waveform, str, int]:
    """Choose a source of ``noise_type`` and a window of ``length`` samples.

    Long sources give a uniformly placed contiguous window; short sources
    are looped first. Returns (segment, source_id, offset).
    """
    srcs = lib.sources(noise_type)
    src = srcs[int(rng.integers(len(srcs)))]
    x = lib.load(src, target_rate).samples
    n = len(x)
    offset = int(rng.integers(0, n - length + 1)) if n >= length else int(rng.integers(0, n))
    return Waveform(_window(x, offset, length), target_rate), src.source_id, offset


def noise_segment_at(lib: NoiseLibrary, noise_type: str, source_id: str, offset: int,
                     length: int, target_rate: int) -> Waveform:
    """Rebuild the segment a record points at (provenance replay)."""
    for src in lib.sources(noise_type):
        if src.source_id == source_id:
            x = lib.load(src, target_rate).samples
            return Waveform(_window(x, offset, length), target_rate)
    raise NoiseResolutionError(f"source {source_id!r} not found for type {noise_type!r}")


def scan_noise(root) -> list[tuple[str, str, float]]:
    """Walk ``root/<type>/*.wav`` and return sorted (type, relpath, duration) rows.

    Raises AudioError naming the first unreadable file.
    """
    root = Path(root)
    rows = []
    for type_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(type_dir.rglob("*")):
            if f.suffix.lower() != ".wav" or not f.is_file():
                continue
            try:
                w = load_wav(f)
            except AudioError as exc:
                raise AudioError(f"unreadable noise file {f}: {exc}") from exc
            rows.append((type_dir.name, f.relative_to(root).as_posix(), round(w.duration_seconds, 6)))
    if not rows:
        log.warning("no noise recordings found under %s", root)
    return rows


def write_noise_index(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for t, rel, dur in rows:
            w.writerow([t, rel, f"{dur:.6f}"])


def read_noise_index(path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, rec in enumerate(csv.reader(f), 1):
            if not rec or rec[0].startswith("#"):
                continue
            if len(rec) != 3:
                raise ValueError(f"{path}:{lineno}: expected type,relative-path,duration_s")
            rows.append((rec[0], rec[1], float(rec[2])))
    return rows
