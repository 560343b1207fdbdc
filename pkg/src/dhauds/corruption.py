"""Per-sample corruption: seeds, severity draws, SNR mixing and DSP shifts."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from .audio import Waveform, rms_power
from .noise import WHITE_NOISE_KINDS, NoiseLibrary, gen_white_noise, pick_noise_segment
from .stretch import pitch_shift, time_stretch
from .tables import (CorruptionTables, NoisePool, SeverityGrid, default_tables,
                     family_of)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _field_digest(*fields: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for f in fields:
        b = f.encode("utf-8")
        h.update(len(b).to_bytes(4, "little"))
        h.update(b)
    return int.from_bytes(h.digest(), "little")


def derive_seed(global_seed: int, dataset_id: str, corruption_id: str, sample_index: int) -> int:
    """Stable 64-bit per-sample seed.

    The string fields are folded through a length-prefixed BLAKE2b digest,
    then global seed, digest and index are chained through SplitMix64.
    The last step is a bijection in ``sample_index``, so indices under a
    fixed prefix never collide.
    """
    s = splitmix64(int(global_seed) & MASK64)
    s = splitmix64(s ^ _field_digest(dataset_id, corruption_id))
    return splitmix64(s ^ (int(sample_index) & MASK64))


def sample_severity(grid: SeverityGrid, rng: np.random.Generator) -> float:
    if not grid.values:
        raise ValueError("cannot sample from an empty severity grid")
    return grid.values[int(rng.integers(len(grid.values)))]


def snr_gain(clean: Waveform, noise: Waveform, snr_db: float) -> float:
    """Gain g such that 10*log10(P_clean / P(g*noise)) == snr_db."""
    p_clean, p_noise = rms_power(clean), rms_power(noise)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power; SNR is undefined")
    if p_noise == 0.0:
        raise ValueError("noise has zero power; cannot reach the target SNR")
    return math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return clean + g * noise at the requested SNR. No renormalisation."""
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)} vs noise {len(noise)}")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
    g = snr_gain(clean, noise, snr_db)
    return Waveform(clean.samples + g * noise.samples, clean.sample_rate)


@dataclass(frozen=True)
class CorruptionSpec:
    corruption_id: str
    level: str
    severity_grid: SeverityGrid
    noise_pool: NoisePool | None = None
    allow_slowdown: bool = True

    def __post_init__(self):
        fam = family_of(self.corruption_id)
        if (self.noise_pool is not None) != (fam in ("WHN", "EN")):
            raise ValueError(f"{self.corruption_id}: noise pool required iff family is WHN/EN")
        if fam == "TST" and not self.allow_slowdown and any(v < 0 for v in self.severity_grid.values):
            raise ValueError("allow_slowdown=False but the TST grid has negative values")

    @property
    def family(self) -> str:
        return family_of(self.corruption_id)

    @property
    def criterion_id(self) -> str:
        return f"{self.corruption_id}-{self.level}"

    @classmethod
    def from_tables(cls, corruption_id: str, level: str, tables: CorruptionTables | None = None,
                    allow_slowdown: bool = True) -> "CorruptionSpec":
        tables = tables or default_tables()
        fam = family_of(corruption_id)
        grid = tables.grid(fam, level)
        if fam == "TST" and not allow_slowdown:
            grid = grid.without_negatives()
        pool = tables.pool(corruption_id, level) if fam in ("WHN", "EN") else None
        return cls(corruption_id, level, grid, pool, allow_slowdown)


@dataclass(frozen=True)
class CorruptionRecord:
    sample_id: str
    corruption_id: str
    family: str
    level: str
    severity: float
    sample_seed: int
    noise_type: str | None = None
    source_id: str | None = None
    offset: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def corrupt_sample(w: Waveform, spec: CorruptionSpec, lib: NoiseLibrary | None,
                   sample_seed: int, sample_id: str = "",
                   return_noise: bool = False):
    """Apply one dynamically drawn corruption to ``w``.

    Draw order from the private generator: severity, then noise type, then
    noise segment. With ``return_noise`` the scaled additive noise is
    returned as a third element (None for TST/PSH).
    """
    rng = np.random.default_rng(sample_seed)
    severity = sample_severity(spec.severity_grid, rng)
    fam = spec.family
    noise_type = source_id = offset = None
    scaled = None
    if fam in ("WHN", "EN"):
        types = spec.noise_pool.noise_types
        noise_type = types[int(rng.integers(len(types)))]
        if fam == "WHN":
            try:
                kind = WHITE_NOISE_KINDS[noise_type]
            except KeyError:
                raise ValueError(f"unknown white-noise type {noise_type!r}") from None
            noise = gen_white_noise(kind, len(w), rng, w.sample_rate)
        else:
            if lib is None:
                raise ValueError(f"{spec.criterion_id} needs a noise library")
            noise, source_id, offset = pick_noise_segment(lib, noise_type, len(w), w.sample_rate, rng)
        scaled = snr_gain(w, noise, severity) * noise.samples
        out = Waveform(w.samples + scaled, w.sample_rate)
    elif fam == "TST":
        out = time_stretch(w, severity)
    else:
        out = pitch_shift(w, severity)
    rec = CorruptionRecord(sample_id, spec.corruption_id, fam, spec.level, float(severity),
                           int(sample_seed), noise_type, source_id, offset)
    if return_noise:
        return out, rec, scaled
    return out, rec
