"""Severity grids and noise-type pools, loaded from a versioned YAML file."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import yaml

FAMILIES = ("WHN", "EN", "TST", "PSH")
LEVELS = ("L1", "L2")
CORRUPTION_IDS = ("WHN", "ENQ", "END1", "END2", "ENSC", "PSH", "TST")
NOISE_IDS = ("WHN", "ENQ", "END1", "END2", "ENSC")
SUPPORTED_VERSIONS = (1,)


def family_of(corruption_id: str) -> str:
    if corruption_id in ("WHN", "TST", "PSH"):
        return corruption_id
    if corruption_id in ("ENQ", "END1", "END2", "ENSC"):
        return "EN"
    raise ValueError(f"unknown corruption id {corruption_id!r}")


class ConfigError(ValueError):
    """A corruption table file is structurally invalid."""


@dataclass(frozen=True)
class SeverityGrid:
    family: str
    level: str
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError(f"{self.family}-{self.level}: empty severity grid")

    def without_negatives(self) -> "SeverityGrid":
        return SeverityGrid(self.family, self.level, tuple(v for v in self.values if v > 0))


@dataclass(frozen=True)
class NoisePool:
    corruption_id: str
    level: str
    noise_types: tuple[str, ...]


def expand_ranges(ranges, step: float) -> tuple[float, ...]:
    """Closed ranges sampled every ``step``; values rounded to 9 decimals."""
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    out = []
    for lo, hi in ranges:
        n = int(math.floor((hi - lo) / step + 1e-9))
        out.extend(round(lo + k * step, 9) for k in range(n + 1))
    return tuple(out)


@dataclass
class CorruptionTables:
    grids: dict = field(default_factory=dict)   # (family, level) -> SeverityGrid
    pools: dict = field(default_factory=dict)   # (corruption_id, level) -> NoisePool
    version: int = 1

    def grid(self, family: str, level: str) -> SeverityGrid:
        try:
            return self.grids[(family, level)]
        except KeyError:
            raise KeyError(f"no severity grid for {family}-{level}") from None

    def pool(self, corruption_id: str, level: str) -> NoisePool:
        try:
            return self.pools[(corruption_id, level)]
        except KeyError:
            raise KeyError(f"no noise pool for {corruption_id}-{level}") from None

    @classmethod
    def from_dict(cls, doc: dict) -> "CorruptionTables":
        if not isinstance(doc, dict):
            raise ConfigError("table document must be a mapping")
        version = doc.get("version")
        if version not in SUPPORTED_VERSIONS:
            raise ConfigError(f"unsupported table version {version!r}")
        grids, pools = {}, {}
        for fam, levels in (doc.get("severity") or {}).items():
            if fam not in FAMILIES:
                raise ConfigError(f"unknown family {fam!r} in severity section")
            for lvl, spec in levels.items():
                if lvl not in LEVELS:
                    raise ConfigError(f"unknown level {lvl!r} for {fam}")
                if "values" in spec:
                    values = tuple(float(v) for v in spec["values"])
                else:
                    try:
                        values = expand_ranges(spec["ranges"], float(spec["step"]))
                    except (KeyError, TypeError) as exc:
                        raise ConfigError(f"{fam}-{lvl}: need 'values' or 'ranges'+'step'") from exc
                if not values:
                    raise ConfigError(f"{fam}-{lvl}: empty severity grid")
                grids[(fam, lvl)] = SeverityGrid(fam, lvl, values)
        for cid, levels in (doc.get("noise_pools") or {}).items():
            if cid not in NOISE_IDS:
                raise ConfigError(f"unknown noise corruption id {cid!r}")
            for lvl, names in levels.items():
                if lvl not in LEVELS:
                    raise ConfigError(f"unknown level {lvl!r} for {cid}")
                pools[(cid, lvl)] = NoisePool(cid, lvl, tuple(str(n) for n in names))
        return cls(grids=grids, pools=pools, version=version)

    def to_dict(self) -> dict:
        sev: dict = {}
        for (fam, lvl), g in self.grids.items():
            sev.setdefault(fam, {})[lvl] = {"values": list(g.values)}
        pools: dict = {}
        for (cid, lvl), p in self.pools.items():
            pools.setdefault(cid, {})[lvl] = list(p.noise_types)
        return {"version": self.version, "severity": sev, "noise_pools": pools}


def load_tables(path=None) -> CorruptionTables:
    """Load corruption tables from ``path`` or the packaged defaults."""
    if path is None:
        return default_tables()
    with open(Path(path), encoding="utf-8") as f:
        return CorruptionTables.from_dict(yaml.safe_load(f))


@lru_cache(maxsize=1)
def default_tables() -> CorruptionTables:
    text = resources.files("dhauds").joinpath("data/dhauds_tables.yaml").read_text(encoding="utf-8")
    return CorruptionTables.from_dict(yaml.safe_load(text))


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)  # list of (code, message)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str) -> None:
        self.violations.append((code, message))

    def as_dict(self) -> dict:
        return {"ok": self.ok,
                "violations": [{"code": c, "message": m} for c, m in self.violations]}


def validate_config(tables: CorruptionTables) -> ValidationReport:
    """Check the structural rules the corruption tables must satisfy.

    Grids must be finite, non-empty and strictly ascending; SNR grids
    positive; stretch/shift grids free of zero. L2 must be at least as
    severe as L1: SNR grids nest (L1 subset of L2), stretch/shift grids
    reach at least the same magnitude. Noise pools nest, strictly for the
    environmental corpora.
    """
    rep = ValidationReport()
    for (fam, lvl), g in sorted(tables.grids.items()):
        name = f"{fam}-{lvl}"
        vals = g.values
        if not vals:
            rep.add("grid_empty", f"{name}: empty grid")
            continue
        if not all(math.isfinite(v) for v in vals):
            rep.add("grid_nonfinite", f"{name}: non-finite value")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            rep.add("grid_not_ascending", f"{name}: values not strictly ascending")
        if fam in ("WHN", "EN") and any(v <= 0 for v in vals):
            rep.add("snr_not_positive", f"{name}: SNR grid has non-positive dB values")
        if fam in ("TST", "PSH") and any(v == 0 for v in vals):
            rep.add("grid_contains_zero", f"{name}: grid contains 0 (identity transform)")
    for fam in FAMILIES:
        g1, g2 = tables.grids.get((fam, "L1")), tables.grids.get((fam, "L2"))
        if g1 is None or g2 is None:
            rep.add("grid_missing", f"{fam}: L1 and L2 grids both required")
            continue
        if fam in ("WHN", "EN"):
            extra = sorted(set(g1.values) - set(g2.values))
            if extra:
                rep.add("grid_not_nested", f"{fam}: L1 values {extra} missing from L2")
        elif max(abs(v) for v in g2.values) < max(abs(v) for v in g1.values):
            rep.add("grid_l2_weaker", f"{fam}: L2 magnitude range below L1")
    for cid in NOISE_IDS:
        p1, p2 = tables.pools.get((cid, "L1")), tables.pools.get((cid, "L2"))
        if p1 is None or p2 is None:
            rep.add("pool_missing", f"{cid}: L1 and L2 pools both required")
            continue
        for p in (p1, p2):
            if not p.noise_types:
                rep.add("pool_empty", f"{cid}-{p.level}: empty noise pool")
            if len(set(p.noise_types)) != len(p.noise_types):
                rep.add("pool_duplicate", f"{cid}-{p.level}: duplicate noise types")
        s1, s2 = set(p1.noise_types), set(p2.noise_types)
        if not s1 <= s2:
            rep.add("pool_not_nested", f"{cid}: L1 types {sorted(s1 - s2)} missing from L2")
        elif cid != "WHN" and s1 == s2:
            rep.add("pool_not_strict", f"{cid}: L2 pool adds no noise types over L1")
    return rep
