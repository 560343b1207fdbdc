"""Toy-scale experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .benchmark import BenchmarkManifest, Criterion, DatasetManifest, build_benchmark
from .corruption import CorruptionSpec
from .metrics import silhouette
from .noise import NoiseLibrary
from .tables import NoisePool, SeverityGrid, default_tables, family_of
from .toymodel import ToyModel, load_manifest_audio
from .tta import AdaptConfig, AdaptationCurve, adapt_waveforms, predict

ADAPT_SEED = 2025
EVAL_SEED = 123456

STABILITY_AXES = {
    "momentum": (("HM", {"momentum": 0.9}), ("LM", {"momentum": 0.7})),
    "lr": (("SLR", {"lr_ratio": 1.0}), ("BLR", {"lr_ratio": 0.5})),
}


def fixed_severity_spec(corruption_id: str, severity: float, level: str = "L1",
                        tables=None) -> tuple[Criterion, CorruptionSpec]:
    """A single-value grid, e.g. WHN at exactly 5 dB, keeping the level's noise pool."""
    tables = tables or default_tables()
    fam = family_of(corruption_id)
    tag = f"FIX{severity:g}"
    pool = None
    if fam in ("WHN", "EN"):
        base = tables.pool(corruption_id, level)
        pool = NoisePool(corruption_id, tag, base.noise_types)
    spec = CorruptionSpec(corruption_id, tag, SeverityGrid(fam, tag, (float(severity),)), pool)
    return Criterion("TOY", corruption_id, tag), spec


def build_pair(test: DatasetManifest, criterion: Criterion, out_dir, lib: NoiseLibrary | None = None,
               spec: CorruptionSpec | None = None, workers: int = 1,
               seeds=(ADAPT_SEED, EVAL_SEED)) -> tuple[BenchmarkManifest, BenchmarkManifest]:
    """Adaptation set and evaluation set from two different global seeds."""
    out_dir = Path(out_dir)
    a = build_benchmark(test, criterion, lib, seeds[0], out_dir / f"adapt_{seeds[0]}",
                        workers=workers, spec=spec)
    e = build_benchmark(test, criterion, lib, seeds[1], out_dir / f"eval_{seeds[1]}",
                        workers=workers, spec=spec)
    return a, e


@dataclass
class AdaptRun:
    curve: AdaptationCurve
    silhouette_before: float
    silhouette_after: float
    model: ToyModel

    @property
    def silhouette_delta(self) -> float:
        return self.silhouette_after - self.silhouette_before


def embeddings_silhouette(model: ToyModel, waves, labels) -> float:
    _, emb = predict(model, model.featurize(waves))
    return silhouette(emb, labels)


def run_adaptation(model: ToyModel, adapt_set: BenchmarkManifest, eval_set: BenchmarkManifest,
                   cfg: AdaptConfig, metric: str = "accuracy_top1", copy: bool = True) -> AdaptRun:
    """Adapt a copy of ``model``; report the curve and the embedding silhouette before/after."""
    m = model.copy() if copy else model
    if adapt_set.global_seed == eval_set.global_seed:
        raise ValueError("adaptation and evaluation sets must use different seeds")
    a_waves = adapt_set.load_audio()
    e_waves, e_labels = eval_set.load_audio(), eval_set.labels
    before = embeddings_silhouette(m, e_waves, e_labels)
    curve = adapt_waveforms(m, a_waves, e_waves, e_labels, cfg, metric)
    after = embeddings_silhouette(m, e_waves, e_labels)
    return AdaptRun(curve, before, after, m)


def stability(model: ToyModel, adapt_set, eval_set, axis: str, base: AdaptConfig,
              metric: str = "roc_auc") -> dict:
    """Two adaptations differing only along ``axis``; returns {label: (config, curve)}."""
    try:
        settings = STABILITY_AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of {sorted(STABILITY_AXES)}") from None
    out = {}
    for label, change in settings:
        cfg = replace(base, **change)
        out[label] = (cfg, run_adaptation(model, adapt_set, eval_set, cfg, metric).curve)
    return out


def drawdown_rows(results: dict) -> list[dict]:
    rows = []
    for label, (cfg, curve) in results.items():
        vals = curve.values
        rows.append({"setting": label, "momentum": cfg.momentum, "lr_ratio": cfg.lr_ratio,
                     "baseline": vals[0], "peak": max(vals), "final": vals[-1],
                     "drawdown": curve.drawdown()})
    return rows


def soft_expectation_holds(axis: str, rows: list[dict]) -> bool:
    """Low momentum / BLR drawdown <= high momentum / SLR drawdown."""
    d = {r["setting"]: r["drawdown"] for r in rows}
    if axis == "momentum":
        return d["LM"] <= d["HM"]
    return d["BLR"] <= d["SLR"]


def clean_eval_labels(test: DatasetManifest):
    waves, labels = load_manifest_audio(test)
    return waves, np.asarray(labels)
