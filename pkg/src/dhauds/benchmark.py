"""Dataset manifests, splits, the criteria registry and the benchmark builder."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, load_wav, save_wav
from .corruption import CorruptionSpec, corrupt_sample, derive_seed
from .noise import NoiseLibrary
from .tables import (CORRUPTION_IDS, LEVELS, CorruptionTables, default_tables,
                     validate_config)

log = logging.getLogger(__name__)

DATASET_IDS = ("US8", "SC2", "VS", "RS")
US8_EXCLUDED = ("ENQ", "END1", "END2")
NO_SLOWDOWN_DATASETS = ("SC2",)
MANIFEST_VERSION = 1
BENCHMARK_MANIFEST_NAME = "manifest.jsonl"

__all__ = [
    "DatasetManifest", "ManifestEntry", "Criterion", "BenchmarkManifest", "ExcludedCriterion",
    "split_stratified", "split_by_folds", "enumerate_criteria", "build_benchmark",
    "validate_config", "read_manifest", "write_manifest", "read_benchmark_manifest",
]


class ExcludedCriterion(ValueError):
    """The (dataset, corruption) pair is not part of the protocol."""


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    label: int
    fold: int | None = None
    duration_s: float | None = None
    sample_rate: int | None = None


@dataclass
class DatasetManifest:
    dataset_id: str
    class_names: list[str]
    entries: list[ManifestEntry]
    root: Path | None = None  # base directory for relative audio paths

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted(k for k, v in Counter(ids).items() if v > 1)
            raise ValueError(f"duplicate sample ids: {dup[:5]}")
        c = len(self.class_names)
        for e in self.entries:
            if not 0 <= e.label < c:
                raise ValueError(f"{e.sample_id}: label {e.label} outside [0, {c})")
            if e.fold is not None and not 1 <= e.fold <= 10:
                raise ValueError(f"{e.sample_id}: fold {e.fold} outside [1, 10]")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def subset(self, entries) -> "DatasetManifest":
        return DatasetManifest(self.dataset_id, list(self.class_names), list(entries), self.root)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_manifest(m: DatasetManifest, path) -> None:
    """Header line then one JSON object per entry, fixed field order."""
    lines = [_dumps({"kind": "dataset_manifest", "version": MANIFEST_VERSION,
                     "dataset_id": m.dataset_id, "class_names": list(m.class_names)})]
    lines += [_dumps(asdict(e)) for e in m.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    head = json.loads(lines[0])
    if head.get("kind") not in ("dataset_manifest", "benchmark_manifest"):
        raise ValueError(f"{path}: not a dataset manifest")
    fields = ManifestEntry.__dataclass_fields__
    entries = [ManifestEntry(**{k: v for k, v in json.loads(ln).items() if k in fields})
               for ln in lines[1:]]
    return DatasetManifest(head["dataset_id"], head["class_names"], entries, path.parent)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_stratified(m: DatasetManifest, train_frac: float, seed: int):
    """Per-class seeded shuffle; round-half-up(frac * n_c) entries go to train.

    Classes are visited in ascending label order and each uses its own
    permutation drawn from a single generator seeded with ``seed``. Both
    outputs keep the original manifest order.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(m.entries):
        by_class.setdefault(e.label, []).append(i)
    small = sorted(c for c, idx in by_class.items() if len(idx) < 2)
    if small:
        raise ValueError(f"classes with fewer than 2 samples cannot be split: {small}")
    rng = np.random.default_rng(seed)
    train_idx = set()
    for c in sorted(by_class):
        idx = by_class[c]
        k = _round_half_up(train_frac * len(idx))
        perm = rng.permutation(len(idx))
        train_idx.update(idx[j] for j in perm[:k])
    train = [e for i, e in enumerate(m.entries) if i in train_idx]
    test = [e for i, e in enumerate(m.entries) if i not in train_idx]
    return m.subset(train), m.subset(test)


def split_by_folds(m: DatasetManifest, train_folds, test_folds):
    """Route entries by fold membership (e.g. US8: folds 1-7 train, 8-10 test)."""
    train_folds, test_folds = set(train_folds), set(test_folds)
    if not train_folds or not test_folds:
        raise ValueError("train and test fold sets must both be non-empty")
    overlap = train_folds & test_folds
    if overlap:
        raise ValueError(f"fold sets overlap: {sorted(overlap)}")
    train, test = [], []
    for e in m.entries:
        if e.fold is None:
            raise ValueError(f"{e.sample_id}: no fold metadata")
        if e.fold in train_folds:
            train.append(e)
        elif e.fold in test_folds:
            test.append(e)
        else:
            raise ValueError(f"{e.sample_id}: fold {e.fold} is in neither fold set")
    return m.subset(train), m.subset(test)


@dataclass(frozen=True)
class Criterion:
    dataset_id: str
    corruption_id: str
    level: str
    allow_slowdown: bool = True

    @property
    def id(self) -> str:
        return f"{self.corruption_id}-{self.level}"

    def spec(self, tables: CorruptionTables | None = None) -> CorruptionSpec:
        return CorruptionSpec.from_tables(self.corruption_id, self.level, tables,
                                          allow_slowdown=self.allow_slowdown)


def parse_criterion(dataset_id: str, text: str) -> Criterion:
    """``"TST-L1"`` -> Criterion, applying the dataset's exclusions and flags."""
    try:
        cid, level = text.rsplit("-", 1)
    except ValueError:
        raise ValueError(f"criterion must look like 'WHN-L1', got {text!r}") from None
    if cid not in CORRUPTION_IDS or level not in LEVELS:
        raise ValueError(f"unknown criterion {text!r}")
    if dataset_id == "US8" and cid in US8_EXCLUDED:
        raise ExcludedCriterion(f"excluded combination: US8 does not use {cid}")
    return Criterion(dataset_id, cid, level, allow_slowdown=dataset_id not in NO_SLOWDOWN_DATASETS)


def enumerate_criteria(datasets=DATASET_IDS) -> list[Criterion]:
    """Cross product of corruptions and levels, minus US8's ENQ/END1/END2."""
    out = []
    seen = set()
    for ds in datasets:
        if ds not in DATASET_IDS:
            raise ValueError(f"unknown dataset id {ds!r}; expected one of {DATASET_IDS}")
        if ds in seen:
            continue
        seen.add(ds)
        for cid in CORRUPTION_IDS:
            if ds == "US8" and cid in US8_EXCLUDED:
                continue
            for lvl in LEVELS:
                out.append(Criterion(ds, cid, lvl, allow_slowdown=ds not in NO_SLOWDOWN_DATASETS))
    return out


@dataclass
class BenchmarkRecord:
    sample_id: str
    path: str
    label: int
    fold: int | None
    duration_s: float | None
    sample_rate: int | None
    corruption_id: str
    family: str
    level: str
    noise_type: str | None
    severity: float
    seed: int
    source_id: str | None
    offset: int | None
    corrupted_path: str


@dataclass
class BenchmarkManifest:
    dataset_id: str
    class_names: list[str]
    criterion: Criterion
    global_seed: int
    source_manifest: str
    records: list[BenchmarkRecord] = field(default_factory=list)
    root: Path | None = None

    def header(self) -> dict:
        return {"kind": "benchmark_manifest", "version": MANIFEST_VERSION,
                "dataset_id": self.dataset_id, "class_names": list(self.class_names),
                "criterion": self.criterion.id, "corruption_id": self.criterion.corruption_id,
                "level": self.criterion.level, "allow_slowdown": self.criterion.allow_slowdown,
                "global_seed": self.global_seed, "source_manifest": self.source_manifest}

    def to_text(self) -> str:
        lines = [_dumps(self.header())] + [_dumps(asdict(r)) for r in self.records]
        return "\n".join(lines) + "\n"

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def load_audio(self) -> list[Waveform]:
        root = self.root or Path(".")
        return [load_wav(root / r.corrupted_path) for r in self.records]

    def severity_histogram(self) -> dict:
        return dict(sorted(Counter(r.severity for r in self.records).items()))


def read_benchmark_manifest(path) -> BenchmarkManifest:
    path = Path(path)
    if path.is_dir():
        path = path / BENCHMARK_MANIFEST_NAME
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    head = json.loads(lines[0])
    if head.get("kind") != "benchmark_manifest":
        raise ValueError(f"{path}: not a benchmark manifest")
    crit = Criterion(head["dataset_id"], head["corruption_id"], head["level"], head["allow_slowdown"])
    recs = [BenchmarkRecord(**json.loads(ln)) for ln in lines[1:]]
    return BenchmarkManifest(head["dataset_id"], head["class_names"], crit, head["global_seed"],
                             head["source_manifest"], recs, path.parent)


def _corrupt_and_write(job):
    src_path, spec, lib, seed, sample_id, out_dir = job
    w = load_wav(src_path)
    out, rec = corrupt_sample(w, spec, lib, seed, sample_id=sample_id)
    buf = io.BytesIO()
    save_wav(out, buf, "float32")
    data = buf.getvalue()
    digest = hashlib.sha256(data).hexdigest()
    rel = f"audio/{digest[:2]}/{digest}.wav"
    dest = Path(out_dir) / rel
    dest.parent.mkdir(parents=True, exist_ok=True)
    if not dest.exists():
        tmp = dest.with_name(f"{dest.name}.{os.getpid()}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, dest)
    return rec, rel


def build_benchmark(test: DatasetManifest, criterion: Criterion, lib: NoiseLibrary | None,
                    global_seed: int, out_dir, workers: int = 1,
                    tables: CorruptionTables | None = None,
                    source_manifest: str | None = None,
                    spec: CorruptionSpec | None = None) -> BenchmarkManifest:
    """Corrupt every test entry and write audio plus ``manifest.jsonl`` to ``out_dir``.

    Audio goes to content-addressed paths; the manifest is written last via
    an atomic rename, so a directory without a manifest is an incomplete
    build. Any stale manifest is removed before work starts. ``spec``
    overrides the table-derived corruption (e.g. a fixed-SNR grid).
    """
    if spec is None:
        spec = criterion.spec(tables or default_tables())
    if spec.noise_pool is not None and spec.family == "EN":
        if lib is None:
            raise KeyError(f"{criterion.id} requires a noise library")
        missing = lib.missing(spec.noise_pool.noise_types)
        if missing:
            raise KeyError(f"noise library lacks types {missing} for {criterion.id}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / BENCHMARK_MANIFEST_NAME
    if manifest_path.exists():
        manifest_path.unlink()

    jobs = []
    for i, e in enumerate(test.entries):
        seed = derive_seed(global_seed, test.dataset_id, criterion.id, i)
        jobs.append((test.resolve(e), spec, lib, seed, e.sample_id, out_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_corrupt_and_write, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_corrupt_and_write(j) for j in jobs]

    records = []
    for e, (rec, rel) in zip(test.entries, results):
        records.append(BenchmarkRecord(
            e.sample_id, e.path, e.label, e.fold, e.duration_s, e.sample_rate,
            rec.corruption_id, rec.family, rec.level, rec.noise_type, rec.severity,
            rec.sample_seed, rec.source_id, rec.offset, rel))
    bm = BenchmarkManifest(test.dataset_id, list(test.class_names), criterion, int(global_seed),
                           source_manifest or "", records, out_dir)
    tmp = manifest_path.with_suffix(".jsonl.tmp")
    tmp.write_text(bm.to_text(), encoding="utf-8")
    os.replace(tmp, manifest_path)
    log.info("built %s %s: %d samples", test.dataset_id, criterion.id, len(records))
    return bm


def manifest_digest(path) -> str:
    path = Path(path)
    if path.is_dir():
        path = path / BENCHMARK_MANIFEST_NAME
    return hashlib.sha256(path.read_bytes()).hexdigest()


def reseed_check(bm: BenchmarkManifest) -> list[str]:
    """Sample ids whose stored seed does not re-derive from the manifest header."""
    return [r.sample_id for i, r in enumerate(bm.records)
            if r.seed != derive_seed(bm.global_seed, bm.dataset_id, bm.criterion.id, i)]
