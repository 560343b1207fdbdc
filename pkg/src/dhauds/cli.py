"""Command-line interface: ``dhauds <command> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage
error, 3 I/O error, 4 noise-pool resolution failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .audio import AudioError
from .benchmark import (DATASET_IDS, ExcludedCriterion, build_benchmark, enumerate_criteria,
                        manifest_digest, parse_criterion, read_benchmark_manifest, read_manifest,
                        split_by_folds, split_stratified, write_manifest)
from .experiments import (ADAPT_SEED, EVAL_SEED, STABILITY_AXES, build_pair, drawdown_rows,
                          fixed_severity_spec, run_adaptation, soft_expectation_holds, stability)
from .metrics import MetricError, format_report, metric_report, read_predictions, silhouette, write_report_json
from .noise import NoiseLibrary, NoiseResolutionError, scan_noise, write_noise_index
from .tables import ConfigError, load_tables, validate_config
from .toymodel import (TrainConfig, ToyModel, ToyModelConfig, ToyTaskConfig, gen_toy_dataset,
                       load_checkpoint, save_checkpoint, train_source)
from .tta import AdaptConfig, LossConfig

log = logging.getLogger("dhauds")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_POOL = 0, 1, 2, 3, 4
DATA_ROOT_ENV = "DHAUDS_DATA_ROOT"


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _path(p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else _data_root() / p


def _write_yaml(obj, path: Path) -> None:
    path.write_text(yaml.safe_dump(obj, sort_keys=True), encoding="utf-8")


def _fold_set(text: str) -> set:
    out = set()
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.update(range(int(lo), int(hi) + 1))
        elif part:
            out.add(int(part))
    return out


# -- commands ------------------------------------------------------------------

def cmd_scan_noise(args) -> int:
    root = _path(args.root)
    if not root.is_dir():
        raise CLIError(f"noise root {root} is not a directory", EXIT_IO)
    try:
        rows = scan_noise(root)
    except AudioError as exc:
        raise CLIError(str(exc), EXIT_IO) from exc
    out = Path(args.out) if args.out else root / "noise_index.csv"
    # index paths are relative to the index file's directory
    base = out.resolve().parent
    rows = [(t, os.path.relpath(root.resolve() / rel, base), d) for t, rel, d in rows]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_noise_index(rows, out)
    types = sorted({r[0] for r in rows})
    if not rows:
        print(f"warning: no recordings under {root}; wrote empty index {out}", file=sys.stderr)
    print(f"indexed {len(rows)} recordings across {len(types)} noise types -> {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    m = read_manifest(_path(args.manifest))
    if args.mode == "stratified":
        train, test = split_stratified(m, args.train_frac, args.seed)
    else:
        train, test = split_by_folds(m, _fold_set(args.train_folds), _fold_set(args.test_folds))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("test", test)):
        # rebase relative audio paths onto the output directory
        entries = [replace(e, path=os.path.relpath(m.resolve(e).resolve(), out.resolve()))
                   for e in part.entries]
        write_manifest(part.subset(entries), out / f"{name}.jsonl")
    _write_yaml({"command": "split", "manifest": str(args.manifest), "mode": args.mode,
                 "train_frac": args.train_frac, "seed": args.seed,
                 "train_folds": args.train_folds, "test_folds": args.test_folds},
                out / "run_config.yaml")
    print(f"train={len(train.entries)} test={len(test.entries)} -> {out}")
    return EXIT_OK


def cmd_criteria(args) -> int:
    crits = enumerate_criteria(args.datasets)
    if args.json:
        print(json.dumps([{**asdict(c), "id": c.id} for c in crits], indent=1))
    else:
        for c in crits:
            flag = "" if c.allow_slowdown else "\tno-slowdown"
            print(f"{c.dataset_id}\t{c.id}{flag}")
        print(f"# {len(crits)} criteria", file=sys.stderr)
    return EXIT_OK


def _load_lib(index):
    if not index:
        return None
    p = _path(index)
    if not p.is_file():
        raise CLIError(f"noise index {p} not found", EXIT_IO)
    return NoiseLibrary.from_index(p)


def cmd_build(args) -> int:
    tables = load_tables(args.tables) if args.tables else None
    if tables is not None:
        rep = validate_config(tables)
        if not rep.ok:
            raise CLIError("invalid tables: " + "; ".join(m for _, m in rep.violations))
    manifest_path = _path(args.manifest)
    if not manifest_path.is_file():
        raise CLIError(f"manifest {manifest_path} not found", EXIT_IO)
    m = read_manifest(manifest_path)
    crit = parse_criterion(m.dataset_id, args.criterion)
    lib = _load_lib(args.noise_index)
    out = Path(args.out)
    bm = build_benchmark(m, crit, lib, args.seed, out, workers=args.workers, tables=tables,
                         source_manifest=str(args.manifest))
    _write_yaml({"command": "build", "manifest": str(args.manifest), "dataset_id": m.dataset_id,
                 "criterion": crit.id, "allow_slowdown": crit.allow_slowdown, "seed": args.seed,
                 "noise_index": args.noise_index, "tables": args.tables or "<packaged defaults>",
                 "workers": args.workers}, out / "run_config.yaml")
    hist = bm.severity_histogram()
    print(f"built {m.dataset_id} {crit.id}: {len(bm.records)} samples"
          + ("" if crit.allow_slowdown else " (slow-down suppressed)"))
    print("severity histogram: " + ", ".join(f"{k:g}:{v}" for k, v in hist.items()))
    print(f"manifest digest: {manifest_digest(out)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_predictions(_path(args.predictions))
    bm = read_benchmark_manifest(_path(args.benchmark))
    n, c = len(preds.labels), preds.n_classes
    if n != len(bm.records) or c != len(bm.class_names):
        raise CLIError(f"predictions are {n}x{c} but the manifest has "
                       f"{len(bm.records)} samples and {len(bm.class_names)} classes")
    if not np.array_equal(preds.labels, bm.labels):
        raise CLIError("prediction labels do not match the manifest labels")
    rep = metric_report(preds, bm.dataset_id, args.metric)
    rep["criterion"] = bm.criterion.id
    text = format_report(rep)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        write_report_json(rep, out / "report.json")
    return EXIT_OK


def cmd_silhouette(args) -> int:
    p = _path(args.embeddings)
    if p.suffix == ".npz":
        data = np.load(p)
        emb, labels = data["embeddings"], data["labels"]
    else:
        arr = np.loadtxt(p, delimiter=",", ndmin=2)
        emb, labels = arr[:, :-1], arr[:, -1].astype(int)
    print(f"silhouette={silhouette(emb, labels):.6f}")
    return EXIT_OK


# -- toy -----------------------------------------------------------------------

def _adapt_cfg(args) -> AdaptConfig:
    loss = LossConfig(lam=args.lam, w_nnm=args.weights[0], w_em=args.weights[1], w_ge=args.weights[2],
                      alpha=args.alpha, consistency_norm=args.consistency_norm)
    return AdaptConfig(loss=loss, lr_c=args.lr_c, lr_ratio=args.lr_ratio, momentum=args.momentum,
                       batch_size=args.batch_size, epochs=args.epochs, shuffle_seed=args.shuffle_seed,
                       max_shift=args.max_shift, allow_small_batch=args.allow_small_batch)


def _toy_sets(args, test_manifest):
    if args.snr is not None:
        if not args.criterion.startswith("WHN") and not args.criterion.startswith("EN"):
            raise CLIError("--snr only applies to WHN/EN criteria")
        crit, spec = fixed_severity_spec(args.criterion.split("-")[0], args.snr)
    else:
        crit = parse_criterion("TOY", args.criterion)
        spec = None
    lib = _load_lib(args.noise_index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return build_pair(test_manifest, crit, out / "sets", lib=lib, spec=spec, workers=args.workers,
                      seeds=(args.adapt_seed, args.eval_seed))


def cmd_toy_gen(args) -> int:
    cfg = ToyTaskConfig(train_per_class=args.train_per_class, test_per_class=args.test_per_class,
                        seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = gen_toy_dataset(cfg, out)
    _write_yaml({"command": "toy gen", "seed": args.seed, "train_per_class": args.train_per_class,
                 "test_per_class": args.test_per_class, "sample_rate": cfg.sample_rate,
                 "clip_seconds": cfg.clip_seconds, "classes": [asdict(c) for c in cfg.classes]},
                out / "run_config.yaml")
    print(f"toy dataset: {len(train.entries)} train / {len(test.entries)} test -> {out}")
    return EXIT_OK


def cmd_toy_train(args) -> int:
    data = Path(args.data)
    train, test = read_manifest(data / "train.jsonl"), read_manifest(data / "test.jsonl")
    model = ToyModel(ToyModelConfig(n_classes=len(train.class_names)), seed=args.init_seed)
    hp = TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs, batch=args.batch,
                     seed=args.seed)
    model, acc = train_source(model, train, hp, test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    _write_yaml({"command": "toy train", "data": str(data), "init_seed": args.init_seed, **asdict(hp),
                 "clean_top1": acc}, out.with_suffix(".run_config.yaml"))
    print(f"clean top-1 = {acc:.4f}; checkpoint -> {out}")
    return EXIT_OK


def cmd_toy_adapt(args) -> int:
    data = Path(args.data)
    test = read_manifest(data / "test.jsonl")
    model = load_checkpoint(args.checkpoint)
    cfg = _adapt_cfg(args)
    a_set, e_set = _toy_sets(args, test)
    run = run_adaptation(model, a_set, e_set, cfg, args.metric)
    out = Path(args.out)
    (out / "curve.tsv").write_text(run.curve.to_text(), encoding="utf-8")
    _write_yaml({"command": "toy adapt", "checkpoint": str(args.checkpoint), "criterion": args.criterion,
                 "snr": args.snr, "adapt_seed": args.adapt_seed, "eval_seed": args.eval_seed,
                 "metric": args.metric, **cfg.as_dict()}, out / "run_config.yaml")
    report = {"baseline": run.curve.values[0], "final": run.curve.values[-1],
              "gain": run.curve.values[-1] - run.curve.values[0],
              "silhouette_before": run.silhouette_before, "silhouette_after": run.silhouette_after}
    (out / "report.txt").write_text("".join(f"{k}={v:.6f}\n" for k, v in report.items()), encoding="utf-8")
    print("".join(f"{k}={v:.6f}\n" for k, v in report.items()), end="")
    return EXIT_OK


def cmd_toy_stability(args) -> int:
    data = Path(args.data)
    test = read_manifest(data / "test.jsonl")
    model = load_checkpoint(args.checkpoint)
    base = _adapt_cfg(args)
    a_set, e_set = _toy_sets(args, test)
    out = Path(args.out)
    axes = list(STABILITY_AXES) if args.axis == "both" else [args.axis]
    summary = ["axis\tsetting\tmomentum\tlr_ratio\tbaseline\tpeak\tfinal\tdrawdown"]
    for axis in axes:
        results = stability(model, a_set, e_set, axis, base, args.metric)
        for label, (_, curve) in results.items():
            (out / f"curve_{axis}_{label}.tsv").write_text(curve.to_text(), encoding="utf-8")
        rows = drawdown_rows(results)
        for r in rows:
            summary.append(f"{axis}\t{r['setting']}\t{r['momentum']}\t{r['lr_ratio']}\t{r['baseline']:.6f}"
                           f"\t{r['peak']:.6f}\t{r['final']:.6f}\t{r['drawdown']:.6f}")
        holds = soft_expectation_holds(axis, rows)
        summary.append(f"# {axis}: low-momentum/BLR drawdown <= high-momentum/SLR drawdown: {holds}")
    text = "\n".join(summary) + "\n"
    (out / "stability_summary.tsv").write_text(text, encoding="utf-8")
    _write_yaml({"command": "toy stability", "axis": args.axis, "checkpoint": str(args.checkpoint),
                 "criterion": args.criterion, "snr": args.snr, "metric": args.metric,
                 "adapt_seed": args.adapt_seed, "eval_seed": args.eval_seed,
                 "variants": {k: [dict(v) for _, v in s] for k, s in STABILITY_AXES.items()},
                 **base.as_dict()}, out / "run_config.yaml")
    print(text, end="")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_adapt_flags(p):
    p.add_argument("--data", required=True, help="toy dataset directory (from 'toy gen')")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--criterion", default="WHN-L1")
    p.add_argument("--snr", type=float, default=None, help="fixed SNR (dB) instead of the level's grid")
    p.add_argument("--noise-index", default=None)
    p.add_argument("--adapt-seed", type=int, default=ADAPT_SEED)
    p.add_argument("--eval-seed", type=int, default=EVAL_SEED)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--metric", default="accuracy_top1")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--allow-small-batch", action="store_true")
    p.add_argument("--lr-c", type=float, default=1e-3)
    p.add_argument("--lr-ratio", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.7)
    p.add_argument("--lam", type=float, default=1.0, help="consistency weight")
    p.add_argument("--weights", type=float, nargs=3, default=[1.0, 1.0, 1.0],
                   metavar=("W_NNM", "W_EM", "W_GE"))
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--consistency-norm", choices=["literal", "per_sample_l2"], default="literal")
    p.add_argument("--shuffle-seed", type=int, default=EVAL_SEED)
    p.add_argument("--max-shift", type=float, default=0.1)


def build_parser(defaults: dict | None = None) -> argparse.ArgumentParser:
    """Build the parser; ``defaults`` (e.g. from ``--config``) override flag defaults."""
    parser = argparse.ArgumentParser(prog="dhauds", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config", default=None, help="YAML file of flag defaults")
    leaves = []
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan-noise", help="index a noise library directory")
    p.add_argument("root")
    p.add_argument("--out", default=None, help="index path (default ROOT/noise_index.csv)")
    p.set_defaults(func=cmd_scan_noise)
    leaves.append(p)

    p = sub.add_parser("split", help="split a dataset manifest into train/test")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=["stratified", "folds"], default="stratified")
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-folds", default="1-7")
    p.add_argument("--test-folds", default="8-10")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)
    leaves.append(p)

    p = sub.add_parser("criteria", help="list evaluation criteria")
    p.add_argument("--datasets", nargs="+", default=list(DATASET_IDS))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_criteria)
    leaves.append(p)

    p = sub.add_parser("build", help="build a corrupted benchmark set")
    p.add_argument("manifest")
    p.add_argument("criterion", help="e.g. WHN-L1, ENSC-L2, TST-L1")
    p.add_argument("--noise-index", default=None)
    p.add_argument("--seed", type=int, default=ADAPT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tables", default=None, help="custom severity/noise table YAML")
    p.set_defaults(func=cmd_build)
    leaves.append(p)

    p = sub.add_parser("eval", help="score a predictions file against a benchmark manifest")
    p.add_argument("predictions")
    p.add_argument("benchmark", help="benchmark manifest file or build directory")
    p.add_argument("--metric", default=None, help="override the dataset's canonical metric")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    leaves.append(p)

    p = sub.add_parser("silhouette", help="silhouette score of labelled embeddings")
    p.add_argument("embeddings", help=".npz with 'embeddings'/'labels' or CSV with label last")
    p.set_defaults(func=cmd_silhouette)
    leaves.append(p)

    toy = sub.add_parser("toy", help="desk-scale synthetic pipeline").add_subparsers(dest="toy_cmd", required=True)
    p = toy.add_parser("gen")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=60)
    p.set_defaults(func=cmd_toy_gen)
    leaves.append(p)

    p = toy.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_train)
    leaves.append(p)

    p = toy.add_parser("adapt")
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_toy_adapt)
    leaves.append(p)

    p = toy.add_parser("stability")
    _add_adapt_flags(p)
    p.add_argument("--axis", choices=["momentum", "lr", "both"], default="both")
    p.set_defaults(func=cmd_toy_stability, metric="roc_auc")
    leaves.append(p)

    if defaults:
        norm = {k.replace("-", "_"): v for k, v in defaults.items()}
        for leaf in leaves:
            known = {a.dest for a in leaf._actions}
            leaf.set_defaults(**{k: v for k, v in norm.items() if k in known})
    return parser


def _load_config(argv) -> dict | None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return None
    with open(known.config, encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise CLIError(f"{known.config}: expected a mapping of flag defaults")
    return cfg


def main(argv=None) -> int:
    try:
        defaults = _load_config(argv)
    except (CLIError, OSError, yaml.YAMLError) as exc:
        print(f"error: bad --config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser(defaults)
    args = parser.parse_args(argv)
    if args.command == "split" and args.mode == "stratified" and args.seed is None:
        parser.error("stratified split needs an explicit --seed")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ExcludedCriterion as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoiseResolutionError, KeyError) as exc:
        print(f"error: noise pool resolution failed: {exc}", file=sys.stderr)
        return EXIT_POOL
    except (AudioError, OSError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, MetricError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
