"""Corrupted-audio benchmark construction and test-time adaptation toolkit."""

__version__ = "0.1.0"

from .audio import AudioError, Waveform, load_wav, log_mel_batch, mel_spectrogram, save_wav
from .benchmark import (BenchmarkManifest, Criterion, DatasetManifest, ManifestEntry, build_benchmark,
                        enumerate_criteria, parse_criterion, read_benchmark_manifest, read_manifest,
                        split_by_folds, split_stratified, write_manifest)
from .corruption import CorruptionSpec, corrupt_sample, derive_seed, mix_at_snr
from .metrics import PredictionSet, compute_metric, metric_report, silhouette
from .noise import NoiseLibrary, gen_white_noise, scan_noise
from .tables import default_tables, load_tables, validate_config
from .tta import AdaptConfig, LossConfig, OptimizerState, adapt, blr_step, combined_loss

__all__ = [
    "AdaptConfig", "AudioError", "BenchmarkManifest", "CorruptionSpec", "Criterion", "DatasetManifest",
    "LossConfig", "ManifestEntry", "NoiseLibrary", "OptimizerState", "PredictionSet", "Waveform",
    "adapt", "blr_step", "build_benchmark", "combined_loss", "compute_metric", "corrupt_sample",
    "default_tables", "derive_seed", "enumerate_criteria", "gen_white_noise", "load_tables", "load_wav",
    "log_mel_batch", "mel_spectrogram", "metric_report", "mix_at_snr", "parse_criterion",
    "read_benchmark_manifest", "read_manifest", "save_wav", "scan_noise", "silhouette",
    "split_by_folds", "split_stratified", "validate_config", "write_manifest",
]
