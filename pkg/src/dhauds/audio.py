"""Waveform container, WAV I/O, resampling, power and log-mel features.

Everything here is a pure function of its inputs. Samples are kept as
float64 in memory; files store int16 or float32 PCM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

LOG_FLOOR = 1e-10
DEFAULT_MAX_SHIFT = 0.1


class AudioError(Exception):
    """Base class for audio I/O failures."""


class MissingAudioFile(AudioError, FileNotFoundError):
    pass


class MalformedWav(AudioError, ValueError):
    pass


class UnsupportedEncoding(AudioError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono PCM samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        # own a private copy so freezing it never touches the caller's array
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {s.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


def load_wav(path) -> Waveform:
    """Read a 16-bit integer or 32-bit float PCM WAV file as mono.

    Multichannel files are averaged across channels and int16 data is
    scaled by 1/32768.

    Raises:
        MissingAudioFile: ``path`` does not exist.
        MalformedWav: the RIFF/WAVE structure could not be parsed.
        UnsupportedEncoding: any sample format other than int16/float32.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAudioFile(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedEncoding(f"{path}: {msg}") from exc
        raise MalformedWav(f"{path}: {msg}") from exc
    except (EOFError, OSError, IndexError) as exc:
        raise MalformedWav(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: sample format {data.dtype} is not int16 or float32")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size and not np.all(np.isfinite(x)):
        raise MalformedWav(f"{path}: non-finite samples")
    return Waveform(x, rate)


def save_wav(w: Waveform, path, encoding: str = "float32") -> None:
    """Write ``w`` as a mono WAV file.

    int16 output clips to [-1, 1] first; float32 output is written as-is.
    """
    if encoding == "int16":
        clipped = np.clip(w.samples, -1.0, 1.0)
        data = np.round(clipped * 32767.0).astype("<i2")
    elif encoding == "float32":
        data = w.samples.astype("<f4")
    else:
        raise ValueError(f"encoding must be 'int16' or 'float32', got {encoding!r}")
    target = path if hasattr(path, "write") else Path(path)
    try:
        wavfile.write(target, w.sample_rate, data)
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc


def rms_power(w: Waveform) -> float:
    """Mean-square power over the whole clip."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("power of an empty waveform is undefined")
    return float(np.mean(x * x))


def resample_ratio(x: np.ndarray, ratio: float, n_out: int | None = None,
                   window=("kaiser", 5.0)) -> np.ndarray:
    """Band-limited resampling of a raw array by ``ratio`` (output/input).

    The ratio is approximated by a rational with denominator <= 1000 and
    the result is trimmed or zero-padded to ``n_out`` samples (default
    ``round(len(x) * ratio)``).
    """
    x = np.asarray(x, dtype=np.float64)
    if n_out is None:
        n_out = int(math.floor(len(x) * ratio + 0.5))
    frac = Fraction(ratio).limit_denominator(1000)
    up, down = frac.numerator, frac.denominator
    if up == down:
        y = x.copy()
    else:
        y = resample_poly(x, up, down, window=window)
    if len(y) >= n_out:
        return y[:n_out]
    return np.concatenate([y, np.zeros(n_out - len(y))])


def resample(w: Waveform, target_rate: int, kaiser_beta: float = 5.0) -> Waveform:
    """Resample to ``target_rate`` with a Kaiser-windowed sinc polyphase filter.

    Output length is ``round(len * target / source)``.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), target_rate)
    g = math.gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    n_out = int(math.floor(len(w) * target_rate / w.sample_rate + 0.5))
    y = resample_poly(w.samples, up, down, window=("kaiser", kaiser_beta))
    y = y[:n_out] if len(y) >= n_out else np.concatenate([y, np.zeros(n_out - len(y))])
    return Waveform(y, target_rate)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    window_s: float = 0.025
    hop_s: float = 0.010
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist

    def frame_params(self, sample_rate: int) -> tuple[int, int, int]:
        win = int(round(self.window_s * sample_rate))
        hop = int(round(self.hop_s * sample_rate))
        n_fft = 1 << max(0, (win - 1).bit_length())
        return win, hop, n_fft


@dataclass(frozen=True, eq=False)
class MelFeature:
    bins: np.ndarray  # n_mels x n_frames, natural-log energies
    frame_hop: int

    @property
    def n_mels(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Hz positions of the n_mels + 2 filter edges/centres (HTK mel scale)."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Unit-peak triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    if not (0.0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError(f"invalid filterbank bounds fmin={fmin}, fmax={fmax} at {sample_rate} Hz")
    pts = mel_center_frequencies(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (ctr - lo)
    falling = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB_CACHE: dict = {}


def _filterbank_cached(sample_rate, n_fft, n_mels, fmin, fmax):
    key = (sample_rate, n_fft, n_mels, fmin, fmax)
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
        fb.setflags(write=False)
        _FB_CACHE[key] = fb
    return fb


def power_frames(x: np.ndarray, win: int, hop: int, n_fft: int) -> np.ndarray:
    """Centred, zero-padded Hann-windowed power spectra, shape (n_frames, n_fft//2+1).

    ``x`` may carry leading batch axes. n_frames = 1 + len // hop.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_frames = 1 + n // hop
    pad_left = win // 2
    total = (n_frames - 1) * hop + win
    pad = [(0, 0)] * (x.ndim - 1) + [(pad_left, max(0, total - n - pad_left))]
    xp = np.pad(x, pad)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = xp[..., idx] * np.hanning(win + 1)[:-1]
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def mel_spectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelFeature:
    """Log-compressed mel filterbank energies, floor ``log(1e-10)``."""
    bins = log_mel_batch(w.samples[None, :], w.sample_rate, cfg)[0]
    return MelFeature(bins, cfg.frame_params(w.sample_rate)[1])


def log_mel_batch(x: np.ndarray, sample_rate: int, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Vectorised log-mel for a (B, L) array of equal-length clips -> (B, n_mels, n_frames)."""
    win, hop, n_fft = cfg.frame_params(sample_rate)
    if win < hop:
        raise ValueError(f"window ({win}) shorter than hop ({hop})")
    fmax = sample_rate / 2 if cfg.fmax is None else cfg.fmax
    fb = _filterbank_cached(sample_rate, n_fft, cfg.n_mels, float(cfg.fmin), float(fmax))
    pw = power_frames(x, win, hop, n_fft)
    energies = pw @ fb.T
    return np.log(np.maximum(energies, LOG_FLOOR)).swapaxes(-1, -2)


def temporal_shift(w: Waveform, direction: str, fraction: float,
                   max_frac: float = DEFAULT_MAX_SHIFT) -> Waveform:
    """Shift samples by ``round(fraction * len)`` positions, zero-filling the gap.

    ``right`` delays the signal (x[i] moves to i + k); ``left`` advances it.
    A fraction of 0 is accepted and returns an identical copy.
    """
    if not (0.0 <= fraction <= max_frac):
        raise ValueError(f"shift fraction {fraction} outside [0, {max_frac}]")
    x = w.samples
    n = len(x)
    k = min(int(math.floor(fraction * n + 0.5)), n)
    out = np.zeros(n)
    if direction == "right":
        out[k:] = x[: n - k]
    elif direction == "left":
        out[: n - k] = x[k:]
    else:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    return Waveform(out, w.sample_rate)
