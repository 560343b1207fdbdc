"""Phase-vocoder time stretching and pitch shifting."""

from __future__ import annotations

import math

import numpy as np

from .audio import Waveform, resample_ratio

REFERENCE_RATE = 44100
REFERENCE_NFFT = 2048
MAX_STRETCH_PERCENT = 50.0
MAX_SEMITONES = 24.0


def vocoder_params(sample_rate: int) -> tuple[int, int]:
    """FFT size and hop: 2048/512 at 44.1 kHz, scaled to the nearest power of two."""
    target = REFERENCE_NFFT * sample_rate / REFERENCE_RATE
    n_fft = 1 << max(6, int(round(math.log2(target))))
    return n_fft, n_fft // 4


def _stft(x: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    pad = n_fft // 2
    n_frames = 1 + int(math.ceil(len(x) / hop))
    total = (n_frames - 1) * hop + n_fft
    xp = np.pad(x, (pad, total - len(x) - pad))
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    return np.fft.rfft(xp[idx] * window, axis=-1)


def _istft(spec: np.ndarray, n_fft: int, hop: int, window: np.ndarray, length: int) -> np.ndarray:
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * window
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + n_fft
    out = np.zeros(total)
    wsum = np.zeros(total)
    wsq = window * window
    for i in range(n_frames):
        s = i * hop
        out[s:s + n_fft] += frames[i]
        wsum[s:s + n_fft] += wsq
    nz = wsum > 1e-8 * wsum.max()
    out[nz] /= wsum[nz]
    out = out[n_fft // 2:]
    if len(out) >= length:
        return out[:length]
    return np.concatenate([out, np.zeros(length - len(out))])


def phase_vocoder(x: np.ndarray, rate: float, n_fft: int, hop: int) -> np.ndarray:
    """Stretch ``x`` in time by 1/rate while keeping its spectral content.

    rate > 1 shortens the signal. Output length is round(len(x) / rate).
    """
    if rate <= 0:
        raise ValueError(f"stretch rate must be positive, got {rate}")
    x = np.asarray(x, dtype=np.float64)
    window = np.hanning(n_fft + 1)[:-1]
    spec = _stft(x, n_fft, hop, window)
    n_frames = spec.shape[0]
    steps = np.arange(0.0, n_frames, rate)
    spec = np.vstack([spec, np.zeros((1, spec.shape[1]), dtype=spec.dtype)])
    i0 = np.floor(steps).astype(int)
    frac = (steps - i0)[:, None]
    mag = (1.0 - frac) * np.abs(spec[i0]) + frac * np.abs(spec[i0 + 1])

    expected = 2.0 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    dphi = np.angle(spec[i0 + 1]) - np.angle(spec[i0]) - expected
    dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
    increments = expected + dphi
    phase = np.angle(spec[0]) + np.vstack([np.zeros((1, spec.shape[1])),
                                           np.cumsum(increments[:-1], axis=0)])
    out_len = int(math.floor(len(x) / rate + 0.5))
    return _istft(mag * np.exp(1j * phase), n_fft, hop, window, out_len)


def time_stretch(w: Waveform, percent: float) -> Waveform:
    """Change tempo by ``percent`` while preserving pitch.

    Positive percent speeds up (shorter output); rate = 1 + percent / 100.
    """
    if percent == 0 or abs(percent) >= MAX_STRETCH_PERCENT:
        raise ValueError(f"stretch percent must be non-zero with |percent| < 50, got {percent}")
    n_fft, hop = vocoder_params(w.sample_rate)
    y = phase_vocoder(w.samples, 1.0 + percent / 100.0, n_fft, hop)
    return Waveform(y, w.sample_rate)


def pitch_shift(w: Waveform, semitones: float) -> Waveform:
    """Shift pitch by ``semitones`` keeping duration: stretch, then resample back."""
    if semitones == 0 or abs(semitones) > MAX_SEMITONES:
        raise ValueError(f"semitones must be non-zero with |semitones| <= 24, got {semitones}")
    factor = 2.0 ** (semitones / 12.0)
    n_fft, hop = vocoder_params(w.sample_rate)
    stretched = phase_vocoder(w.samples, 1.0 / factor, n_fft, hop)
    y = resample_ratio(stretched, len(w) / len(stretched), n_out=len(w))
    return Waveform(y, w.sample_rate)
