"""Waveform I/O, log-mel extraction, autocorrelation F0 and a Griffin-Lim inverse."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from ..config import AudioConfig


class AudioError(ValueError):
    pass


@dataclass
class F0Contour:
    f0_hz: np.ndarray
    uv: np.ndarray  # bool, True = voiced

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.uv = np.asarray(self.uv, dtype=bool)
        if self.f0_hz.shape != self.uv.shape:
            raise AudioError("f0 and uv lengths differ")
        if not np.array_equal(self.f0_hz > 0, self.uv):
            raise AudioError("f0 > 0 must coincide with voiced frames")

    def __len__(self):
        return len(self.f0_hz)

    def to_array(self) -> np.ndarray:
        return np.stack([self.f0_hz, self.uv.astype(np.float64)], axis=1)

    @classmethod
    def from_array(cls, arr) -> "F0Contour":
        arr = np.asarray(arr, dtype=np.float64)
        uv = arr[:, 1] > 0.5
        return cls(np.where(uv, arr[:, 0], 0.0), uv)


def midi_to_hz(midi):
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69.0) / 12.0)


def hz_to_midi(hz):
    return 69.0 + 12.0 * np.log2(np.asarray(hz, dtype=np.float64) / 440.0)


def read_wav(path: str | Path, expected_rate: int = 48000) -> np.ndarray:
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate}, expected {expected_rate}")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | Path, samples: np.ndarray, rate: int = 48000, pcm16: bool = True) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if pcm16:
        wavfile.write(str(path), rate, (np.clip(samples, -1.0, 32767 / 32768) * 32768).astype(np.int16))
    else:
        wavfile.write(str(path), rate, samples.astype(np.float32))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = 48000, n_fft: int = 1024, n_mels: int = 80, fmin: float = 0.0, fmax: float = 24000.0) -> np.ndarray:
    """``n_mels x (n_fft//2 + 1)`` unit-peak triangular filters on the HTK mel scale."""
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def _frames(samples: np.ndarray, size: int, hop: int) -> np.ndarray:
    n = 1 + (len(samples) - size) // hop
    idx = np.arange(size)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def stft_magnitude(samples: np.ndarray, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    window = np.hanning(n_fft + 1)[:-1]
    return np.abs(np.fft.rfft(_frames(samples, n_fft, hop) * window, axis=1))


def n_mel_frames(n_samples: int, cfg: AudioConfig | None = None) -> int:
    cfg = cfg or AudioConfig()
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def extract_mel(samples, cfg: AudioConfig | None = None) -> np.ndarray:
    """Natural-log mel amplitudes, ``frames x 80``, no edge padding."""
    cfg = cfg or AudioConfig()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise AudioError("extract_mel expects a mono waveform")
    if len(samples) < cfg.n_fft:
        raise AudioError(f"waveform of {len(samples)} samples is shorter than n_fft={cfg.n_fft}")
    bank = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mel = stft_magnitude(samples, cfg.n_fft, cfg.hop) @ bank.T
    return np.log(np.maximum(mel, cfg.log_floor))


def extract_f0(samples, cfg: AudioConfig | None = None) -> F0Contour:
    """Normalized-autocorrelation F0, one value per mel frame."""
    cfg = cfg or AudioConfig()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or len(samples) < cfg.n_fft:
        raise AudioError("extract_f0 expects a mono waveform of at least n_fft samples")
    n = n_mel_frames(len(samples), cfg)
    win = int(round(cfg.f0_window * cfg.sample_rate))
    lag_min = int(np.floor(cfg.sample_rate / cfg.f0_max))
    lag_max = int(np.ceil(cfg.sample_rate / cfg.f0_min))
    centers = np.arange(n) * cfg.hop + cfg.n_fft // 2
    start = np.clip(centers - win // 2, 0, max(len(samples) - win, 0))
    padded = np.pad(samples, (0, max(win - len(samples), 0)))
    frames = padded[start[:, None] + np.arange(win)[None, :]]
    frames = frames - frames.mean(axis=1, keepdims=True)

    size = 1 << int(np.ceil(np.log2(2 * win)))
    spec = np.fft.rfft(frames, size, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), size, axis=1)[:, : lag_max + 2]
    energy = np.concatenate([np.zeros((n, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(lag_max + 2)
    head = energy[:, win - lags]  # sum of x[0 : win - lag]^2
    tail = energy[:, -1:] - energy[:, lags]  # sum of x[lag : win]^2
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12, acf / np.maximum(denom, 1e-300), 0.0)

    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    for i in range(n):
        seg = r[i, lag_min : lag_max + 1]
        best = float(seg.max()) if seg.size else 0.0
        if best < cfg.f0_threshold:
            continue
        # Earliest local peak close to the global maximum avoids octave drops.
        peaks = [k for k in range(1, len(seg) - 1) if seg[k] >= seg[k - 1] and seg[k] >= seg[k + 1] and seg[k] >= 0.9 * best]
        k = peaks[0] if peaks else int(seg.argmax())
        lag = float(lag_min + k)
        if 0 < k < len(seg) - 1:
            a, b, c = seg[k - 1], seg[k], seg[k + 1]
            denom_p = a - 2 * b + c
            if denom_p < 0:
                lag += 0.5 * (a - c) / denom_p
        f0[i] = cfg.sample_rate / lag
        voiced[i] = True
    return F0Contour(f0, voiced)


def griffin_lim(log_mel: np.ndarray, cfg: AudioConfig | None = None, iterations: int = 64, seed: int = 0) -> np.ndarray:
    """Diagnostic-quality waveform from a log-mel via filterbank pseudo-inverse."""
    cfg = cfg or AudioConfig()
    bank = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mag = np.maximum(np.exp(np.asarray(log_mel)) @ np.linalg.pinv(bank).T, 0.0)
    window = np.hanning(cfg.n_fft + 1)[:-1]
    n_frames = mag.shape[0]
    length = cfg.n_fft + cfg.hop * (n_frames - 1)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))

    def istft(spec):
        frames = np.fft.irfft(spec, cfg.n_fft, axis=1) * window
        out = np.zeros(length)
        norm = np.zeros(length)
        for i in range(n_frames):
            out[i * cfg.hop : i * cfg.hop + cfg.n_fft] += frames[i]
            norm[i * cfg.hop : i * cfg.hop + cfg.n_fft] += window**2
        return out / np.maximum(norm, 1e-8)

    for _ in range(iterations):
        wave = istft(mag * phase)
        spec = np.fft.rfft(_frames(wave, cfg.n_fft, cfg.hop) * window, axis=1)
        phase = np.exp(1j * np.angle(spec))
    wave = istft(mag * phase)
    peak = np.abs(wave).max()
    return wave / peak * 0.9 if peak > 0 else wave
