"""Waveform to 40-bin log-mel spectrogram, 10 ms frame shift.

Conventions fixed here (and relied on by the tests): 25 ms Hann window on a
512-point FFT, centered frames with reflect padding, HTK mel scale between
20 Hz and 7600 Hz with Slaney area normalization, natural log with a 1e-10
floor, and exactly 100 frames per one-second clip.
"""
from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000


@dataclass
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 512
    win_length: int = 400        # 25 ms
    hop_length: int = 160        # 10 ms
    n_mels: int = 40
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10
    frames: int = 100


@dataclass
class AudioClip:
    samples: np.ndarray          # float32 in [-1, 1]
    sample_rate: int = SAMPLE_RATE


def read_wav(path) -> AudioClip:
    """Read canonical RIFF 16 kHz mono 16-bit PCM. Anything else is rejected."""
    try:
        with _wave.open(str(path), "rb") as w:
            rate = w.getframerate()
            channels = w.getnchannels()
            width = w.getsampwidth()
            comp = w.getcomptype()
            n = w.getnframes()
            raw = w.readframes(n)
    except _wave.Error as e:
        raise ContractViolation(f"{path}: not a readable WAV file ({e})") from e
    if comp != "NONE":
        raise ContractViolation(f"{path}: compressed WAV not supported ({comp})")
    if width != 2:
        raise ContractViolation(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise ContractViolation(f"{path}: expected mono, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise ContractViolation(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} (no resampling)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioClip(samples=samples, sample_rate=rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as canonical 16-bit PCM mono."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).round().astype("<i2")
    with _wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def fit_length(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad on the right or truncate to exactly `length` samples."""
    x = np.asarray(samples, dtype=np.float32)
    if len(x) >= length:
        return x[:length]
    out = np.zeros(length, dtype=np.float32)
    out[: len(x)] = x
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2+1], HTK spacing, Slaney area norm."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for i in range(cfg.n_mels):
        lo, ce, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / (ce - lo)
        down = (hi - fft_freqs) / (hi - ce)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # Slaney: equal area per filter
    return fb.astype(np.float32)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def _frame_centered(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    xp = np.pad(x.astype(np.float64), pad, mode="reflect")
    n_frames = 1 + (len(xp) - cfg.n_fft) // cfg.hop_length
    starts = np.arange(n_frames) * cfg.hop_length
    return xp[starts[:, None] + np.arange(cfg.n_fft)[None, :]]


_WINDOW_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _padded_window(cfg: FrontendConfig) -> np.ndarray:
    key = (cfg.win_length, cfg.n_fft)
    w = _WINDOW_CACHE.get(key)
    if w is None:
        # periodic Hann, centered inside the FFT buffer
        h = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.win_length) / cfg.win_length)
        w = np.zeros(cfg.n_fft, dtype=np.float64)
        off = (cfg.n_fft - cfg.win_length) // 2
        w[off:off + cfg.win_length] = h
        _WINDOW_CACHE[key] = w
    return w


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def log_mel(clip: AudioClip, cfg: FrontendConfig | None = None) -> np.ndarray:
    """LogMelSpectrogram of one clip: [cfg.frames, cfg.n_mels] float32."""
    cfg = cfg or FrontendConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ContractViolation(
            f"expected {cfg.sample_rate} Hz input, got {clip.sample_rate} (no resampling)")
    x = fit_length(clip.samples)
    frames = _frame_centered(x, cfg) * _padded_window(cfg)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    fb = _FILTERBANK_CACHE.get(key)
    if fb is None:
        fb = mel_filterbank(cfg).astype(np.float64)
        _FILTERBANK_CACHE[key] = fb
    mel = power @ fb.T
    out = np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)
    if out.shape[0] >= cfg.frames:
        return out[: cfg.frames]
    padded = np.full((cfg.frames, cfg.n_mels), np.log(cfg.log_floor), dtype=np.float32)
    padded[: out.shape[0]] = out
    return padded


def normalize_spectrogram(spec: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-utterance mean 0 / var 1 over all cells (constant input maps to 0)."""
    mu = spec.mean(dtype=np.float64)
    sd = spec.std(dtype=np.float64)
    return ((spec - mu) / (sd + eps)).astype(np.float32)
