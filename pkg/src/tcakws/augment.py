"""Randomized waveform- and spectrogram-domain augmentations.

Waveform ops all preserve length exactly. Spectrogram masks are planned here
and applied after per-utterance normalization of the log-mel, so the fill
value 0.0 is the neutral value. Every random decision is drawn from a caller
supplied Generator and echoed into a JSON-serializable record.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _sig

from .errors import ContractViolation


@dataclass
class AugmentConfig:
    coef_range: tuple[float, float] = (0.95, 0.99)
    pitch_steps_range: tuple[int, int] = (-5, 5)
    snr_db_range: tuple[float, float] = (-5.0, 15.0)
    eq_center_range: tuple[float, float] = (100.0, 7000.0)
    eq_q_range: tuple[float, float] = (1.0, 5.0)
    eq_peak_gain_db: float = 6.0
    max_freq_mask: int = 10
    max_cutout_freq: int = 10
    max_cutout_time: int = 10
    apply_prob: float = 0.5
    sample_rate: int = 16000
    noise_bank: list = field(default_factory=list)  # waveforms for mix_noise


def derive_rng(global_seed: int, *parts) -> np.random.Generator:
    """Stable per-worker/per-utterance generator from (seed, id parts)."""
    words = [int(global_seed) & 0xFFFFFFFF]
    words += [zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return np.random.default_rng(words)


# -- waveform ops -------------------------------------------------------------


def _check_coef(coef: float) -> None:
    if not (0.95 <= coef <= 0.99):
        raise ContractViolation(f"emphasis coef {coef} outside [0.95, 0.99]")


def pre_emphasize(wave: np.ndarray, coef: float) -> np.ndarray:
    """y[0] = x[0]; y[n] = x[n] - coef*x[n-1]."""
    _check_coef(coef)
    y = _sig.lfilter([1.0, -coef], [1.0], np.asarray(wave, dtype=np.float64))
    return y.astype(np.float32)


def de_emphasize(wave: np.ndarray, coef: float) -> np.ndarray:
    """Inverse of pre_emphasize: y[n] = x[n] + coef*y[n-1]."""
    _check_coef(coef)
    y = _sig.lfilter([1.0], [1.0, -coef], np.asarray(wave, dtype=np.float64))
    return y.astype(np.float32)


def _stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    pad = n_fft // 2
    xp = np.pad(x.astype(np.float64), pad, mode="reflect")
    n_frames = 1 + (len(xp) - n_fft) // hop
    starts = np.arange(n_frames) * hop
    frames = xp[starts[:, None] + np.arange(n_fft)[None, :]]
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    return np.fft.rfft(frames * win, axis=1).T  # [bins, frames]


def _istft(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    w2 = win * win
    for i in range(n_frames):
        y[i * hop: i * hop + n_fft] += frames[i]
        wsum[i * hop: i * hop + n_fft] += w2
    y /= np.maximum(wsum, 1e-9)
    pad = n_fft // 2
    return y[pad: total - pad]


def _phase_vocoder(spec: np.ndarray, rate: float, hop: int, n_fft: int) -> np.ndarray:
    """Stretch a [bins, frames] STFT in time by 1/rate, keeping pitch."""
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    advance = np.linspace(0, np.pi * hop, n_bins)  # expected phase per hop
    padded = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    out = np.zeros((n_bins, len(steps)), dtype=np.complex128)
    phase = np.angle(spec[:, 0])
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        c0, c1 = padded[:, i], padded[:, i + 1]
        mag = (1.0 - frac) * np.abs(c0) + frac * np.abs(c1)
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(c1) - np.angle(c0) - advance
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase += advance + dphi
    return out


def pitch_shift(wave: np.ndarray, n_steps: int, sample_rate: int = 16000,
                n_fft: int = 2048, hop: int = 512) -> np.ndarray:
    """Shift pitch by n_steps semitones via phase-vocoder stretch + resample.

    Length is preserved exactly; n_steps == 0 is the identity.
    """
    x = np.asarray(wave, dtype=np.float32)
    if n_steps == 0:
        return x.copy()
    rate = 2.0 ** (-float(n_steps) / 12.0)  # <1 stretches longer for upward shifts
    stretched = _istft(_phase_vocoder(_stft(x, n_fft, hop), rate, hop, n_fft), n_fft, hop)
    target = int(round(len(stretched) * rate))
    shifted = _sig.resample(stretched, target)
    out = np.zeros(len(x), dtype=np.float32)
    m = min(len(x), len(shifted))
    out[:m] = shifted[:m]
    return out


def eq_filter(wave: np.ndarray, mode: str, center_hz: float, q: float,
              gain_db: float = 6.0, sample_rate: int = 16000) -> np.ndarray:
    """RBJ biquad: 'notch' suppresses, 'peak' boosts (+gain_db) around center_hz."""
    nyquist = sample_rate / 2.0
    if not (0.0 < center_hz < nyquist):
        raise ContractViolation(f"eq_filter center {center_hz} Hz outside (0, {nyquist})")
    w0 = 2.0 * np.pi * center_hz / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    c = np.cos(w0)
    if mode == "notch":
        b = np.array([1.0, -2.0 * c, 1.0])
        a = np.array([1.0 + alpha, -2.0 * c, 1.0 - alpha])
    elif mode == "peak":
        A = 10.0 ** (gain_db / 40.0)
        b = np.array([1.0 + alpha * A, -2.0 * c, 1.0 - alpha * A])
        a = np.array([1.0 + alpha / A, -2.0 * c, 1.0 - alpha / A])
    else:
        raise ContractViolation(f"eq_filter mode must be 'notch' or 'peak', got {mode!r}")
    y = _sig.lfilter(b / a[0], a / a[0], np.asarray(wave, dtype=np.float64))
    return y.astype(np.float32)


def mix_noise(wave: np.ndarray, noise: np.ndarray, snr_db: float,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Add a random noise crop scaled so 10*log10(P_wave/P_noise) == snr_db."""
    x = np.asarray(wave, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    if len(n) < len(x):
        raise ContractViolation(f"noise ({len(n)}) shorter than wave ({len(x)})")
    if len(n) > len(x):
        off = int(rng.integers(0, len(n) - len(x) + 1)) if rng is not None else 0
        n = n[off: off + len(x)]
    p_wave = float(np.mean(x * x))
    p_noise = float(np.mean(n * n))
    if p_noise == 0.0:
        return x.astype(np.float32)
    if p_wave == 0.0:
        # degenerate silent-signal path: return the noise at unit RMS, clipped
        out = n / np.sqrt(p_noise)
        return np.clip(out, -1.0, 1.0).astype(np.float32)
    gain = np.sqrt(p_wave / p_noise) * 10.0 ** (-snr_db / 20.0)
    return np.clip(x + gain * n, -1.0, 1.0).astype(np.float32)


# -- spectrogram masks ----------------------------------------------------------


@dataclass
class MaskSpec:
    kind: str                    # "freq" or "cutout"
    mel_start: int
    mel_len: int
    time_start: int = 0
    time_len: int = 0            # 0 means all frames (freq masks)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "mel_start": self.mel_start, "mel_len": self.mel_len,
                "time_start": self.time_start, "time_len": self.time_len}


def draw_mask(kind: str, spec_shape: tuple[int, int], rng: np.random.Generator,
              cfg: AugmentConfig | None = None) -> MaskSpec:
    cfg = cfg or AugmentConfig()
    frames, mels = spec_shape
    if kind == "freq":
        w = int(rng.integers(0, cfg.max_freq_mask + 1))
        start = int(rng.integers(0, mels - w + 1)) if w else 0
        return MaskSpec("freq", start, w)
    if kind == "cutout":
        wf = int(rng.integers(0, cfg.max_cutout_freq + 1))
        wt = int(rng.integers(0, cfg.max_cutout_time + 1))
        fs = int(rng.integers(0, mels - wf + 1)) if wf else 0
        ts = int(rng.integers(0, frames - wt + 1)) if wt else 0
        return MaskSpec("cutout", fs, wf, ts, wt)
    raise ContractViolation(f"mask kind must be 'freq' or 'cutout', got {kind!r}")


def apply_masks(spec: np.ndarray, plan: list[MaskSpec]) -> np.ndarray:
    """Zero the planned regions; untouched cells are bit-identical."""
    out = spec.copy()
    for m in plan:
        if m.kind == "freq":
            out[:, m.mel_start: m.mel_start + m.mel_len] = 0.0
        else:
            out[m.time_start: m.time_start + m.time_len,
                m.mel_start: m.mel_start + m.mel_len] = 0.0
    return out


def spec_mask(spec: np.ndarray, kind: str, rng: np.random.Generator,
              cfg: AugmentConfig | None = None) -> np.ndarray:
    return apply_masks(spec, [draw_mask(kind, spec.shape, rng, cfg)])


# -- full pipeline -----------------------------------------------------------------


@dataclass
class AugmentOutcome:
    wave: np.ndarray
    mask_plan: list[MaskSpec]
    record: dict

    def record_json(self) -> dict:
        return self.record


def augment_utterance(wave: np.ndarray, cfg: AugmentConfig,
                      rng: np.random.Generator) -> AugmentOutcome:
    """Apply each waveform op independently with cfg.apply_prob, plan the
    spectrogram masks, and return the full decision record."""
    x = np.asarray(wave, dtype=np.float32)
    ops: list[dict] = []

    def coin() -> bool:
        return bool(rng.random() < cfg.apply_prob)

    applied = coin()
    if applied:
        coef = float(rng.uniform(*cfg.coef_range))
        x = pre_emphasize(x, coef)
        ops.append({"op": "pre_emphasize", "applied": True, "coef": coef})
    else:
        ops.append({"op": "pre_emphasize", "applied": False})

    applied = coin()
    if applied:
        coef = float(rng.uniform(*cfg.coef_range))
        x = de_emphasize(x, coef)
        ops.append({"op": "de_emphasize", "applied": True, "coef": coef})
    else:
        ops.append({"op": "de_emphasize", "applied": False})

    applied = coin()
    if applied:
        lo, hi = cfg.pitch_steps_range
        steps = int(rng.integers(lo, hi + 1))
        x = pitch_shift(x, steps, cfg.sample_rate)
        ops.append({"op": "pitch_shift", "applied": True, "n_steps": steps})
    else:
        ops.append({"op": "pitch_shift", "applied": False})

    applied = coin()
    if applied:
        mode = "notch" if rng.random() < 0.5 else "peak"
        center = float(rng.uniform(*cfg.eq_center_range))
        q = float(rng.uniform(*cfg.eq_q_range))
        x = eq_filter(x, mode, center, q, cfg.eq_peak_gain_db, cfg.sample_rate)
        ops.append({"op": "eq_filter", "applied": True, "mode": mode,
                    "center_hz": center, "q": q})
    else:
        ops.append({"op": "eq_filter", "applied": False})

    if cfg.noise_bank:
        applied = coin()
        if applied:
            idx = int(rng.integers(0, len(cfg.noise_bank)))
            snr = float(rng.uniform(*cfg.snr_db_range))
            x = mix_noise(x, cfg.noise_bank[idx], snr, rng)
            ops.append({"op": "mix_noise", "applied": True, "noise_index": idx,
                        "snr_db": snr})
        else:
            ops.append({"op": "mix_noise", "applied": False})

    plan: list[MaskSpec] = []
    spec_shape = (100, 40)
    for kind in ("freq", "cutout"):
        if coin():
            plan.append(draw_mask(kind, spec_shape, rng, cfg))
    record = {"ops": ops, "masks": [m.as_dict() for m in plan]}
    return AugmentOutcome(wave=x, mask_plan=plan, record=record)
