"""Training-time augmentation: pitch shift, then masking and Gaussian noise on MFCCs."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dsp import FeatureConfig, Standardizer, Waveform, mfcc, sample_window
from .errors import ConfigError, ParameterError


@dataclass(frozen=True)
class AugmentConfig:
    pitch_semitone_range: tuple[float, float] = (-2.0, 2.0)
    n_time_masks: int = 2
    n_coef_masks: int = 2
    max_time_mask_frac: float = 0.10
    max_coef_mask_frac: float = 0.20
    noise_sigma_max: float = 0.05
    enabled: bool = True

    def __post_init__(self):
        low, high = self.pitch_semitone_range
        object.__setattr__(self, "pitch_semitone_range", (float(low), float(high)))
        if low > high:
            raise ConfigError("pitch_semitone_range must satisfy low <= high")
        if max(abs(low), abs(high)) > 12:
            raise ConfigError("pitch shifts are limited to one octave")
        if self.n_time_masks < 0 or self.n_coef_masks < 0:
            raise ConfigError("mask counts must be >= 0")
        for frac in (self.max_time_mask_frac, self.max_coef_mask_frac):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError("mask fractions must lie in [0, 1]")
        if self.noise_sigma_max < 0:
            raise ConfigError("noise_sigma_max must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pitch_semitone_range"] = list(self.pitch_semitone_range)
        return d


def derive_seed(global_seed: int, instance_id: str, epoch: int = 0) -> int:
    """Stable 64-bit seed for one (run, instance, epoch) triple."""
    digest = hashlib.sha256(f"{global_seed}|{instance_id}|{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def instance_rng(global_seed: int, instance_id: str, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, instance_id, epoch))


# -- pitch shift ---------------------------------------------------------------

def _stft(x, n_fft, hop, window):
    pad = n_fft // 2
    x = np.pad(x, pad, mode="reflect" if x.size > pad else "constant")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * window, axis=1).T


def _istft(spec, n_fft, hop, window, length):
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    n_frames = frames.shape[0]
    n = n_fft + hop * (n_frames - 1)
    idx = (np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]).ravel()
    out = np.bincount(idx, weights=frames.ravel(), minlength=n)
    norm = np.bincount(idx, weights=np.tile(window**2, n_frames), minlength=n)
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = n_fft // 2
    out = out[pad : pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def _phase_vocoder(spec, rate, hop, n_fft):
    """Resample STFT frames at ``rate`` with phase-locked advance.

    The wrapped phase advance between frames is applied as a product of unit
    phasors, ``right/|right| * conj(left/|left|)``, so no trig is evaluated.
    """
    steps = np.arange(0, spec.shape[1], rate)
    spec = np.pad(spec.astype(np.complex64), ((0, 0), (0, 2)))
    mag_in = np.abs(spec)
    unit = spec / np.maximum(mag_in, np.float32(1e-30))
    unit[mag_in == 0] = 1.0
    i = steps.astype(int)
    frac = steps - i
    mag = (1 - frac) * mag_in[:, i] + frac * mag_in[:, i + 1]
    advance = unit[:, i + 1] * np.conj(unit[:, i])
    phasor = np.empty_like(advance)
    phasor[:, 0] = unit[:, 0]
    phasor[:, 1:] = unit[:, :1] * np.cumprod(advance[:, :-1], axis=1)
    phasor /= np.abs(phasor)
    return (mag * phasor).astype(np.complex128)


def pitch_shift(w: Waveform, semitones: float, n_fft: int = 1024, hop: int = 256) -> Waveform:
    """Shift pitch by ``semitones`` keeping duration: phase-vocoder stretch, then resample."""
    if not -12.0 <= semitones <= 12.0:
        raise ParameterError(f"semitones must lie in [-12, 12], got {semitones}")
    n = len(w)
    if semitones == 0 or n < 2:
        return Waveform(w.samples.copy(), w.sample_rate)
    factor = 2.0 ** (semitones / 12.0)
    window = np.hanning(n_fft + 1)[:-1]
    spec = _stft(w.samples, n_fft, hop, window)
    stretched_len = int(round(n * factor))
    stretched = _istft(_phase_vocoder(spec, 1.0 / factor, hop, n_fft), n_fft, hop, window, stretched_len)
    # linear-interpolation resampling back to the input length
    y = np.interp(np.linspace(0.0, stretched_len - 1, n), np.arange(stretched_len), stretched)
    return Waveform(np.clip(y, -1.0, 1.0), w.sample_rate)


# -- feature-domain augmentation ---------------------------------------------------

def mask_features(f: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Replace random frame and coefficient bands with the matrix mean."""
    out = np.array(f, dtype=np.float64, copy=True)
    if cfg.n_time_masks == 0 and cfg.n_coef_masks == 0:
        return out
    fill = out.mean()
    n_coef, n_time = out.shape
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, int(cfg.max_time_mask_frac * n_time) + 1))
        start = int(rng.integers(0, n_time - width + 1))
        out[:, start : start + width] = fill
    for _ in range(cfg.n_coef_masks):
        width = int(rng.integers(0, int(cfg.max_coef_mask_frac * n_coef) + 1))
        start = int(rng.integers(0, n_coef - width + 1))
        out[start : start + width, :] = fill
    return out


def add_gaussian_noise(f: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. noise whose std is ``sigma`` times the std of ``f``."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    f = np.asarray(f, dtype=np.float64)
    if sigma == 0:
        return f.copy()
    return f + rng.normal(0.0, sigma * f.std(), size=f.shape)


def augment_instance(
    waveforms: Sequence[Waveform | None],
    feature_cfg: FeatureConfig,
    augment_cfg: AugmentConfig,
    rng: np.random.Generator,
    standardizer: Standardizer | None = None,
) -> np.ndarray:
    """Build one training ``(n_modalities, n_mfcc, n_frames)`` stack.

    Per modality: window, pitch shift, MFCC, standardize, mask, noise. The
    semitone and noise-level draws are shared across modalities. ``None``
    entries are absent modalities and become all-zero planes.
    """
    if augment_cfg.enabled:
        semitones = float(rng.uniform(*augment_cfg.pitch_semitone_range))
        sigma = float(rng.uniform(0.0, augment_cfg.noise_sigma_max))
    planes = []
    shape = (feature_cfg.n_mfcc, feature_cfg.n_frames())
    for m, w in enumerate(waveforms):
        if w is None:
            planes.append(np.zeros(shape))
            continue
        clip = sample_window(w, feature_cfg, rng)
        if augment_cfg.enabled:
            clip = pitch_shift(clip, semitones)
        plane = mfcc(clip, feature_cfg)
        if standardizer is not None:
            plane = standardizer.apply_plane(plane, m)
        if augment_cfg.enabled:
            plane = mask_features(plane, augment_cfg, rng)
            plane = add_gaussian_noise(plane, sigma, rng)
        planes.append(plane)
    return np.stack(planes)
