"""Audio loading, fixed-length windowing, MFCC extraction and test-time chunking.

Feature matrices are plain ``numpy`` arrays of shape ``(n_mfcc, n_frames)``.
Frames are taken without centre padding, so a window of ``N`` samples yields
``1 + (N - frame) // hop`` columns.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window, resample_poly

from .errors import AudioError, AudioFormatError, ConfigError, ContractError, DSPError


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DSPError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise DSPError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DSPError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """MFCC front-end settings. Times are in seconds."""

    sample_rate: int = 16000
    n_mfcc: int = 40
    n_mels: int = 64
    frame_length: float = 0.025
    hop_length: float = 0.010
    window_seconds: float = 6.0
    fmin: float = 20.0
    fmax: float = 8000.0
    window: str = "hann"
    # "remainder": pad the last chunk by tiling the remainder itself;
    # "wrap": continue the last chunk from the start of the recording.
    remainder_padding: str = "remainder"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not 0 < self.n_mfcc <= self.n_mels:
            raise ConfigError(f"need 0 < n_mfcc <= n_mels, got {self.n_mfcc}, {self.n_mels}")
        if not self.frame_length >= self.hop_length > 0:
            raise ConfigError("need frame_length >= hop_length > 0")
        if self.window_seconds <= 0:
            raise ConfigError("window_seconds must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.remainder_padding not in ("remainder", "wrap"):
            raise ConfigError(f"unknown remainder_padding {self.remainder_padding!r}")
        if self.window_samples < self.frame_samples:
            raise ConfigError("window_seconds shorter than one frame")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length * self.sample_rate))

    @property
    def window_samples(self) -> int:
        return int(round(self.window_seconds * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.frame_samples - 1).bit_length()

    def n_frames(self, n_samples: int | None = None) -> int:
        if n_samples is None:
            n_samples = self.window_samples
        if n_samples < self.frame_samples:
            return 0
        return 1 + (n_samples - self.frame_samples) // self.hop_samples

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return config_digest(self.to_dict())


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- audio I/O ---------------------------------------------------------------

_PCM_DTYPES = {1: np.uint8, 2: np.dtype("<i2"), 4: np.dtype("<i4")}


def read_wav(path) -> Waveform:
    """Read an integer PCM WAV file without resampling; channels are averaged."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except FileNotFoundError as exc:
        raise AudioError(f"cannot open {path}: {exc}") from exc
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: unsupported or corrupt WAV ({exc})") from exc
    except (EOFError, struct.error, OSError) as exc:
        raise AudioError(f"{path}: unreadable WAV ({exc})") from exc

    if width not in _PCM_DTYPES:
        raise AudioFormatError(f"{path}: unsupported sample width {8 * width} bits")
    data = np.frombuffer(raw, dtype=_PCM_DTYPES[width])
    if data.size == 0:
        raise AudioError(f"{path}: no audio frames")
    data = data[: data.size - data.size % n_channels].reshape(-1, n_channels)
    if width == 1:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64) / float(2 ** (8 * width - 1))
    return Waveform(x.mean(axis=1), rate)


def write_wav(path, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV. Output bytes depend only on the samples."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def resample(w: Waveform, target_rate: int) -> Waveform:
    if w.sample_rate == target_rate:
        return w
    g = gcd(int(w.sample_rate), int(target_rate))
    up, down = target_rate // g, w.sample_rate // g
    y = resample_poly(w.samples, up, down)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    y = y[:n_out]
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return Waveform(np.clip(y, -1.0, 1.0), target_rate)


def load_audio(path, target_rate: int = 16000) -> Waveform:
    """Load a PCM WAV as a mono waveform in [-1, 1] at ``target_rate``."""
    return resample(read_wav(path), target_rate)


# -- windowing ---------------------------------------------------------------

def pad_by_repetition(w: Waveform, target_samples: int) -> Waveform:
    """Tile ``w`` until it is ``target_samples`` long: ``out[i] = w[i % len(w)]``."""
    n = len(w)
    if n == 0:
        raise ContractError("cannot pad an empty waveform")
    if target_samples <= n:
        raise ContractError(
            f"pad_by_repetition needs target ({target_samples}) > length ({n})"
        )
    idx = np.arange(target_samples) % n
    return Waveform(w.samples[idx], w.sample_rate)


def sample_window(w: Waveform, cfg: FeatureConfig, rng: np.random.Generator) -> Waveform:
    """Draw a random ``window_seconds`` excerpt, repetition-padding short input."""
    target = cfg.window_samples
    n = len(w)
    if n == 0:
        raise ContractError("cannot window an empty waveform")
    if n < target:
        return pad_by_repetition(w, target)
    start = int(rng.integers(0, n - target + 1))
    return Waveform(w.samples[start : start + target], w.sample_rate)


def chunk_recording(w: Waveform, cfg: FeatureConfig) -> list[Waveform]:
    """Split into consecutive ``window_seconds`` clips; the last one is padded."""
    target = cfg.window_samples
    n = len(w)
    if n == 0:
        raise ContractError("cannot chunk an empty waveform")
    k = -(-n // target)
    chunks = [
        Waveform(w.samples[i * target : (i + 1) * target], w.sample_rate)
        for i in range(n // target)
    ]
    if len(chunks) < k:
        start = (k - 1) * target
        if cfg.remainder_padding == "wrap":
            idx = (start + np.arange(target)) % n
            chunks.append(Waveform(w.samples[idx], w.sample_rate))
        else:
            tail = Waveform(w.samples[start:], w.sample_rate)
            chunks.append(pad_by_repetition(tail, target))
    return chunks


def chunk_valid_lengths(n_samples: int, cfg: FeatureConfig) -> list[int]:
    """Number of original (unpadded) samples in each chunk of a recording."""
    target = cfg.window_samples
    k = -(-n_samples // target)
    return [min(target, n_samples - i * target) for i in range(k)]


# -- MFCC --------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


@lru_cache(maxsize=16)
def _analysis_tables(cfg: FeatureConfig):
    window = get_window(cfg.window, cfg.frame_samples, fftbins=True)
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return window, fb


_LOG_FLOOR = 1e-10


def log_mel(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    if w.sample_rate != cfg.sample_rate:
        raise DSPError(f"waveform rate {w.sample_rate} != feature rate {cfg.sample_rate}")
    L, H = cfg.frame_samples, cfg.hop_samples
    if len(w) < L:
        raise DSPError(f"waveform of {len(w)} samples is shorter than one frame ({L})")
    window, fb = _analysis_tables(cfg)
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, L)[::H]
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)) ** 2
    return np.log(np.maximum(power @ fb.T, _LOG_FLOOR)).T


def mfcc(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """MFCC matrix of shape ``(n_mfcc, n_frames)``: log-mel energies then orthonormal DCT-II."""
    return dct(log_mel(w, cfg), type=2, axis=0, norm="ortho")[: cfg.n_mfcc]


# -- standardisation -----------------------------------------------------------

@dataclass
class Standardizer:
    """Per-(modality, coefficient) mean and standard deviation fitted on training features."""

    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, stacks, eps: float = 1e-8) -> "Standardizer":
        """``stacks`` is an iterable of arrays shaped ``(n_modalities, n_mfcc, n_frames)``."""
        total = total_sq = None
        count = 0
        for s in stacks:
            s = np.asarray(s, dtype=np.float64)
            part, part_sq = s.sum(axis=2), (s * s).sum(axis=2)
            total = part if total is None else total + part
            total_sq = part_sq if total_sq is None else total_sq + part_sq
            count += s.shape[2]
        if not count:
            raise ContractError("cannot fit a standardizer on no data")
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        return cls(mean=mean, std=np.sqrt(var) + eps)

    def apply(self, stack: np.ndarray, present=None) -> np.ndarray:
        """Standardize a ``(M, C, T)`` stack. Absent (zero-filled) planes stay zero."""
        out = (stack - self.mean[:, :, None]) / self.std[:, :, None]
        if present is not None:
            out[~np.asarray(present, dtype=bool)] = 0.0
        return out

    def apply_plane(self, plane: np.ndarray, modality_index: int) -> np.ndarray:
        return (plane - self.mean[modality_index, :, None]) / self.std[modality_index, :, None]


# -- feature dump ---------------------------------------------------------------

FEATURE_MAGIC = b"CIDRFEAT"


def save_feature_matrix(path, values: np.ndarray, cfg: FeatureConfig) -> None:
    """Dense dump: magic, uint32 header length, JSON header, little-endian float32 data."""
    values = np.ascontiguousarray(values, dtype="<f4")
    header = json.dumps(
        {"shape": list(values.shape), "dtype": "<f4", "config_hash": cfg.config_hash(),
         "config": cfg.to_dict()},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(values.tobytes())


def load_feature_matrix(path):
    """Inverse of :func:`save_feature_matrix`; returns ``(values, header)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise AudioFormatError(f"{path}: not a feature dump")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + n])
    values = np.frombuffer(blob[12 + n :], dtype=header["dtype"]).reshape(header["shape"])
    if FeatureConfig(**header["config"]).config_hash() != header["config_hash"]:
        raise AudioFormatError(f"{path}: config hash mismatch")
    return values, header
