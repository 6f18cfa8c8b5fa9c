"""MFCC extraction and the binary feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import get_window

from .audio_ingest import SAMPLE_RATE, AudioClip


class FeatureError(ValueError):
    pass


class InvalidBand(FeatureError):
    pass


class ConfigMismatch(FeatureError):
    pass


class CacheError(ValueError):
    pass


class BadMagic(CacheError):
    pass


class TruncatedFile(CacheError):
    pass


class DimensionMismatch(CacheError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    n_mfcc: int = 40
    frame_length: int = 2048
    hop_length: int = 512
    n_mels: int = 128
    n_fft: int | None = None
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10
    target_frames: int | str = "auto"
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_fft is None:
            object.__setattr__(self, "n_fft", self.frame_length)
        if self.hop_length > self.frame_length:
            raise FeatureError("hop_length must not exceed frame_length")
        if self.n_fft < self.frame_length:
            raise FeatureError("n_fft must be at least frame_length")
        if self.n_mfcc > self.n_mels:
            raise FeatureError("n_mfcc must not exceed n_mels")
        if self.fmax_hz > self.sample_rate_hz / 2:
            raise FeatureError("fmax_hz must not exceed the Nyquist frequency")
        if self.target_frames != "auto" and (not isinstance(self.target_frames, int)
                                             or self.target_frames < 1):
            raise FeatureError(f"target_frames must be 'auto' or a positive int, got {self.target_frames!r}")

    def n_frames(self, n_samples: int) -> int:
        if self.target_frames == "auto":
            return n_samples // self.hop_length + 1
        return self.target_frames


@dataclass
class FeatureMatrix:
    """MFCC matrix of shape ``(n_mfcc, frames)``; the MDP state for one utterance."""

    values: np.ndarray
    clip_ref: str = ""
    label_id: int | None = None

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: FeatureConfig) -> np.ndarray:
    """The ``n_mels + 2`` band edges in Hz, equally spaced in mel."""
    mels = np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_mels + 2)
    return mel_to_hz(mels)


def build_mel_filterbank(config: FeatureConfig, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters (peak 1, no area normalisation), shape ``(n_mels, n_fft//2 + 1)``."""
    if config.fmin_hz >= config.fmax_hz:
        raise InvalidBand(f"fmin {config.fmin_hz} Hz must be below fmax {config.fmax_hz} Hz")
    edges = mel_centers(config)
    bins = np.arange(config.n_fft // 2 + 1) * sample_rate_hz / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise InvalidBand(f"mel filters {empty.tolist()} cover no FFT bin; "
                          "use fewer mel bands or a larger n_fft")
    return fb


_FB_CACHE: dict = {}


def _filterbank(config: FeatureConfig) -> np.ndarray:
    key = (config.n_mels, config.n_fft, config.fmin_hz, config.fmax_hz, config.sample_rate_hz)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = build_mel_filterbank(config, config.sample_rate_hz)
    return _FB_CACHE[key]


def frame_signal(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Centered frames of length ``n_fft`` after reflection padding, shape ``(frames, n_fft)``."""
    pad = config.n_fft // 2
    y = np.pad(np.asarray(samples, dtype=np.float64), pad, mode="reflect")
    n = 1 + (len(y) - config.n_fft) // config.hop_length
    return np.lib.stride_tricks.sliding_window_view(y, config.n_fft)[::config.hop_length][:n]


def window(config: FeatureConfig) -> np.ndarray:
    """Periodic Hann of ``frame_length``, zero-padded to ``n_fft`` about its center."""
    w = get_window("hann", config.frame_length, fftbins=True)
    extra = config.n_fft - config.frame_length
    return np.pad(w, (extra // 2, extra - extra // 2))


def log_mel(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Natural-log mel power spectrogram, shape ``(n_mels, frames)``, before any frame padding."""
    frames = frame_signal(samples, config) * window(config)
    power = np.abs(rfft(frames, axis=1)) ** 2
    mel = _filterbank(config) @ power.T
    return np.log(np.maximum(mel, config.log_floor))


def compute_mfcc(clip: AudioClip, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise ConfigMismatch(f"{clip.source_path}: clip is {clip.sample_rate_hz} Hz, "
                             f"config expects {config.sample_rate_hz} Hz")
    lm = log_mel(clip.samples, config)
    coeffs = dct(lm, type=2, norm="ortho", axis=0)[:config.n_mfcc]
    if config.target_frames != "auto":
        f = config.target_frames
        out = np.zeros((config.n_mfcc, f))
        m = min(f, coeffs.shape[1])
        out[:, :m] = coeffs[:, :m]
        coeffs = out
    return FeatureMatrix(coeffs, clip.source_path, clip.label_id)


# Cache layout (little-endian): b"MFCC", u16 version, u16 n, u16 f, u32 count,
# then per record: u16 label, u16 path length, path bytes, n*f float32 row-major.
_MAGIC = b"MFCC"
_VERSION = 1
_HEADER = struct.Struct("<4sHHHI")
_RECORD = struct.Struct("<HH")
NO_LABEL = 0xFFFF


def cache_write(matrices: list[FeatureMatrix], path: str | Path) -> None:
    """Write matrices as float32. Values that are not float32-representable are rounded."""
    if matrices:
        n, f = matrices[0].values.shape
        for m in matrices:
            if m.values.shape != (n, f):
                raise DimensionMismatch(f"matrix {m.clip_ref!r} has shape {m.values.shape}, "
                                        f"expected {(n, f)}")
    else:
        n = f = 0
    chunks = [_HEADER.pack(_MAGIC, _VERSION, n, f, len(matrices))]
    for m in matrices:
        raw = m.clip_ref.encode()
        label = NO_LABEL if m.label_id is None else m.label_id
        chunks.append(_RECORD.pack(label, len(raw)) + raw)
        chunks.append(np.ascontiguousarray(m.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def cache_read(path: str | Path) -> list[FeatureMatrix]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise BadMagic(f"{path}: not a feature cache")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header cut short")
    _, version, n, f, count = _HEADER.unpack_from(data)
    if version != _VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    pos = _HEADER.size
    out = []
    for i in range(count):
        if pos + _RECORD.size > len(data):
            raise TruncatedFile(f"{path}: record {i} header cut short")
        label, plen = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        end = pos + plen + 4 * n * f
        if end > len(data):
            raise TruncatedFile(f"{path}: record {i} cut short")
        ref = data[pos:pos + plen].decode()
        pos += plen
        values = np.frombuffer(data, dtype="<f4", count=n * f, offset=pos).reshape(n, f).astype(np.float32)
        pos = end
        out.append(FeatureMatrix(values, ref, None if label == NO_LABEL else label))
    if pos != len(data):
        raise DimensionMismatch(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out
