"""Audio containers, WAV I/O, resampling and the STFT/ISTFT pair.

The STFT reflect-pads ``fft_size // 2`` samples on both sides, zero-pads the
right edge up to a whole number of hops, frames with a periodic Hann window
and takes a real FFT.  The inverse divides the windowed overlap-add by the
summed squared window, so the round trip is exact wherever that sum is
non-zero (hop 600 / fft 1024 is not a constant-overlap-add pair for Hann).

Array-level functions accept arbitrary leading batch axes.  The ``*_tensor``
variants wrap the same transforms as linear maps in the autodiff engine,
with hand-written adjoints.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .diffengine import Tensor, linear_map

DEFAULT_SAMPLE_RATE = 24000


class WavFormatError(ValueError):
    """Malformed or unsupported WAV file."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 600
    window: str = "hann"
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size % 2:
            raise ValueError(f"fft_size must be a positive even number, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must satisfy 0 < hop <= fft_size, got {self.hop}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window '{self.window}'")
        if self.pad_mode not in ("reflect", "constant"):
            raise ValueError(f"unknown pad_mode '{self.pad_mode}'")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + -(-length // self.hop)

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.fft_size)


@lru_cache(maxsize=32)
def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rect":
        w = np.ones(n)
    else:
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


@dataclass
class ComplexSpec:
    re: np.ndarray
    im: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    origin_len: int = 0

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(f"re/im shape mismatch {self.re.shape} vs {self.im.shape}")
        T, F = self.re.shape[-2:]
        if F != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {F}")
        if T != self.config.n_frames(self.origin_len):
            raise ValueError(f"{T} frames inconsistent with origin_len={self.origin_len}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape[-2:]

    def as_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def stacked(self) -> np.ndarray:
        """(..., T, F, 2) real array with re/im on the last axis."""
        return np.stack([self.re, self.im], axis=-1)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, config: StftConfig, origin_len: int) -> "ComplexSpec":
        return cls(np.asarray(arr[..., 0]), np.asarray(arr[..., 1]), config, origin_len)


# ----------------------------------------------------------------------
# padding and framing
# ----------------------------------------------------------------------

def _layout(length: int, cfg: StftConfig) -> tuple[int, int, int]:
    """(frames, left pad, total padded length)."""
    T = cfg.n_frames(length)
    half = cfg.fft_size // 2
    total = cfg.fft_size + cfg.hop * (T - 1)
    return T, half, total


def _pad_forward(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    length = x.shape[-1]
    T, half, total = _layout(length, cfg)
    if cfg.pad_mode == "reflect" and length <= half:
        raise ValueError(f"reflect padding needs more than {half} samples, got {length}")
    mode = "reflect" if cfg.pad_mode == "reflect" else "constant"
    lead = [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x, lead + [(half, half)], mode=mode)
    extra = total - xp.shape[-1]
    if extra > 0:
        xp = np.pad(xp, lead + [(0, extra)])
    return xp[..., :total]


def _pad_adjoint(gp: np.ndarray, length: int, cfg: StftConfig) -> np.ndarray:
    """Adjoint of :func:`_pad_forward`: fold padded gradients back onto the signal."""
    half = cfg.fft_size // 2
    g = gp[..., half : half + length].copy()
    right = gp[..., half + length : min(gp.shape[-1], half + length + half)]
    if cfg.pad_mode == "reflect":
        # left pad sample p copies x[half - p]; right pad sample r copies x[length - 2 - r]
        g[..., half - np.arange(half)] += gp[..., :half]
        g[..., length - 2 - np.arange(right.shape[-1])] += right
    return g


def _frame_index(T: int, cfg: StftConfig) -> np.ndarray:
    return np.arange(T)[:, None] * cfg.hop + np.arange(cfg.fft_size)[None, :]


def _overlap_add(frames: np.ndarray, cfg: StftConfig, total: int) -> np.ndarray:
    T = frames.shape[-2]
    out = np.zeros(frames.shape[:-2] + (total,), dtype=frames.dtype)
    n, hop = cfg.fft_size, cfg.hop
    for t in range(T):
        out[..., t * hop : t * hop + n] += frames[..., t, :]
    return out


@lru_cache(maxsize=32)
def _wsum_sq(cfg: StftConfig, T: int) -> np.ndarray:
    total = cfg.fft_size + cfg.hop * (T - 1)
    w = cfg.window_array()
    frames = np.broadcast_to(w * w, (T, cfg.fft_size))
    s = _overlap_add(frames, cfg, total)
    s.setflags(write=False)
    return s


def window_power_sum(cfg: StftConfig, length: int) -> np.ndarray:
    """Summed squared window over every padded sample position (length ``total``)."""
    return _wsum_sq(cfg, cfg.n_frames(length))


def _rfft_adjoint(G: np.ndarray, n: int) -> np.ndarray:
    scaled = G.copy()
    scaled[..., 1 : n // 2] *= 0.5
    return np.fft.irfft(scaled, n=n) * n


def _irfft_adjoint(g: np.ndarray, n: int) -> np.ndarray:
    Z = np.fft.rfft(g, n=n) / n
    Z[..., 1 : n // 2] *= 2.0
    return Z


# ----------------------------------------------------------------------
# array-level transforms
# ----------------------------------------------------------------------

def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex spectrogram (..., T, F) of real signals (..., L)."""
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("cannot transform an empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    T, _, _ = _layout(x.shape[-1], cfg)
    xp = _pad_forward(x, cfg)
    frames = xp[..., _frame_index(T, cfg)] * cfg.window_array()
    return np.fft.rfft(frames, axis=-1)


def stft_adjoint(G: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Adjoint of :func:`stft_array` with respect to the real inner product on (re, im)."""
    T, _, total = _layout(length, cfg)
    frames = _rfft_adjoint(G, cfg.fft_size) * cfg.window_array()
    return _pad_adjoint(_overlap_add(frames, cfg, total), length, cfg)


def istft_array(Z: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Real signals (..., length) from complex spectrograms (..., T, F)."""
    T, half, total = _layout(length, cfg)
    if Z.shape[-2] != T or Z.shape[-1] != cfg.n_bins:
        raise ValueError(f"spectrogram shape {Z.shape[-2:]} does not match ({T}, {cfg.n_bins}) for length {length}")
    denom = _wsum_sq(cfg, T)[half : half + length]
    if np.any(denom <= 1e-12):
        raise ValueError("window/hop pair leaves output samples with zero normalisation")
    frames = np.fft.irfft(Z, n=cfg.fft_size, axis=-1) * cfg.window_array()
    y = _overlap_add(frames, cfg, total)[..., half : half + length]
    return y / denom


def istft_adjoint(g: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    T, half, total = _layout(length, cfg)
    denom = _wsum_sq(cfg, T)[half : half + length]
    gp = np.zeros(g.shape[:-1] + (total,), dtype=np.float64)
    gp[..., half : half + length] = g / denom
    frames = gp[..., _frame_index(T, cfg)] * cfg.window_array()
    return _irfft_adjoint(frames, cfg.fft_size)


# ----------------------------------------------------------------------
# clip-level API
# ----------------------------------------------------------------------

def stft(clip: AudioClip | np.ndarray, cfg: StftConfig | None = None) -> ComplexSpec:
    cfg = cfg or StftConfig()
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    Z = stft_array(x, cfg)
    return ComplexSpec(Z.real.copy(), Z.imag.copy(), cfg, x.shape[-1])


def istft(spec: ComplexSpec, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    y = istft_array(spec.as_complex(), spec.config, spec.origin_len)
    return AudioClip(y, sample_rate)


# ----------------------------------------------------------------------
# differentiable versions
# ----------------------------------------------------------------------

def stft_tensor(x: Tensor, cfg: StftConfig) -> Tensor:
    """STFT of (..., L) signals as a (..., T, F, 2) tensor (re, im last)."""
    length = x.shape[-1]

    def fwd(a):
        Z = stft_array(a.astype(np.float64), cfg)
        return np.stack([Z.real, Z.imag], axis=-1)

    def adj(g):
        return stft_adjoint(g[..., 0] + 1j * g[..., 1], cfg, length)

    return linear_map(x, fwd, adj, name="stft")


def istft_tensor(spec: Tensor, cfg: StftConfig, length: int) -> Tensor:
    """Inverse of :func:`stft_tensor`; (..., T, F, 2) -> (..., length)."""

    def fwd(a):
        a = a.astype(np.float64)
        return istft_array(a[..., 0] + 1j * a[..., 1], cfg, length)

    def adj(g):
        Z = istft_adjoint(g.astype(np.float64), cfg, length)
        return np.stack([Z.real, Z.imag], axis=-1)

    return linear_map(spec, fwd, adj, name="istft")


# ----------------------------------------------------------------------
# WAV I/O
# ----------------------------------------------------------------------

def read_wav(path: str | Path, target_rate: int | None = None) -> AudioClip:
    """Read 16- or 24-bit PCM; stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated RIFF header") from exc
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        data = v.astype(np.float64) / float(1 << 23)
    else:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits")
    if channels > 1:
        data = data[: len(data) - len(data) % channels].reshape(-1, channels).mean(axis=1)
    clip = AudioClip(data, rate)
    if target_rate is not None and target_rate != rate:
        clip = resample(clip, target_rate)
    return clip


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path: str | Path) -> None:
    """16-bit little-endian mono PCM; samples are clamped to [-1, 1) on export."""
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(to_pcm16(clip.samples).tobytes())


# ----------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------

def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Truncate or zero-pad the last axis to ``n`` samples."""
    cur = x.shape[-1]
    if cur == n:
        return x
    if cur > n:
        return x[..., :n]
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, n - cur)])


def resample_array(x: np.ndarray, source_rate: float, target_rate: float) -> np.ndarray:
    """Kaiser-windowed polyphase resampling; output length round(L * target / source)."""
    if target_rate <= 0 or source_rate <= 0:
        raise ValueError("sample rates must be positive")
    n_out = int(round(x.shape[-1] * target_rate / source_rate))
    if source_rate == target_rate:
        return np.array(x, dtype=np.float64, copy=True)
    ratio = Fraction(target_rate / source_rate).limit_denominator(1000) if not (
        float(source_rate).is_integer() and float(target_rate).is_integer()
    ) else Fraction(int(target_rate), int(source_rate))
    y = resample_poly(np.asarray(x, dtype=np.float64), ratio.numerator, ratio.denominator, axis=-1)
    return fit_length(y, n_out)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    return AudioClip(resample_array(clip.samples, clip.sample_rate, target_rate), target_rate)
