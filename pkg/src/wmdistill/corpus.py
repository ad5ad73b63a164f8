"""Training clips: a synthetic speech-like generator and a WAV directory slicer."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import signal

from .dsp import DEFAULT_SAMPLE_RATE, AudioClip, WavFormatError, read_wav


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSpec:
    source: str = "synthetic"
    clip_seconds: float = 1.0
    n_clips: int = 256
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    wav_dir: str | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE
    f0_range: tuple[float, float] = (80.0, 400.0)
    syllables_per_second: tuple[float, float] = (2.0, 5.0)
    silence_prob: float = 0.25
    fft_size: int = 1024

    def __post_init__(self):
        self.splits = tuple(float(s) for s in self.splits)
        if self.source not in ("synthetic", "wav_dir"):
            raise CorpusError(f"unknown corpus source '{self.source}'")
        if self.source == "wav_dir" and not self.wav_dir:
            raise CorpusError("wav_dir source needs a directory")
        if any(s < 0 for s in self.splits) or abs(sum(self.splits) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions must be non-negative and sum to 1, got {self.splits}")
        if self.clip_seconds * self.sample_rate < self.fft_size:
            raise CorpusError(f"clips of {self.clip_seconds}s are shorter than one {self.fft_size}-sample frame")
        if self.n_clips < 1:
            raise CorpusError("n_clips must be >= 1")

    @property
    def clip_len(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))


def _syllable(rng: np.random.Generator, n: int, sr: int, f0_range) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(*f0_range)
    glide = f0 * rng.uniform(-0.25, 0.25)
    inst = f0 + glide * t / max(t[-1], 1e-9) + 3.0 * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
    phase = 2 * np.pi * np.cumsum(inst) / sr
    formants = [rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 3500)]
    widths = [rng.uniform(60, 150), rng.uniform(90, 200), rng.uniform(150, 300)]
    out = np.zeros(n)
    for h in range(1, int(4000 / f0) + 1):
        fh = h * f0
        gain = sum(np.exp(-0.5 * ((fh - fc) / bw) ** 2) for fc, bw in zip(formants, widths))
        out += (0.15 + gain) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out


def _fricative(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    lo = rng.uniform(2000, 3500)
    hi = min(lo + rng.uniform(1000, 3000), 0.45 * sr)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n)) * 0.3


def _envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    attack = max(1, int(n * rng.uniform(0.05, 0.25)))
    release = max(1, int(n * rng.uniform(0.1, 0.35)))
    env = np.ones(n)
    env[:attack] = np.linspace(0, 1, attack)
    env[n - release:] = np.minimum(env[n - release:], np.linspace(1, 0, release))
    return env


def synthetic_clip(rng: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    """Voiced syllables, fricative bursts and silence gaps, peak-normalised."""
    sr, n = spec.sample_rate, spec.clip_len
    out = np.zeros(n)
    pos = 0
    rate = rng.uniform(*spec.syllables_per_second)
    while pos < n:
        seg = int(sr / rate * rng.uniform(0.6, 1.4))
        seg = min(seg, n - pos)
        if seg < 32:
            break
        if rng.random() >= spec.silence_prob:
            voiced = _syllable(rng, seg, sr, spec.f0_range)
            if rng.random() < 0.3:
                burst = min(seg, int(seg * rng.uniform(0.2, 0.5)))
                voiced[:burst] += _fricative(rng, burst, sr) * voiced.std()
            out[pos:pos + seg] = voiced * _envelope(seg, rng) * rng.uniform(0.4, 1.0)
        pos += seg
    out += 1e-3 * rng.standard_normal(n)
    peak = np.max(np.abs(out))
    return out * (rng.uniform(0.3, 0.9) / peak)


def _wav_clips(spec: CorpusSpec) -> Iterator[np.ndarray]:
    root = Path(spec.wav_dir)
    if not root.is_dir():
        raise CorpusError(f"wav_dir '{root}' is not a directory")
    files = sorted(root.rglob("*.wav"))
    if not files:
        raise CorpusError(f"no .wav files under '{root}'")
    n = spec.clip_len
    for f in files:
        try:
            audio = read_wav(f, target_rate=spec.sample_rate).samples
        except (WavFormatError, OSError, EOFError) as exc:
            raise CorpusError(f"cannot read '{f}': {exc}") from exc
        for start in range(0, len(audio) - n + 1, n):
            yield audio[start:start + n]


def generate_corpus(spec: CorpusSpec, seed: int = 0) -> Iterator[AudioClip]:
    """Yield up to ``spec.n_clips`` clips of exactly ``spec.clip_len`` samples, in a seed-determined order."""
    if spec.source == "synthetic":
        rng = np.random.default_rng(seed)
        for _ in range(spec.n_clips):
            yield AudioClip(synthetic_clip(rng, spec), spec.sample_rate)
        return
    count = 0
    for samples in _wav_clips(spec):
        if count >= spec.n_clips:
            return
        yield AudioClip(samples.astype(np.float64), spec.sample_rate)
        count += 1
    if count == 0:
        raise CorpusError(f"no file in '{spec.wav_dir}' is at least {spec.clip_seconds}s long")


def load_splits(spec: CorpusSpec, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Materialise the corpus as (train, val, test) arrays of shape (N_i, clip_len)."""
    clips = np.stack([c.samples for c in generate_corpus(spec, seed)])
    order = np.random.default_rng(seed + 1).permutation(len(clips))
    clips = clips[order]
    n = len(clips)
    n_train = int(round(spec.splits[0] * n))
    n_val = int(round(spec.splits[1] * n))
    return clips[:n_train], clips[n_train:n_train + n_val], clips[n_train + n_val:]


def spectral_centroid(x: np.ndarray, sample_rate: int) -> float:
    mag = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    return float((freqs * mag).sum() / max(mag.sum(), 1e-12))
