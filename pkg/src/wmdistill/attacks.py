"""Fourteen waveform distortions used as the attack layer.

Every attack maps a signal to one of the same length.  ``apply`` is the
plain numpy version; ``apply_differentiable`` wraps it for training, with
exact gradients for the linear or additive kinds and a straight-through
(identity) gradient for the rest.
"""
from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter
from scipy.signal import fftconvolve, firwin

from . import diffengine as de
from .diffengine import Tensor
from .dsp import AudioClip, StftConfig, fit_length, istft_array, read_wav, resample_array, stft_array, write_wav

KINDS = ("ND", "GN", "MF", "CODEC", "LP", "DS", "QT", "AS", "EA", "SS", "FS", "RA", "PU", "PD")
ALIASES = {"MP3": "CODEC"}
DIFFERENTIABLE = frozenset({"ND", "GN", "AS", "EA", "LP", "RA"})

DEFAULTS: dict[str, dict] = {
    "ND": {},
    "GN": {"snr_db": 30.0},
    "MF": {"kernel": 3},
    "CODEC": {"lowpass_hz": 10000.0, "mag_bits": 6, "fft_size": 1024, "hop": 256, "external_cmd": None},
    "LP": {"cutoff_hz": 4000.0, "numtaps": 101},
    "DS": {"rate": 8000},
    "QT": {"bits": 9},
    "AS": {"gain": 0.8},
    "EA": {"delay_s": 0.1, "gain": 0.3},
    "SS": {"factor": 0.9},
    "FS": {"factor": 1.1},
    "RA": {"rt60_s": 0.2, "ir_len": 4800, "drr_db": 0.0},
    "PU": {"factor": 1.1},
    "PD": {"factor": 0.9},
}


class AttackError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    k = ALIASES.get(kind.upper(), kind.upper())
    if k not in KINDS:
        raise AttackError(f"unknown attack kind '{kind}'; valid kinds: {', '.join(KINDS)}")
    return k


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    grad_policy: str | None = None

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise AttackError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.params = {**DEFAULTS[self.kind], **self.params}
        if self.grad_policy is None:
            self.grad_policy = "differentiable" if self.kind in DIFFERENTIABLE else "straight_through"
        if self.grad_policy not in ("differentiable", "straight_through"):
            raise AttackError(f"unknown grad_policy '{self.grad_policy}'")
        if self.grad_policy == "differentiable" and self.kind not in DIFFERENTIABLE:
            raise AttackError(f"{self.kind} has no exact gradient; use straight_through")
        self._validate()

    def _validate(self):
        p, k = self.params, self.kind
        checks = {
            "GN": lambda: np.isfinite(p["snr_db"]),
            "MF": lambda: int(p["kernel"]) >= 1 and int(p["kernel"]) % 2 == 1,
            "CODEC": lambda: 1 <= int(p["mag_bits"]) <= 16 and p["lowpass_hz"] > 0,
            "LP": lambda: p["cutoff_hz"] > 0 and int(p["numtaps"]) % 2 == 1,
            "DS": lambda: p["rate"] > 0,
            "QT": lambda: 1 <= int(p["bits"]) <= 24,
            "AS": lambda: p["gain"] >= 0,
            "EA": lambda: p["delay_s"] >= 0,
            "SS": lambda: 0 < p["factor"] < 1,
            "FS": lambda: p["factor"] > 1,
            "RA": lambda: p["rt60_s"] > 0 and int(p["ir_len"]) >= 1,
            "PU": lambda: p["factor"] > 1,
            "PD": lambda: 0 < p["factor"] < 1,
        }
        if k in checks and not checks[k]():
            raise AttackError(f"{k}: parameters out of range: {p}")


@dataclass
class AttackOutcome:
    audio: AudioClip
    applied: AttackSpec
    length_restored: bool


# ----------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------

@lru_cache(maxsize=16)
def lowpass_taps(cutoff_hz: float, sample_rate: int, numtaps: int = 101) -> np.ndarray:
    if cutoff_hz >= sample_rate / 2:
        raise AttackError(f"cutoff {cutoff_hz} Hz is above Nyquist for {sample_rate} Hz audio")
    taps = firwin(numtaps, cutoff_hz, fs=sample_rate, window=("kaiser", 8.0))
    taps.setflags(write=False)
    return taps


def fir_same(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Centred ('same') FIR filtering along the last axis; zero-phase for symmetric taps."""
    full = fftconvolve(x, np.broadcast_to(taps, x.shape[:-1] + taps.shape), mode="full", axes=-1)
    start = (taps.size - 1) // 2
    return full[..., start : start + x.shape[-1]]


def fir_same_adjoint(g: np.ndarray, taps: np.ndarray) -> np.ndarray:
    flipped = taps[::-1]
    full = fftconvolve(g, np.broadcast_to(flipped, g.shape[:-1] + flipped.shape), mode="full", axes=-1)
    start = taps.size - 1 - (taps.size - 1) // 2
    return full[..., start : start + g.shape[-1]]


def echo(x: np.ndarray, delay: int, gain: float) -> np.ndarray:
    y = np.array(x, dtype=np.float64, copy=True)
    if 0 < delay < x.shape[-1]:
        y[..., delay:] += gain * x[..., :-delay]
    elif delay == 0:
        y += gain * x
    return y


def echo_adjoint(g: np.ndarray, delay: int, gain: float) -> np.ndarray:
    y = np.array(g, dtype=np.float64, copy=True)
    if 0 < delay < g.shape[-1]:
        y[..., :-delay] += gain * g[..., delay:]
    elif delay == 0:
        y += gain * g
    return y


def reverb_envelope(rt60_s: float, sample_rate: int, ir_len: int) -> np.ndarray:
    """Amplitude envelope falling 60 dB in energy (a factor 1000 in amplitude) after rt60_s."""
    t = np.arange(ir_len) / sample_rate
    return 10.0 ** (-3.0 * t / rt60_s)


def reverb_ir(rt60_s: float, sample_rate: int, ir_len: int, seed: int, drr_db: float = 0.0) -> np.ndarray:
    """Unit-energy impulse response: a direct path plus an exponentially decaying noise tail.

    ``drr_db`` is the direct-to-reverberant energy ratio.
    """
    rng = np.random.default_rng(seed)
    tail = rng.standard_normal(ir_len) * reverb_envelope(rt60_s, sample_rate, ir_len)
    tail[0] = 0.0
    tail *= np.sqrt(10.0 ** (-drr_db / 10.0) / np.sum(tail**2))
    h = tail
    h[0] = 1.0
    return h / np.linalg.norm(h)


def causal_conv(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    full = fftconvolve(x, np.broadcast_to(h, x.shape[:-1] + h.shape), mode="full", axes=-1)
    return full[..., : x.shape[-1]]


def causal_conv_adjoint(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    flipped = h[::-1]
    full = fftconvolve(g, np.broadcast_to(flipped, g.shape[:-1] + flipped.shape), mode="full", axes=-1)
    return full[..., h.size - 1 : h.size - 1 + g.shape[-1]]


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    """Uniform quantiser with 2**bits levels spanning [-1, 1] (both ends included)."""
    levels = 2**bits
    step = 2.0 / (levels - 1)
    idx = np.clip(np.round((np.asarray(x) + 1.0) / step), 0, levels - 1)
    return idx * step - 1.0


def gaussian_noise(x: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """White noise scaled to the requested SNR against the per-signal power of ``x``."""
    rng = np.random.default_rng(seed)
    power = np.mean(np.square(x), axis=-1, keepdims=True)
    return rng.standard_normal(x.shape) * np.sqrt(power / 10.0 ** (snr_db / 10.0))


def speed_change(x: np.ndarray, factor: float) -> np.ndarray:
    """Play back ``factor`` times faster: round(L / factor) samples, pitch scaled by ``factor``."""
    return resample_array(x, factor, 1.0)


def time_stretch(x: np.ndarray, length: int, fft_size: int = 512, hop: int = 128) -> np.ndarray:
    """Phase-vocoder stretch to ``length`` samples, preserving pitch."""
    cfg = StftConfig(fft_size, hop)
    Z = stft_array(x, cfg)
    T = Z.shape[-2]
    T_out = max(2, int(round((T - 1) * length / x.shape[-1])) + 1)
    pos = np.linspace(0.0, T - 1, T_out)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, T - 1)
    frac = pos - i0
    mag = (1 - frac)[:, None] * np.abs(Z[..., i0, :]) + frac[:, None] * np.abs(Z[..., i1, :])
    expected = 2 * np.pi * hop * np.arange(Z.shape[-1]) / fft_size
    dphi = np.angle(Z[..., i1, :]) - np.angle(Z[..., i0, :]) - expected
    dphi = dphi - 2 * np.pi * np.round(dphi / (2 * np.pi))
    advance = expected + dphi  # true per-hop phase advance; synthesis hop == analysis hop
    phase = np.angle(Z[..., :1, :]) + np.concatenate(
        [np.zeros_like(advance[..., :1, :]), np.cumsum(advance[..., :-1, :], axis=-2)], axis=-2
    )
    out_len = hop * (T_out - 1)
    y = istft_array(mag * np.exp(1j * phase), cfg, out_len)
    return resample_array(y, y.shape[-1], length) if y.shape[-1] != length else y


def pitch_shift(x: np.ndarray, factor: float) -> np.ndarray:
    """Raise (factor > 1) or lower pitch at constant duration.

    Stretch to L * factor samples with the phase vocoder, then resample back
    to L, which scales every frequency by ``factor``.
    """
    L = x.shape[-1]
    stretched = time_stretch(x, int(round(L * factor)))
    return fit_length(resample_array(stretched, stretched.shape[-1], L), L)


def codec_proxy(x: np.ndarray, sample_rate: int, lowpass_hz: float, mag_bits: int, fft_size: int, hop: int) -> np.ndarray:
    """Band-limit, then quantise STFT magnitudes to 2**mag_bits levels of the clip maximum."""
    y = fir_same(x, lowpass_taps(min(lowpass_hz, 0.49 * sample_rate), sample_rate))
    cfg = StftConfig(fft_size, hop)
    Z = stft_array(y, cfg)
    mag = np.abs(Z)
    peak = np.max(mag, axis=(-2, -1), keepdims=True)
    peak = np.where(peak > 0, peak, 1.0)
    levels = 2**mag_bits - 1
    qmag = np.round(mag / peak * levels) / levels * peak
    phase = np.exp(1j * np.angle(Z))
    return istft_array(qmag * phase, cfg, x.shape[-1])


def external_codec(x: np.ndarray, sample_rate: int, command: str) -> np.ndarray:
    """Run a user encoder round trip: ``command`` gets {input} and {output} WAV paths."""
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "in.wav", Path(tmp) / "out.wav"
        write_wav(AudioClip(x, sample_rate), src)
        argv = shlex.split(command.format(input=str(src), output=str(dst)))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except FileNotFoundError as exc:
            raise AttackError(f"external encoder not found: {argv[0]}") from exc
        if proc.returncode != 0:
            raise AttackError(f"external encoder failed ({proc.returncode}): {proc.stderr.strip()}")
        out = read_wav(dst, target_rate=sample_rate).samples
    return fit_length(out, x.shape[-1])


# ----------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------

def apply_array(spec: AttackSpec, x: np.ndarray, sample_rate: int) -> np.ndarray:
    """Distort signals (..., L); output has the same shape."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    p, k = spec.params, spec.kind
    if k == "ND":
        return x.copy()
    if k == "GN":
        return x + gaussian_noise(x, p["snr_db"], spec.seed)
    if k == "MF":
        size = [1] * (x.ndim - 1) + [int(p["kernel"])]
        return median_filter(x, size=size, mode="nearest")
    if k == "CODEC":
        if p.get("external_cmd"):
            if x.ndim != 1:
                return np.stack([external_codec(row, sample_rate, p["external_cmd"]) for row in x.reshape(-1, L)]).reshape(x.shape)
            return external_codec(x, sample_rate, p["external_cmd"])
        return codec_proxy(x, sample_rate, p["lowpass_hz"], int(p["mag_bits"]), int(p["fft_size"]), int(p["hop"]))
    if k == "LP":
        return fir_same(x, lowpass_taps(float(p["cutoff_hz"]), sample_rate, int(p["numtaps"])))
    if k == "DS":
        if p["rate"] >= sample_rate:
            raise AttackError(f"DS target {p['rate']} Hz is not below the {sample_rate} Hz input rate")
        return fit_length(resample_array(resample_array(x, sample_rate, p["rate"]), p["rate"], sample_rate), L)
    if k == "QT":
        return quantize(x, int(p["bits"]))
    if k == "AS":
        return x * p["gain"]
    if k == "EA":
        return echo(x, int(round(p["delay_s"] * sample_rate)), p["gain"])
    if k in ("SS", "FS"):
        return fit_length(speed_change(x, p["factor"]), L)
    if k == "RA":
        return causal_conv(x, reverb_ir(p["rt60_s"], sample_rate, int(p["ir_len"]), spec.seed, p["drr_db"]))
    if k in ("PU", "PD"):
        return pitch_shift(x, p["factor"])
    raise AttackError(f"unhandled attack kind {k}")


def apply(spec: AttackSpec, clip: AudioClip) -> AttackOutcome:
    y = apply_array(spec, clip.samples, clip.sample_rate)
    return AttackOutcome(AudioClip(y, clip.sample_rate), spec, length_restored=True)


def apply_differentiable(spec: AttackSpec, x: Tensor, sample_rate: int) -> Tensor:
    """Training-time attack on a (..., L) tensor."""
    p, k = spec.params, spec.kind
    if spec.grad_policy == "straight_through":
        return de.straight_through(lambda a: apply_array(spec, a, sample_rate), x)
    if k == "ND":
        return x
    if k == "GN":
        noise = gaussian_noise(x.data.astype(np.float64), p["snr_db"], spec.seed)
        return x + de.Tensor(noise.astype(x.dtype))
    if k == "AS":
        return x * float(p["gain"])
    if k == "EA":
        d, g = int(round(p["delay_s"] * sample_rate)), float(p["gain"])
        return de.linear_map(x, lambda a: echo(a, d, g), lambda a: echo_adjoint(a, d, g), name="echo")
    if k == "LP":
        taps = lowpass_taps(float(p["cutoff_hz"]), sample_rate, int(p["numtaps"]))
        return de.linear_map(x, lambda a: fir_same(a, taps), lambda a: fir_same_adjoint(a, taps), name="lowpass")
    if k == "RA":
        h = reverb_ir(p["rt60_s"], sample_rate, int(p["ir_len"]), spec.seed, p["drr_db"])
        return de.linear_map(x, lambda a: causal_conv(a, h), lambda a: causal_conv_adjoint(a, h), name="reverb")
    raise AttackError(f"{k} has no differentiable form")


def apply_batch_differentiable(specs: list[AttackSpec], x: Tensor, sample_rate: int) -> Tensor:
    """One attack per row of a (B, L) tensor."""
    if len(specs) != x.shape[0]:
        raise ValueError(f"{len(specs)} attacks for a batch of {x.shape[0]}")
    if all(s.kind == "ND" for s in specs):
        return x
    rows = [apply_differentiable(s, x[i], sample_rate) for i, s in enumerate(specs)]
    return de.stack(rows, axis=0)


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

def normalize_menu(menu: dict[str, float]) -> dict[str, float]:
    if not menu:
        raise AttackError("attack menu is empty")
    out = {}
    for kind, prob in menu.items():
        if prob < 0:
            raise AttackError(f"negative probability for {kind}")
        out[canonical_kind(kind)] = out.get(canonical_kind(kind), 0.0) + float(prob)
    total = sum(out.values())
    if not np.isclose(total, 1.0, atol=1e-6):
        raise AttackError(f"attack menu probabilities sum to {total}, not 1")
    if out.get("ND", 0.0) <= 0:
        raise AttackError("attack menu must give ND a nonzero probability")
    return out


def uniform_menu(kinds=KINDS) -> dict[str, float]:
    return {k: 1.0 / len(kinds) for k in kinds}


def sample_attack(rng: np.random.Generator, menu: dict[str, float], params: dict[str, dict] | None = None) -> AttackSpec:
    menu = normalize_menu(menu)
    kinds = list(menu)
    probs = np.array([menu[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    seed = int(rng.integers(0, 2**31 - 1))
    return AttackSpec(kind, dict((params or {}).get(kind, {})), seed=seed)
