"""Scoring and detection: BER, SNR, sync-code decisions, F1, FLOPs estimates and RTF timing."""
from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks as atk
from .dsp import StftConfig
from .watermark_net import SYNC_CODE_DEFAULT, ModelConfig, WatermarkModel, _subnet_layers, int_to_bits

# column order of the per-attack results table; CODEC sits where an MP3 column usually goes
TABLE_ORDER = ("ND", "GN", "MF", "CODEC", "LP", "DS", "QT", "AS", "EA", "SS", "FS", "RA", "PU", "PD")


class ClipTooShort(ValueError):
    pass


def ber(m, m_hat) -> float:
    m, m_hat = np.asarray(m).reshape(-1), np.asarray(m_hat).reshape(-1)
    if m.shape != m_hat.shape:
        raise ValueError(f"message lengths differ: {m.size} vs {m_hat.size}")
    if m.size == 0:
        raise ValueError("empty message")
    return float(np.count_nonzero(m != m_hat)) / m.size


def snr_db(x, x_w) -> float:
    """20 log10(|x| / |x - x_w|); +inf when the signals are identical."""
    x, x_w = np.asarray(x, dtype=np.float64), np.asarray(x_w, dtype=np.float64)
    if x.shape != x_w.shape:
        raise ValueError(f"signal lengths differ: {x.shape} vs {x_w.shape}")
    ref = np.linalg.norm(x)
    if ref == 0:
        raise ValueError("reference signal is all zeros")
    err = np.linalg.norm(x - x_w)
    if err == 0:
        return math.inf
    return float(20.0 * np.log10(ref / err))


@dataclass
class DetectionResult:
    decoded_bits: np.ndarray
    sync_matches: int
    is_watermarked: bool
    payload: np.ndarray
    threshold: int = 7

    def to_dict(self) -> dict:
        return {
            "decoded_bits": "".join(str(int(b)) for b in self.decoded_bits),
            "sync_matches": self.sync_matches,
            "is_watermarked": self.is_watermarked,
            "payload_bits": "".join(str(int(b)) for b in self.payload),
            "threshold": self.threshold,
        }


def decide(bits, sync_code: int = SYNC_CODE_DEFAULT, sync_len: int = 8, threshold: int = 7) -> DetectionResult:
    """Detection decision from already decoded bits."""
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if not 0 <= threshold <= sync_len:
        raise ValueError(f"threshold {threshold} outside [0, {sync_len}]")
    matches = int(np.count_nonzero(bits[:sync_len] == int_to_bits(sync_code, sync_len)))
    return DetectionResult(bits, matches, matches >= threshold, bits[sync_len:], threshold)


def detect(clip, model: WatermarkModel, sync_code: int = SYNC_CODE_DEFAULT, threshold: int = 7) -> DetectionResult:
    """Decode one clip and apply the sync-code rule."""
    x = np.asarray(getattr(clip, "samples", clip), dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("detect expects a mono clip")
    if x.size < model.stft.fft_size:
        raise ClipTooShort(f"clip of {x.size} samples is shorter than one {model.stft.fft_size}-sample frame")
    logits = model.logits_array(x)
    return decide((logits > 0).astype(np.int64), sync_code, model.dec_cfg.sync_len, threshold)


def false_positive_rate(sync_len: int = 8, threshold: int = 7) -> float:
    """Probability that uniformly random bits pass the sync rule."""
    return sum(math.comb(sync_len, k) for k in range(threshold, sync_len + 1)) / 2**sync_len


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, predicted: bool, actual: bool) -> None:
        if predicted and actual:
            self.tp += 1
        elif predicted:
            self.fp += 1
        elif actual:
            self.fn += 1
        else:
            self.tn += 1

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass
class EvalReport:
    per_attack_ber: dict[str, float]
    mean_ber: float
    snr_db: float
    f1: float
    counts: Counts
    per_attack_f1: dict[str, float] = field(default_factory=dict)
    n_clips: int = 0

    def to_dict(self) -> dict:
        return {
            "schema": "wmdistill-eval/1",
            "per_attack_ber": self.per_attack_ber,
            "mean_ber": self.mean_ber,
            "snr_db": self.snr_db,
            "f1": self.f1,
            "counts": asdict(self.counts),
            "per_attack_f1": self.per_attack_f1,
            "n_clips": self.n_clips,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """BER in percent, one column per attack in the standard order, MEAN first."""
        kinds = [k for k in TABLE_ORDER if k in self.per_attack_ber]
        heads = ["MEAN"] + kinds + ["SNR", "F1"]
        vals = [self.mean_ber * 100] + [self.per_attack_ber[k] * 100 for k in kinds] + [self.snr_db, self.f1 * 100]
        cells = [f"{v:.2f}" for v in vals]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return line1 + "\n" + line2


def evaluate(model: WatermarkModel, clips, attacks=TABLE_ORDER, seed: int = 0,
             sync_code: int = SYNC_CODE_DEFAULT, threshold: int = 7, attack_params: dict | None = None,
             sample_rate: int = 24000) -> EvalReport:
    """Embed sync code + random payload in each clip, attack, decode, score.

    Detection runs on a balanced set: every clip is scored watermarked and
    original under each attack.
    """
    clips = [np.asarray(getattr(c, "samples", c), dtype=np.float64) for c in clips]
    if not clips:
        raise ValueError("evaluation needs at least one clip")
    kinds = [atk.canonical_kind(k) for k in attacks]
    cfg = model.enc_cfg
    rng = np.random.default_rng(seed)
    sync_bits = int_to_bits(sync_code, cfg.sync_len)
    per_ber = {k: [] for k in kinds}
    per_counts = {k: Counts() for k in kinds}
    total = Counts()
    snrs = []
    for i, x in enumerate(clips):
        bits = np.concatenate([sync_bits, rng.integers(0, 2, size=cfg.payload_len)])
        x_w = model.embed_array(x, bits)
        snrs.append(snr_db(x, x_w))
        for j, kind in enumerate(kinds):
            spec = atk.AttackSpec(kind, dict((attack_params or {}).get(kind, {})), seed=seed + 1000 * i + j)
            wm = atk.apply_array(spec, x_w, sample_rate)
            orig = atk.apply_array(spec, x, sample_rate)
            logits = model.logits_array(np.stack([wm, orig]))
            decoded = (logits > 0).astype(np.int64)
            per_ber[kind].append(ber(bits, decoded[0]))
            for row, actual in ((decoded[0], True), (decoded[1], False)):
                pred = decide(row, sync_code, cfg.sync_len, threshold).is_watermarked
                per_counts[kind].add(pred, actual)
                total.add(pred, actual)
    per_attack = {k: float(np.mean(v)) for k, v in per_ber.items()}
    finite = [s for s in snrs if np.isfinite(s)]
    return EvalReport(
        per_attack_ber=per_attack,
        mean_ber=float(np.mean(list(per_attack.values()))),
        snr_db=float(np.mean(finite)) if finite else math.inf,
        f1=total.f1,
        counts=total,
        per_attack_f1={k: c.f1 for k, c in per_counts.items()},
        n_clips=len(clips),
    )


# ----------------------------------------------------------------------
# cost accounting
# ----------------------------------------------------------------------

def estimate_flops(cfg: ModelConfig, stft: StftConfig | None = None, sample_rate: int = 24000) -> float:
    """Embedding cost in GFLOPs per second of audio.

    Counting rules: a multiply-accumulate is 2 FLOPs, every elementwise op
    is 1 FLOP per element, an FFT of size N is 5 N log2 N.  One forward
    STFT and one inverse STFT per frame; the message network runs once per
    second of audio.
    """
    stft = stft or cfg.stft
    F = stft.n_bins
    frames = sample_rate / stft.hop
    n = stft.fft_size
    fft = 5.0 * n * math.log2(n)
    per_frame = 2 * fft + 4 * n  # windowing and overlap-add
    k2 = cfg.kernel**2
    layers = _subnet_layers(cfg)
    subnet_macs = sum(k2 * cin * cout for cin, cout in layers) * F
    # per element: input compression, leaky + residual add on hidden layers
    hidden = sum(cout for _, cout in layers[:-1])
    subnet_elem = (2 + 2 * hidden) * F
    coupling_elem = 5 * 2 * F  # tanh, scale, exp, multiply, add on the 2-channel target
    per_frame += cfg.n_blocks * 2 * (2 * subnet_macs + subnet_elem + coupling_elem)
    K, E, H = cfg.n_bits, cfg.embed_dim, cfg.msg_hidden
    message = 2 * K * (E * H + H * F) + K * (H + F)
    return (per_frame * frames + message) / 1e9


@dataclass
class BenchReport:
    gflops_estimate: float
    rtf: float
    rtf_runs: list[float]
    seconds_of_audio: float
    threads: int
    hardware: str

    def to_dict(self) -> dict:
        return {"schema": "wmdistill-bench/1", **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bench_rtf(model: WatermarkModel, seconds_of_audio: float = 1.0, repeats: int = 5, warmup: int = 1,
              sample_rate: int = 24000, seed: int = 0) -> BenchReport:
    """Median single-threaded embedding time divided by audio duration."""
    import torch
    from threadpoolctl import threadpool_limits

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.standard_normal(int(round(seconds_of_audio * sample_rate)))
    bits = rng.integers(0, 2, size=model.enc_cfg.n_bits)
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    runs = []
    try:
        with threadpool_limits(limits=1):
            for _ in range(warmup):
                model.embed_array(x, bits)
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.embed_array(x, bits)
                runs.append((time.perf_counter() - t0) / seconds_of_audio)
    finally:
        torch.set_num_threads(prev)
    hw = f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} logical cores, single thread"
    return BenchReport(estimate_flops(model.enc_cfg, sample_rate=sample_rate), statistics.median(runs), runs,
                       seconds_of_audio, 1, hw)
