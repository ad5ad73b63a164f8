"""Training objectives: multi-scale STFT, decoding, adversarial, and their weighted sums.

All functions take engine tensors (numpy arrays are wrapped) with a leading
batch axis and return scalar tensors averaged over the batch.

Adversarial orientation.  The discriminator output d is the probability
that its input is watermarked.  The formulas as usually printed,

    L_dis = log(1 - d(x)) + log(d(x_w))
    L_adv = log(1 - d(x_w))

are returned verbatim by :func:`adversarial_losses`.  Read literally, a good
discriminator *maximises* L_dis and minimising L_adv would push d(x_w)
towards 1, i.e. make watermarked audio easier to spot.  Training therefore
minimises the standard binary cross-entropy forms instead:

    discriminator: -[log d(x_w) + log(1 - d(x))]  == -L_dis
    encoder:       -log(1 - d(x_w))               == -L_adv
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .dsp import StftConfig, stft_tensor

PERCEPTUAL_SCALES = tuple(range(5, 12))
PROB_EPS = 1e-6
LOG_MAG_EPS = 1e-5


@dataclass
class LossWeights:
    lambda_per: float = 1.0
    lambda_dec: float = 10.0
    lambda_adv: float = 0.1
    lambda_wave: float = 0.0
    alpha_scales: tuple[float, ...] = field(default_factory=lambda: (1.0,) * len(PERCEPTUAL_SCALES))
    alpha_featmap: float = 1.0

    def __post_init__(self):
        vals = [self.lambda_per, self.lambda_dec, self.lambda_adv, self.lambda_wave, self.alpha_featmap,
                *self.alpha_scales]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in (self.lambda_per, self.lambda_dec, self.lambda_adv)):
            raise ValueError("at least one loss weight must be positive")
        self.alpha_scales = tuple(float(a) for a in self.alpha_scales)
        if len(self.alpha_scales) != len(PERCEPTUAL_SCALES):
            raise ValueError(f"need {len(PERCEPTUAL_SCALES)} per-scale weights, got {len(self.alpha_scales)}")


@dataclass
class LossReport:
    per: float
    dec: float
    adv: float
    dis: float
    total: float

    def as_dict(self) -> dict:
        return {"per": self.per, "dec": self.dec, "adv": self.adv, "dis": self.dis, "total": self.total}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else de.Tensor(np.asarray(x, dtype=np.float64))


def _batched(x: Tensor) -> Tensor:
    return de.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def _scale_config(i: int, hop_divisor: int = 4) -> StftConfig:
    n = 2**i
    return StftConfig(fft_size=n, hop=max(1, n // hop_divisor))


def _magnitude(x: Tensor, cfg: StftConfig) -> Tensor:
    S = stft_tensor(x, cfg)
    return de.complex_magnitude(S[..., 0], S[..., 1], eps=1e-12)


def multiscale_stft_distance(x, y, alphas=None, scales=PERCEPTUAL_SCALES, hop_divisor: int = 4) -> Tensor:
    """Weighted sum over scales of RMS-normalised linear and log magnitude distances.

    Scale i uses a 2**i Hann window and a 2**i / hop_divisor hop.  Phase
    differences are invisible: only magnitudes are compared.
    """
    x, y = _batched(_t(x)), _batched(_t(y))
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    alphas = (1.0,) * len(scales) if alphas is None else tuple(alphas)
    total = None
    for alpha, i in zip(alphas, scales):
        if alpha == 0:
            continue
        cfg = _scale_config(i, hop_divisor)
        mx, my = _magnitude(x, cfg), _magnitude(y, cfg)
        count = float(np.prod(mx.shape[1:]))
        lin = de.l2_norm(mx - my, axes=(1, 2)) / np.sqrt(count)
        logd = de.l2_norm(de.log(mx + LOG_MAG_EPS) - de.log(my + LOG_MAG_EPS), axes=(1, 2)) / np.sqrt(count)
        term = (lin + logd) * float(alpha)
        total = term if total is None else total + term
    if total is None:
        return de.Tensor(np.zeros((), dtype=x.dtype))
    return de.mean_over_axes(total)


def perceptual_loss(x, x_w, alphas=None, **kw) -> Tensor:
    """Distance between original and watermarked audio."""
    return multiscale_stft_distance(x, x_w, alphas, **kw)


def student_perceptual_loss(x_w_student, x_w_teacher, alphas=None, **kw) -> Tensor:
    """Distance between the student's and the teacher's watermarked audio."""
    return multiscale_stft_distance(x_w_student, x_w_teacher, alphas, **kw)


def waveform_excess(x, x_w, floor: float = 0.0) -> Tensor:
    """Relative waveform error ||x_w - x|| / ||x|| in excess of ``floor``, per clip, batch-averaged.

    The multi-scale distance compares magnitudes only, so a watermark carried
    by phase costs it nothing.  This hinge bounds the waveform error itself
    and is zero for clips already within ``floor``.
    """
    x, x_w = _batched(_t(x)), _batched(_t(x_w))
    if x.shape != x_w.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_w.shape}")
    axes = tuple(range(1, x.ndim))
    rel = de.l2_norm(x_w - x, axes=axes) / (de.l2_norm(x, axes=axes) + 1e-12)
    return de.mean_over_axes(de.clamp(rel - float(floor), lo=0.0))


def decoding_loss(m, m_hat, M=None, M_hat=None, alpha: float = 1.0) -> Tensor:
    """||m - m_hat||_2 + alpha ||M - M_hat||_2 per example, averaged over the batch.

    Leave ``M``/``M_hat`` as None for the distillation stage, where the
    feature-map term is dropped.
    """
    m, m_hat = _batched(_t(m)), _batched(_t(m_hat))
    if m.shape != m_hat.shape:
        raise ValueError(f"message shape mismatch: {m.shape} vs {m_hat.shape}")
    axes = tuple(range(1, m.ndim))
    loss = de.l2_norm(m - m_hat, axes=axes)
    if M is not None and M_hat is not None and alpha != 0:
        M, M_hat = _t(M), _t(M_hat)
        if M.shape != M_hat.shape:
            raise ValueError(f"feature map shape mismatch: {M.shape} vs {M_hat.shape}")
        if M.ndim == 1 or M.shape[0] != m.shape[0]:
            M, M_hat = de.reshape(M, (1,) + M.shape), de.reshape(M_hat, (1,) + M_hat.shape)
        loss = loss + de.l2_norm(M - M_hat, axes=tuple(range(1, M.ndim))) * float(alpha)
    return de.mean_over_axes(loss)


def _clamped(d) -> Tensor:
    return de.clamp(_t(d), PROB_EPS, 1.0 - PROB_EPS)


def adversarial_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """(L_dis, L_adv) exactly as printed, batch-averaged, with probabilities clamped to [eps, 1 - eps]."""
    dr, df = _clamped(d_real), _clamped(d_fake)
    l_dis = de.mean_over_axes(de.log(1.0 - dr) + de.log(df))
    l_adv = de.mean_over_axes(de.log(1.0 - df))
    return l_dis, l_adv


def discriminator_objective(d_real, d_fake) -> Tensor:
    """Binary cross-entropy the discriminator minimises (watermarked = 1, original = 0)."""
    l_dis, _ = adversarial_losses(d_real, d_fake)
    return -l_dis


def generator_objective(d_fake) -> Tensor:
    """Non-saturating adversarial term the encoder minimises: -log(1 - d(x_w))."""
    df = _clamped(d_fake)
    return -de.mean_over_axes(de.log(1.0 - df))


def total_loss(per, dec, adv, w: LossWeights):
    """lambda_per * per + lambda_dec * dec + lambda_adv * adv (tensors or plain numbers)."""
    parts = (per, dec, adv)
    for name, part in zip(("per", "dec", "adv"), parts):
        val = part.data if isinstance(part, Tensor) else np.asarray(part)
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite {name} loss")
    if any(isinstance(p, Tensor) for p in parts):
        out = None
        for lam, part in zip((w.lambda_per, w.lambda_dec, w.lambda_adv), parts):
            if lam == 0:
                continue
            term = _t(part) * float(lam)
            out = term if out is None else out + term
        return out if out is not None else de.Tensor(np.zeros(()))
    return w.lambda_per * float(per) + w.lambda_dec * float(dec) + w.lambda_adv * float(adv)
