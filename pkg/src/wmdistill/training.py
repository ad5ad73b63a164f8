"""Teacher training and progressive distillation into a compact student encoder.

Teacher: each step first updates the discriminator on (original, detached
watermarked) spectrograms, then updates the encoder/decoder on the weighted
perceptual + decoding + adversarial objective, with one sampled attack per
clip between embedding and decoding.

Student: the student encoder's output is mixed with the frozen teacher's
output, ``lam * student + (1 - lam) * teacher``, and decoded by the teacher
decoder.  ``lam`` ramps linearly, then holds at its end value, and a short
joint fine-tune of the teacher decoder closes the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import diffengine as de
from . import losses
from .config import PkdSchedule, TrainRunConfig
from .corpus import CorpusSpec, generate_corpus, load_splits
from .diffengine import NetworkParams, OptimizerState, Tensor
from .dsp import istft_tensor, stft_tensor
from .metrics import ber, snr_db
from .watermark_net import (
    Message,
    ModelConfig,
    WatermarkModel,
    build_message_map,
    decode,
    discriminate,
    encode,
    init_discriminator,
    init_params,
    int_to_bits,
)

__all__ = [
    "PkdSchedule",
    "TrainRunConfig",
    "CorpusSpec",
    "generate_corpus",
    "lambda_of",
    "combine_outputs",
    "train_teacher",
    "distill_student",
    "direct_distill_baseline",
    "TrainingDiverged",
    "RunResult",
]

METRICS_FORMAT = "wmdistill-metrics"
METRICS_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class CheckpointMismatch(ValueError):
    pass


def lambda_of(n: int, s: PkdSchedule) -> float:
    """Linear ramp from lambda_start to lambda_end over ramp_steps, then flat."""
    if n < 0:
        raise ValueError("step index must be >= 0")
    return min(s.lambda_end, s.lambda_start + (s.lambda_end - s.lambda_start) * n / s.ramp_steps)


def combine_outputs(x_w_s, x_w_t, lam: float):
    """Convex mix of student and teacher watermarked audio; tensors in, tensor out."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing factor {lam} outside [0, 1]")
    if tuple(np.shape(x_w_s.data if isinstance(x_w_s, Tensor) else x_w_s)) != tuple(
        np.shape(x_w_t.data if isinstance(x_w_t, Tensor) else x_w_t)
    ):
        raise ValueError("student and teacher outputs differ in length")
    if isinstance(x_w_s, Tensor) or isinstance(x_w_t, Tensor):
        s, t = de.as_tensor(x_w_s), de.as_tensor(x_w_t)
        if lam == 0.0:
            return t
        if lam == 1.0:
            return s
        return s * lam + t * (1.0 - lam)
    s, t = np.asarray(x_w_s), np.asarray(x_w_t)
    if lam == 0.0:
        return t.copy()
    if lam == 1.0:
        return s.copy()
    return lam * s + (1.0 - lam) * t


# ----------------------------------------------------------------------
# bookkeeping
# ----------------------------------------------------------------------

class MetricsLog:
    """One JSON object per line; the first line names the format and version."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("w")
        self._write({"format": METRICS_FORMAT, "version": METRICS_VERSION})

    def _write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def log(self, **rec) -> None:
        rec = {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in rec.items()}
        self.records.append(rec)
        self._write(rec)

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != METRICS_FORMAT or header.get("version") != METRICS_VERSION:
        raise ValueError(f"'{path}' is not a version-{METRICS_VERSION} metrics log")
    return [json.loads(line) for line in lines[1:]]


@dataclass
class RunResult:
    checkpoint: Path
    metrics_path: Path
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)
    model: WatermarkModel | None = None


class _Batches:
    """Seeded batch sampler: clips with replacement, one fresh message and attack per clip."""

    def __init__(self, clips: np.ndarray, cfg: TrainRunConfig, seed: int, n_bits: int):
        if len(clips) == 0:
            raise ValueError("training split is empty")
        self.clips = clips.astype(np.float32)
        self.cfg = cfg
        self.n_bits = n_bits
        self.rng = np.random.default_rng(seed)

    def next(self):
        B = self.cfg.batch_size
        idx = self.rng.integers(0, len(self.clips), size=B)
        bits = self.rng.integers(0, 2, size=(B, self.n_bits))
        specs = [atk.sample_attack(self.rng, self.cfg.attacks, self.cfg.attack_params) for _ in range(B)]
        return self.clips[idx], bits, specs


def _validation_set(clips: np.ndarray, cfg: TrainRunConfig, n_bits: int):
    n = min(cfg.val_clips, len(clips))
    rng = np.random.default_rng(cfg.seed + 7919)
    return clips[:n], rng.integers(0, 2, size=(n, n_bits))


def validate(model: WatermarkModel, clips: np.ndarray, bits: np.ndarray, kinds=("ND",), seed: int = 0,
             attack_params: dict | None = None, sample_rate: int = 24000) -> dict:
    """Mean BER over ``kinds`` and mean SNR of the watermarked clips."""
    if len(clips) == 0:
        return {"val_ber": float("nan"), "val_snr": float("nan")}
    xw = model.embed_array(clips, bits)
    snrs = [snr_db(x, y) for x, y in zip(clips, xw)]
    bers = []
    for kind in kinds:
        attacked = np.stack([
            atk.apply_array(atk.AttackSpec(kind, dict((attack_params or {}).get(kind, {})), seed=seed + i), y,
                            sample_rate)
            for i, y in enumerate(xw)
        ])
        logits = model.logits_array(attacked)
        bers.append(np.mean([ber(b, (l > 0).astype(np.int64)) for b, l in zip(bits, logits)]))
    finite = [s for s in snrs if np.isfinite(s)]
    return {"val_ber": float(np.mean(bers)), "val_snr": float(np.mean(finite)) if finite else float("inf")}


def _tier(v: dict, min_snr: float | None, max_ber: float) -> int:
    if min_snr is None:
        return 0
    if v["val_ber"] >= max_ber:
        return 2
    return 0 if v["val_snr"] >= min_snr else 1


def _is_better(new: dict, best: dict | None, min_snr: float | None = None, max_ber: float = 0.25) -> bool:
    """Lower BER wins and SNR breaks ties, after the SNR-floor tiers of ``Curriculum``."""
    if best is None:
        return True
    t_new, t_best = _tier(new, min_snr, max_ber), _tier(best, min_snr, max_ber)
    if t_new != t_best:
        return t_new < t_best
    if new["val_ber"] != best["val_ber"]:
        return new["val_ber"] < best["val_ber"]
    return new["val_snr"] > best["val_snr"]


def _opt(cfg: TrainRunConfig, lr: float | None = None) -> OptimizerState:
    o = cfg.optim
    return OptimizerState(lr=o.lr if lr is None else lr, betas=(o.beta1, o.beta2), eps=o.eps)


def _sample_rate(cfg: TrainRunConfig) -> int:
    return cfg.corpus.sample_rate


def _embed(x: Tensor, bits: np.ndarray, params: NetworkParams, mcfg: ModelConfig):
    X = stft_tensor(x, mcfg.stft)
    M = build_message_map(bits, mcfg.n_freq, X.shape[1], params, mcfg)
    X_w = encode(X, M, params, mcfg)
    return X, M, X_w, istft_tensor(X_w, mcfg.stft, x.shape[-1])


def _disc_step(disc: NetworkParams, opt: OptimizerState, X: Tensor, X_w: Tensor) -> float:
    d_real = discriminate(de.stop_gradient(X), disc)
    d_fake = discriminate(de.stop_gradient(X_w), disc)
    obj = losses.discriminator_objective(d_real, d_fake)
    obj.backward()
    de.adam_step(disc, opt)
    return float(obj.data)


def _weights_at(w: losses.LossWeights, cur, step: int) -> losses.LossWeights:
    return dataclasses.replace(w, lambda_per=w.lambda_per * cur.perceptual_scale(step))


def _wave_term(x: Tensor, x_w: Tensor, w: losses.LossWeights, cur, step: int):
    """Weighted waveform hinge (already multiplied by lambda_wave) and the floor used."""
    if w.lambda_wave == 0:
        return None, float("nan")
    floor = cur.waveform_floor(step)
    return losses.waveform_excess(x, x_w, floor) * w.lambda_wave, floor


def _checked(step: int, fn):
    try:
        return fn()
    except (de.NonFiniteError, FloatingPointError) as exc:
        if isinstance(exc, TrainingDiverged):
            raise
        raise TrainingDiverged(step, str(exc)) from exc


# ----------------------------------------------------------------------
# stage 1: teacher
# ----------------------------------------------------------------------

def train_teacher(cfg: TrainRunConfig, out_dir: str | Path, splits=None) -> RunResult:
    """Train the teacher; writes teacher.ckpt (best validation), disc.ckpt and metrics.jsonl into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.teacher
    train, val, _ = splits if splits is not None else load_splits(cfg.corpus, cfg.seed)
    params = init_params(mcfg, cfg.seed)
    disc = init_discriminator(cfg.seed + 1)
    opt, dopt = _opt(cfg), _opt(cfg, cfg.disc_lr)
    batches = _Batches(train, cfg, cfg.seed + 2, mcfg.n_bits)
    val_x, val_bits = _validation_set(val, cfg, mcfg.n_bits)
    w = cfg.loss
    sr = _sample_rate(cfg)
    log = MetricsLog(out / "metrics.jsonl")
    ckpt = out / "teacher.ckpt"
    best = None
    model = WatermarkModel.teacher(params, mcfg, {"run_config": cfg.to_dict()})
    use_adv = cfg.use_discriminator and w.lambda_adv > 0
    cur = cfg.curriculum

    def step_fn(step: int) -> dict:
        x_np, bits, specs = batches.next()
        x = Tensor(x_np)
        X, M, X_w, x_w = _embed(x, bits, params, mcfg)
        dis = float("nan")
        if use_adv and not cfg.freeze_discriminator:
            dis = _disc_step(disc, dopt, X, X_w)
        x_a = atk.apply_batch_differentiable(specs, x_w, sr)
        M_hat, logits = decode(stft_tensor(x_a, mcfg.stft), params, mcfg)
        per = losses.perceptual_loss(x, x_w, w.alpha_scales)
        dec = losses.decoding_loss(bits.astype(x_np.dtype), de.sigmoid(logits), M, M_hat, w.alpha_featmap)
        adv = losses.generator_objective(discriminate(X_w, disc)) if use_adv else Tensor(np.zeros((), x_np.dtype))
        total = losses.total_loss(per, dec, adv, _weights_at(w, cur, step))
        wave, floor = _wave_term(x, x_w, w, cur, step)
        if wave is not None:
            total = total + wave
        opt.lr = cfg.optim.lr * cur.lr_scale(step, cfg.steps)
        total.backward()
        # without decoding pressure the message branches get no gradient
        de.adam_step(params, opt, allow_missing=w.lambda_dec == 0)
        disc.zero_grad()
        rec = {"per": float(per.data), "dec": float(dec.data), "adv": float(adv.data), "dis": dis,
               "total": float(total.data)}
        if wave is not None:
            rec.update(wave=float(wave.data), floor=floor)
        if cur.lr_final_scale != 1.0:
            rec["lr"] = opt.lr
        return rec

    try:
        for step in range(cfg.steps + 1):
            if step % cfg.val_every == 0 or step == cfg.steps:
                v = validate(model, val_x, val_bits, cfg.val_attacks, cfg.seed, cfg.attack_params, sr)
                rec = {"phase": "teacher", "step": step, **v}
                if _is_better(v, best, cur.select_min_snr_db, cur.select_max_ber):
                    best = {"step": step, **v}
                    model.save(ckpt, {"best": best})
                rec["best_step"] = best["step"]
                log.log(**rec)
            if step == cfg.steps:
                break
            parts = _checked(step, lambda: step_fn(step))
            if step % cfg.log_every == 0:
                log.log(phase="teacher", step=step, **parts)
        disc.save(out / "disc.ckpt")
    finally:
        log.close()
    return RunResult(ckpt, out / "metrics.jsonl", log.records, best or {}, WatermarkModel.load(ckpt))


# ----------------------------------------------------------------------
# stage 2: progressive distillation
# ----------------------------------------------------------------------

def _load_teacher(teacher_ckpt: str | Path, cfg: TrainRunConfig) -> WatermarkModel:
    try:
        teacher = WatermarkModel.load(teacher_ckpt)
    except FileNotFoundError as exc:
        raise CheckpointMismatch(f"teacher checkpoint '{teacher_ckpt}' not found") from exc
    if teacher.kind != "teacher":
        raise CheckpointMismatch(f"'{teacher_ckpt}' holds a {teacher.kind} model, expected a teacher")
    if teacher.enc_cfg.stft != cfg.student.stft:
        raise CheckpointMismatch(
            f"teacher STFT {teacher.enc_cfg.stft} differs from the student's {cfg.student.stft}")
    if teacher.enc_cfg.n_bits != cfg.student.n_bits or teacher.enc_cfg.sync_len != cfg.student.sync_len:
        raise CheckpointMismatch("teacher and student disagree on message length")
    return teacher


def _init_student(cfg: TrainRunConfig, teacher: WatermarkModel) -> NetworkParams:
    student = init_params(cfg.student, cfg.seed + 11)
    if cfg.init_student_message_from_teacher:
        for name in student.names("msg."):
            if name in teacher.enc_params and teacher.enc_params[name].shape == student[name].shape:
                student.assign(name, teacher.enc_params[name].data)
    return student


def distill_student(teacher_ckpt: str | Path, cfg: TrainRunConfig, out_dir: str | Path,
                    schedule: PkdSchedule | None = None, splits=None, tag: str = "student") -> RunResult:
    """Distil the teacher encoder into ``cfg.student``; writes ``<tag>.ckpt`` and metrics into ``out_dir``.

    Phases: ramp (teacher frozen, lambda rising), hold (teacher frozen,
    lambda at its end value), fine-tune (teacher decoder trainable, reduced
    learning rate).
    """
    s = schedule or cfg.schedule
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher = _load_teacher(teacher_ckpt, cfg)
    tcfg, scfg = teacher.enc_cfg, cfg.student
    t_enc = teacher.enc_params
    t_dec = t_enc  # shared until the fine-tune phase makes a separate copy
    t_enc.set_trainable(False)
    student = _init_student(cfg, teacher)
    disc_path = Path(teacher_ckpt).parent / "disc.ckpt"
    disc = NetworkParams.load(disc_path) if disc_path.exists() else init_discriminator(cfg.seed + 1)
    train, val, _ = splits if splits is not None else load_splits(cfg.corpus, cfg.seed)
    batches = _Batches(train, cfg, cfg.seed + 12, scfg.n_bits)
    val_x, val_bits = _validation_set(val, cfg, scfg.n_bits)
    opt, dopt = _opt(cfg), _opt(cfg, cfg.disc_lr)
    dec_opt = None
    w = cfg.loss
    sr = _sample_rate(cfg)
    use_adv = cfg.use_discriminator and w.lambda_adv > 0
    log = MetricsLog(out / "metrics.jsonl")
    ckpt = out / f"{tag}.ckpt"
    cur = cfg.curriculum
    n_ramp, n_hold, n_ft = s.ramp_steps, s.hold_steps, s.n_finetune
    total_steps = n_ramp + n_hold + n_ft

    def model_now() -> WatermarkModel:
        return WatermarkModel(student, scfg, t_dec, tcfg, "student",
                              {"run_config": cfg.to_dict(), "schedule": dataclasses.asdict(s)})

    def step_fn(step: int, phase: str, lam: float) -> dict:
        x_np, bits, specs = batches.next()
        x = Tensor(x_np)
        with de.no_grad():
            _, _, _, x_w_t = _embed(x, bits, t_enc, tcfg)
        x_w_t = de.stop_gradient(x_w_t)
        _, _, X_w_s, x_w_s = _embed(x, bits, student, scfg)
        dis = float("nan")
        if use_adv and not cfg.freeze_discriminator:
            dis = _disc_step(disc, dopt, stft_tensor(x, scfg.stft), X_w_s)
        x_com = combine_outputs(x_w_s, x_w_t, lam)
        x_a = atk.apply_batch_differentiable(specs, x_com, sr)
        _, logits = decode(stft_tensor(x_a, tcfg.stft), t_dec, tcfg)
        per = losses.student_perceptual_loss(x_w_s, x_w_t, w.alpha_scales)
        dec = losses.decoding_loss(bits.astype(x_np.dtype), de.sigmoid(logits))
        adv = losses.generator_objective(discriminate(X_w_s, disc)) if use_adv else Tensor(np.zeros((), x_np.dtype))
        total = losses.total_loss(per, dec, adv, _weights_at(w, cur, step))
        wave, floor = _wave_term(x, x_w_s, w, cur, step)
        if wave is not None:
            total = total + wave
        total.backward()
        # the last block's message-branch update never reaches the student's output
        de.adam_step(student, opt, allow_missing=True)
        if phase == "finetune":
            de.adam_step(t_dec, dec_opt, allow_missing=True)
        disc.zero_grad()
        rec = {"per": float(per.data), "dec": float(dec.data), "adv": float(adv.data), "dis": dis,
               "total": float(total.data)}
        if wave is not None:
            rec.update(wave=float(wave.data), floor=floor)
        return rec

    try:
        for step in range(total_steps + 1):
            if step < n_ramp:
                phase, lam = "ramp", lambda_of(step, s)
            elif step < n_ramp + n_hold:
                phase, lam = "hold", s.lambda_end
            else:
                phase, lam = "finetune", s.lambda_end
            if step == n_ramp + n_hold and n_ft > 0:
                # teacher encoder output stays tied to the original weights unless asked otherwise
                t_dec = t_enc.copy()
                t_dec.set_trainable(True)
                if s.finetune_teacher_encoder:
                    t_enc = t_dec
                opt.lr = cfg.optim.lr * s.finetune_lr_scale
                dec_opt = _opt(cfg, cfg.optim.lr * s.finetune_lr_scale)
            if step % cfg.val_every == 0 or step == total_steps:
                v = validate(model_now(), val_x, val_bits, cfg.val_attacks, cfg.seed, cfg.attack_params, sr)
                log.log(phase=phase, step=step, lam=lam, **v)
            if step == total_steps:
                break
            parts = _checked(step, lambda: step_fn(step, phase, lam))
            if step % cfg.log_every == 0:
                log.log(phase=phase, step=step, lam=lam, **parts)
    finally:
        log.close()
    model = model_now()
    model.save(ckpt)
    return RunResult(ckpt, out / "metrics.jsonl", log.records, {}, WatermarkModel.load(ckpt))


def direct_distill_baseline(teacher_ckpt: str | Path, cfg: TrainRunConfig, out_dir: str | Path,
                            splits=None) -> RunResult:
    """Distillation with the mixing factor fixed at 1 from the first step; same phase lengths."""
    s = dataclasses.replace(cfg.schedule, lambda_start=1.0, lambda_end=1.0)
    return distill_student(teacher_ckpt, cfg, out_dir, schedule=s, splits=splits, tag="dkd")


def message_bits(payload: int, cfg: ModelConfig, sync_code: int) -> np.ndarray:
    return Message.from_payload(int_to_bits(payload, cfg.payload_len), sync_code, cfg.sync_len).bits
