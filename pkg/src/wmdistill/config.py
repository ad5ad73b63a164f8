"""Run configuration: nested dataclasses loaded from JSON with dotted-key overrides.

Every key in a config file must name a field; unknown keys and values of
the wrong type are rejected with the offending dotted key in the message.
"""
from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackError, normalize_menu
from .corpus import CorpusError, CorpusSpec
from .dsp import StftConfig
from .losses import LossWeights
from .watermark_net import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError(f"invalid optimizer settings {self}")


@dataclass
class PkdSchedule:
    """Mixing factor ramp plus the two phases that follow it.

    ``hold_steps`` continue with the teacher frozen at the end value;
    ``finetune_steps`` then update the teacher decoder jointly at
    ``finetune_lr_scale`` times the learning rate.  None means 10% of the ramp.
    """

    lambda_start: float = 0.1
    lambda_end: float = 1.0
    ramp_steps: int = 40000
    hold_steps: int = 0
    finetune_steps: int | None = None
    finetune_lr_scale: float = 0.1
    finetune_teacher_encoder: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_start <= self.lambda_end <= 1.0:
            raise ValueError(f"need 0 <= lambda_start <= lambda_end <= 1, got {self.lambda_start}, {self.lambda_end}")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")
        if self.hold_steps < 0 or (self.finetune_steps is not None and self.finetune_steps < 0):
            raise ValueError("phase lengths must be >= 0")
        if self.finetune_lr_scale <= 0:
            raise ValueError("finetune_lr_scale must be positive")

    @property
    def n_finetune(self) -> int:
        if self.finetune_steps is not None:
            return self.finetune_steps
        return int(round(0.1 * self.ramp_steps))

    @property
    def total_steps(self) -> int:
        return self.ramp_steps + self.hold_steps + self.n_finetune


@dataclass
class Curriculum:
    """Aids for short training runs; the defaults switch every one of them off.

    The perceptual weight is zero for ``per_delay`` steps and then rises
    linearly over ``per_ramp`` steps.  The waveform hinge (active when
    ``loss.lambda_wave`` > 0) tolerates relative error down to an SNR floor
    that starts at ``floor_start_db`` after ``floor_delay`` steps and climbs
    by ``floor_db_per_step`` up to ``floor_end_db``.  The learning rate
    follows a cosine from its base value to ``lr_final_scale`` times it.
    When ``select_min_snr_db`` is set, checkpoint selection ranks validation
    results in tiers: BER below ``select_max_ber`` and SNR above the floor,
    then BER below ``select_max_ber`` alone, then the rest.  Without the BER
    gate the untouched initial model, which is silent, would win.
    """

    per_delay: int = 0
    per_ramp: int = 0
    floor_start_db: float = 0.0
    floor_end_db: float = 30.0
    floor_delay: int = 0
    floor_db_per_step: float = 0.0
    lr_final_scale: float = 1.0
    select_min_snr_db: float | None = None
    select_max_ber: float = 0.25

    def __post_init__(self):
        if self.per_delay < 0 or self.per_ramp < 0 or self.floor_delay < 0 or self.floor_db_per_step < 0:
            raise ValueError("curriculum step counts and rates must be >= 0")
        if self.floor_end_db < self.floor_start_db:
            raise ValueError("floor_end_db must be >= floor_start_db")
        if not 0 < self.lr_final_scale <= 1:
            raise ValueError("lr_final_scale must be in (0, 1]")

    def perceptual_scale(self, step: int) -> float:
        if self.per_ramp == 0:
            return 0.0 if step < self.per_delay else 1.0
        return min(1.0, max(0.0, (step - self.per_delay) / self.per_ramp))

    def floor_db(self, step: int) -> float:
        rise = self.floor_db_per_step * max(0, step - self.floor_delay)
        return min(self.floor_end_db, self.floor_start_db + rise)

    def waveform_floor(self, step: int) -> float:
        """Relative waveform error allowed at ``step``."""
        return 10.0 ** (-self.floor_db(step) / 20.0)

    def lr_scale(self, step: int, total: int) -> float:
        if self.lr_final_scale == 1.0 or total <= 1:
            return 1.0
        frac = min(1.0, step / (total - 1))
        return self.lr_final_scale + (1 - self.lr_final_scale) * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class TrainRunConfig:
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(n_blocks=8, channels=32))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(n_blocks=2, channels=16))
    stft: StftConfig = field(default_factory=StftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    attacks: dict = field(default_factory=lambda: {"ND": 1.0})
    attack_params: dict = field(default_factory=dict)
    optim: OptimConfig = field(default_factory=OptimConfig)
    disc_lr: float = 1e-4
    use_discriminator: bool = True
    freeze_discriminator: bool = False
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    schedule: PkdSchedule = field(default_factory=PkdSchedule)
    curriculum: Curriculum = field(default_factory=Curriculum)
    val_every: int = 100
    val_clips: int = 16
    val_attacks: tuple[str, ...] = ("ND",)
    log_every: int = 10
    init_student_message_from_teacher: bool = True
    sync_code: int = 0xA6

    def __post_init__(self):
        # one STFT setting for the whole run
        self.teacher = dataclasses.replace(self.teacher, stft=self.stft)
        self.student = dataclasses.replace(self.student, stft=self.stft)
        try:
            self.attacks = normalize_menu(self.attacks)
        except AttackError as exc:
            raise ValueError(f"attacks: {exc}") from exc
        if self.batch_size < 1 or self.steps < 0 or self.val_every < 1 or self.val_clips < 1 or self.log_every < 1:
            raise ValueError("batch_size, val_every, val_clips, log_every must be >= 1 and steps >= 0")
        if self.corpus.fft_size != self.stft.fft_size:
            self.corpus = dataclasses.replace(self.corpus, fft_size=self.stft.fft_size)
        if self.disc_lr <= 0:
            raise ValueError("disc_lr must be positive")
        if not 0 <= self.sync_code < 2**self.teacher.sync_len:
            raise ValueError(f"sync_code does not fit in {self.teacher.sync_len} bits")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        # model configs inherit the shared stft; keep the file form minimal
        d["teacher"].pop("stft")
        d["student"].pop("stft")
        return d


# ----------------------------------------------------------------------
# generic dict -> dataclass with type checks
# ----------------------------------------------------------------------

def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _coerce(a, value, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if dataclasses.is_dataclass(tp):
        return build(tp, value, key + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{key}' must be a list, got {type(value).__name__}")
        elem = args[0] if args else typing.Any
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(elem, v, f"{key}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"'{key}' must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args or [typing.Any] * len(value), value)))
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"'{key}' must be an object, got {type(value).__name__}")
        return dict(value)
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string, got {value!r}")
        return value
    raise ConfigError(f"'{key}': unsupported field type {_type_name(tp)}")


def build(cls, data, prefix: str = ""):
    """Instantiate dataclass ``cls`` from a plain dict, checking keys and types."""
    where = prefix.rstrip(".") or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key '{prefix}{unknown[0]}'")
    kwargs = {name: _coerce(hints[name], value, prefix + name) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, CorpusError, AttackError) as exc:
        raise ConfigError(f"'{where}': {exc}") from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """'a.b.c=value' -> (['a', 'b', 'c'], value); JSON literals are decoded, anything else is a string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides: list[str], cls=TrainRunConfig) -> dict:
    """Return a copy of ``data`` with dotted overrides applied; keys must exist in the schema."""
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node, tp = data, cls
        for i, part in enumerate(path):
            dotted = ".".join(path[: i + 1])
            is_struct = dataclasses.is_dataclass(tp)
            if is_struct:
                fields = {f.name for f in dataclasses.fields(tp) if f.init}
                if part not in fields:
                    raise ConfigError(f"unknown key '{dotted}'")
                tp = typing.get_type_hints(tp)[part]
            elif not (tp is dict or typing.get_origin(tp) is dict):
                raise ConfigError(f"'{'.'.join(path[:i])}' has no sub-keys")
            else:
                tp = typing.Any
            if i == len(path) - 1:
                node[part] = value
            else:
                child = node.get(part)
                if not isinstance(child, dict):
                    child = {}
                    node[part] = child
                node = child
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainRunConfig:
    """Read a JSON run config (or start from defaults) and apply overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file '{p}' not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file '{p}' is not valid JSON: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    return build(TrainRunConfig, data)


def dump_config(cfg: TrainRunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
