"""Message feature map, invertible encoder/decoder and the discriminator.

All spectrogram tensors are channels-last, (B, T, F, 2) with (re, im) on the
last axis, so the invertible blocks can convolve over the (T, F) plane.

Each invertible block is two affine couplings with a branch swap between
them: the host branch is rescaled and shifted by a subnet of the message
branch, then the message branch by a subnet of the updated host.  A subnet
is a small residual conv stack whose last layer starts at zero, so a fresh
network is the identity map.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import NetworkParams, Tensor
from .dsp import StftConfig

SYNC_CODE_DEFAULT = 0xA6


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 8
    channels: int = 32
    subnet_depth: int = 5
    kernel: int = 3
    n_bits: int = 16
    sync_len: int = 8
    embed_dim: int = 16
    msg_hidden: int = 64
    head_hidden: int = 128
    scale_max: float = 2.0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.channels < 1 or self.subnet_depth < 1:
            raise ValueError("channels and subnet_depth must be >= 1")
        if not 0 <= self.sync_len <= self.n_bits:
            raise ValueError("sync_len must lie in [0, n_bits]")
        if isinstance(self.stft, dict):
            object.__setattr__(self, "stft", StftConfig(**self.stft))

    @property
    def n_freq(self) -> int:
        return self.stft.n_bins

    @property
    def payload_len(self) -> int:
        return self.n_bits - self.sync_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "stft" in d and isinstance(d["stft"], dict):
            d["stft"] = StftConfig(**d["stft"])
        return cls(**d)


TEACHER_CONFIG = ModelConfig(n_blocks=8, channels=32)
STUDENT_CONFIG = ModelConfig(n_blocks=2, channels=16)


# ----------------------------------------------------------------------
# messages
# ----------------------------------------------------------------------

@dataclass
class Message:
    bits: np.ndarray
    sync_len: int = 8

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64).reshape(-1)
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("message bits must be 0 or 1")
        if not 0 <= self.sync_len <= self.bits.size:
            raise ValueError("sync_len longer than the message")

    @property
    def sync(self) -> np.ndarray:
        return self.bits[: self.sync_len]

    @property
    def payload(self) -> np.ndarray:
        return self.bits[self.sync_len :]

    @classmethod
    def from_payload(cls, payload: np.ndarray, sync_code: int = SYNC_CODE_DEFAULT, sync_len: int = 8) -> "Message":
        return cls(np.concatenate([int_to_bits(sync_code, sync_len), np.asarray(payload, dtype=np.int64)]), sync_len)


def int_to_bits(value: int, width: int) -> np.ndarray:
    if value < 0 or value >= 1 << width:
        raise ValueError(f"{value} does not fit in {width} bits")
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.int64)


def bits_to_int(bits) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.int64):
        out = (out << 1) | int(b)
    return out


def hex_to_bits(text: str, width: int) -> np.ndarray:
    """Parse a hex payload into exactly ``width`` bits (MSB first)."""
    cleaned = text.strip().lower()
    if cleaned.startswith("0x"):
        cleaned = cleaned[2:]
    if not cleaned or any(c not in "0123456789abcdef" for c in cleaned):
        raise ValueError(f"payload '{text}' is not a hex string")
    return int_to_bits(int(cleaned, 16), width)


def bits_to_hex(bits) -> str:
    bits = np.asarray(bits, dtype=np.int64)
    digits = max(1, -(-bits.size // 4))
    return format(bits_to_int(bits), f"0{digits}x")


# ----------------------------------------------------------------------
# parameter construction
# ----------------------------------------------------------------------

def _subnet_layers(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(in, out) channel pairs for one coupling subnet."""
    C = cfg.channels
    if cfg.subnet_depth == 1:
        return [(2, 4)]
    return [(2, C)] + [(C, C)] * (cfg.subnet_depth - 2) + [(C, 4)]


def init_params(cfg: ModelConfig, seed: int = 0, identity: bool = True) -> NetworkParams:
    """Seeded Kaiming-uniform weights.

    With ``identity`` (the default) the last conv of each coupling subnet is
    zero, which makes the untrained encoder an exact identity on the host.
    """
    rng = np.random.default_rng(seed)
    p = NetworkParams()
    K, E, Hm, F = cfg.n_bits, cfg.embed_dim, cfg.msg_hidden, cfg.n_freq
    p.add("msg.embed", rng.normal(0.0, 1.0, size=(2 * K, E)))
    p.add("msg.fc1.w", de.kaiming_uniform(rng, (E, Hm), E))
    p.add("msg.fc1.b", np.zeros(Hm))
    p.add("msg.fc2.w", de.kaiming_uniform(rng, (Hm, F), Hm))
    p.add("msg.fc2.b", np.zeros(F))
    k = cfg.kernel
    layers = _subnet_layers(cfg)
    for b in range(cfg.n_blocks):
        for branch in ("host", "msg"):
            for j, (cin, cout) in enumerate(layers):
                name = f"inn.{b}.{branch}.conv{j}"
                last = j == len(layers) - 1
                if last and identity:
                    w = np.zeros((k, k, cin, cout))
                else:
                    w = de.kaiming_uniform(rng, (k, k, cin, cout), k * k * cin)
                    if last:
                        # larger values make 8-block stacks numerically explosive in float32
                        w *= 0.02
                p.add(name + ".w", w)
                p.add(name + ".b", np.zeros(cout))
    Hh = cfg.head_hidden
    p.add("head.fc1.w", de.kaiming_uniform(rng, (F, Hh), F))
    p.add("head.fc1.b", np.zeros(Hh))
    p.add("head.fc2.w", de.kaiming_uniform(rng, (Hh, K), Hh) * 0.1)
    p.add("head.fc2.b", np.zeros(K))
    return p


def zero_coupling_outputs(params: NetworkParams) -> None:
    """Zero the last layer of every coupling subnet (restores the identity start)."""
    last = {}
    for name in params.names("inn."):
        stem = name.rsplit(".conv", 1)[0]
        idx = int(name.rsplit(".conv", 1)[1].split(".")[0])
        last[stem] = max(last.get(stem, -1), idx)
    for stem, idx in last.items():
        for suffix in ("w", "b"):
            n = f"{stem}.conv{idx}.{suffix}"
            params.assign(n, np.zeros(params[n].shape))


# ----------------------------------------------------------------------
# message feature map
# ----------------------------------------------------------------------

def message_vector(bits: np.ndarray, params: NetworkParams, cfg: ModelConfig) -> Tensor:
    """h in R^F per message: embed each (position, bit), two-layer MLP, average over bits."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
    K = params["msg.embed"].shape[0] // 2
    if bits.shape[1] != K:
        raise ValueError(f"message has {bits.shape[1]} bits, parameters expect {K}")
    idx = np.arange(K)[None, :] * 2 + bits
    e = de.embedding_lookup(params["msg.embed"], idx)  # (B, K, E)
    h = de.leaky_relu(de.linear(e, params["msg.fc1.w"], params["msg.fc1.b"]))
    h = de.linear(h, params["msg.fc2.w"], params["msg.fc2.b"])  # (B, K, F)
    return de.mean_over_axes(h, axes=1)  # (B, F)


def build_message_map(bits: np.ndarray, n_freq: int, n_frames: int, params: NetworkParams,
                      cfg: ModelConfig) -> Tensor:
    """Complex message map, (B, T, F, 2) with h copied to every frame and to both re and im."""
    h = message_vector(bits, params, cfg)
    if h.shape[-1] != n_freq:
        raise ValueError(f"message network produces {h.shape[-1]} bins, host has {n_freq}")
    B = h.shape[0]
    h4 = de.reshape(h, (B, 1, n_freq, 1))
    return de.broadcast_to(h4, (B, n_frames, n_freq, 2))


# ----------------------------------------------------------------------
# invertible blocks
# ----------------------------------------------------------------------

def _subnet(x: Tensor, params: NetworkParams, stem: str, depth: int) -> tuple[Tensor, Tensor]:
    # log-like compression: spectrogram values span several decades
    h = de.asinh(x)
    for j in range(depth):
        w, b = params[f"{stem}.conv{j}.w"], params[f"{stem}.conv{j}.b"]
        y = de.conv2d(h, w, b)
        if j == depth - 1:
            h = y
        elif j == 0:
            h = de.leaky_relu(y)
        else:
            h = h + de.leaky_relu(y)
    raw_scale, shift = de.split(h, 2, axis=-1)
    return raw_scale, shift


def _log_scale(raw: Tensor, smax: float) -> Tensor:
    return de.tanh(raw) * smax


def _couple(target: Tensor, cond: Tensor, params, stem, cfg) -> Tensor:
    raw, shift = _subnet(cond, params, stem, cfg.subnet_depth)
    return target * de.exp(_log_scale(raw, cfg.scale_max)) + shift


def _uncouple(target: Tensor, cond: Tensor, params, stem, cfg) -> Tensor:
    raw, shift = _subnet(cond, params, stem, cfg.subnet_depth)
    return (target - shift) * de.exp(-_log_scale(raw, cfg.scale_max))


def inn_forward(host: Tensor, msg: Tensor, params: NetworkParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    for b in range(cfg.n_blocks):
        host = _couple(host, msg, params, f"inn.{b}.host", cfg)
        msg = _couple(msg, host, params, f"inn.{b}.msg", cfg)
    return host, msg


def inn_inverse(host: Tensor, msg: Tensor, params: NetworkParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    for b in reversed(range(cfg.n_blocks)):
        msg = _uncouple(msg, host, params, f"inn.{b}.msg", cfg)
        host = _uncouple(host, msg, params, f"inn.{b}.host", cfg)
    return host, msg


def _check_spec(X: Tensor, cfg: ModelConfig) -> None:
    if X.ndim != 4 or X.shape[-1] != 2 or X.shape[2] != cfg.n_freq:
        raise ValueError(f"expected spectrogram tensor (B, T, {cfg.n_freq}, 2), got {X.shape}")


def encode(X: Tensor, M: Tensor, params: NetworkParams, cfg: ModelConfig) -> Tensor:
    """Watermarked host spectrogram X_w."""
    X, M = de.as_tensor(X), de.as_tensor(M)
    _check_spec(X, cfg)
    if X.shape != M.shape:
        raise ValueError(f"host {X.shape} and message map {M.shape} differ in shape")
    host, _ = inn_forward(X, M, params, cfg)
    return host


def decode(X_in: Tensor, params: NetworkParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Inverse pass on (X_in, X_in); returns the recovered message map and K logits."""
    X_in = de.as_tensor(X_in)
    _check_spec(X_in, cfg)
    _, M_hat = inn_inverse(X_in, X_in, params, cfg)
    reduced = de.mean_over_axes(M_hat, axes=(1, 3))  # (B, F)
    h = de.leaky_relu(de.linear(reduced, params["head.fc1.w"], params["head.fc1.b"]))
    logits = de.linear(h, params["head.fc2.w"], params["head.fc2.b"])
    return M_hat, logits


def bits_from_logits(logits) -> np.ndarray:
    """Hard decisions: sigmoid(logit) > 0.5, i.e. logit > 0."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (arr > 0).astype(np.int64)


# ----------------------------------------------------------------------
# discriminator
# ----------------------------------------------------------------------

DISC_CHANNELS = (8, 16, 32, 32)


def init_discriminator(seed: int = 0, channels: tuple[int, ...] = DISC_CHANNELS) -> NetworkParams:
    rng = np.random.default_rng(seed)
    p = NetworkParams()
    cin = 1
    for i, c in enumerate(channels):
        p.add(f"disc.conv{i}.w", de.kaiming_uniform(rng, (3, 3, cin, c), 9 * cin))
        p.add(f"disc.conv{i}.b", np.zeros(c))
        cin = c
    # small output layer keeps the untrained probability near 0.5
    p.add("disc.out.w", rng.uniform(-0.01, 0.01, size=(cin, 1)))
    p.add("disc.out.b", np.zeros(1))
    return p


def discriminate(spec: Tensor, params: NetworkParams) -> Tensor:
    """Probability (B,) that each input spectrogram (B, T, F, 2) is watermarked."""
    spec = de.as_tensor(spec)
    mag = de.complex_magnitude(spec[..., 0], spec[..., 1], eps=1e-12)
    h = de.log(mag + 1.0)
    B, T, F = h.shape
    h = de.reshape(h, (B, T, F, 1))
    i = 0
    while f"disc.conv{i}.w" in params:
        h = de.leaky_relu(de.conv2d(h, params[f"disc.conv{i}.w"], params[f"disc.conv{i}.b"], stride=2))
        i += 1
    pooled = de.mean_over_axes(h, axes=(1, 2))
    logit = de.linear(pooled, params["disc.out.w"], params["disc.out.b"])
    return de.reshape(de.sigmoid(logit), (B,))


# ----------------------------------------------------------------------
# checkpoints with a config sidecar
# ----------------------------------------------------------------------

def save_model(params: NetworkParams, cfg: ModelConfig, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    params.save(path)
    meta = {"model_config": cfg.to_dict(), "params_version": params.version}
    if extra:
        meta.update(extra)
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path: str | Path) -> tuple[NetworkParams, ModelConfig, dict]:
    path = Path(path)
    params = NetworkParams.load(path)
    meta = json.loads(sidecar(path).read_text())
    params.version = meta.get("params_version", params.version)
    return params, ModelConfig.from_dict(meta["model_config"]), meta


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# ----------------------------------------------------------------------
# encoder/decoder pair used for inference
# ----------------------------------------------------------------------

@dataclass
class WatermarkModel:
    """An encoder and a decoder, possibly with different configurations.

    A trained teacher uses one parameter store for both.  A distilled
    student pairs its own encoder with the teacher's decoder.
    """

    enc_params: NetworkParams
    enc_cfg: ModelConfig
    dec_params: NetworkParams
    dec_cfg: ModelConfig
    kind: str = "teacher"
    meta: dict = field(default_factory=dict)

    @classmethod
    def teacher(cls, params: NetworkParams, cfg: ModelConfig, meta: dict | None = None) -> "WatermarkModel":
        return cls(params, cfg, params, cfg, "teacher", dict(meta or {}))

    @property
    def stft(self) -> StftConfig:
        return self.dec_cfg.stft

    def embed_array(self, x: np.ndarray, bits: np.ndarray) -> np.ndarray:
        """Watermark (L,) or (B, L) audio with one message per row."""
        from .dsp import istft_tensor, stft_tensor

        x = np.asarray(x)
        single = x.ndim == 1
        xb = np.atleast_2d(x).astype(self.enc_params["msg.fc1.w"].dtype)
        bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
        if bits.shape[0] == 1 and xb.shape[0] > 1:
            bits = np.repeat(bits, xb.shape[0], axis=0)
        with de.no_grad():
            X = stft_tensor(Tensor(xb), self.enc_cfg.stft)
            M = build_message_map(bits, self.enc_cfg.n_freq, X.shape[1], self.enc_params, self.enc_cfg)
            xw = istft_tensor(encode(X, M, self.enc_params, self.enc_cfg), self.enc_cfg.stft, xb.shape[1])
        out = xw.data.astype(np.float64)
        return out[0] if single else out

    def logits_array(self, x: np.ndarray) -> np.ndarray:
        """Decoder logits, (K,) or (B, K)."""
        from .dsp import stft_tensor

        x = np.asarray(x)
        single = x.ndim == 1
        xb = np.atleast_2d(x).astype(self.dec_params["head.fc1.w"].dtype)
        if xb.shape[1] < self.stft.fft_size:
            raise ValueError(f"clip of {xb.shape[1]} samples is shorter than one {self.stft.fft_size}-sample frame")
        with de.no_grad():
            _, logits = decode(stft_tensor(Tensor(xb), self.stft), self.dec_params, self.dec_cfg)
        return logits.data[0] if single else logits.data

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = dict(self.meta)
        meta.update(extra or {})
        meta["kind"] = self.kind
        if self.kind == "teacher":
            save_model(self.enc_params, self.enc_cfg, path, meta)
            return
        meta["decoder_config"] = self.dec_cfg.to_dict()
        both = NetworkParams(self.enc_params.version)
        both = both.merged(self.enc_params, "enc.").merged(self.dec_params, "dec.")
        save_model(both, self.enc_cfg, path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "WatermarkModel":
        params, cfg, meta = load_model(path)
        kind = meta.get("kind", "teacher")
        if kind == "teacher":
            return cls.teacher(params, cfg, meta)
        enc, dec = NetworkParams(params.version), NetworkParams(params.version)
        for name, t in params.items():
            target, stem = (enc, name[4:]) if name.startswith("enc.") else (dec, name[4:])
            target.add(stem, t.data)
        return cls(enc, cfg, dec, ModelConfig.from_dict(meta["decoder_config"]), kind, meta)
