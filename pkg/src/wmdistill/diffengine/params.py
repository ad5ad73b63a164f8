"""Named parameter store, seeded initialisers and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

MAGIC = b"PKDM"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class NetworkParams:
    """Ordered map of parameter tensors with fixed names and shapes.

    One instance backs both directions of an invertible network, so the
    encoder and decoder always read identical weights.
    """

    def __init__(self, version: str = "1"):
        self.version = version
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(value, dtype=DEFAULT_DTYPE), requires_grad=requires_grad, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def assign(self, name: str, value: np.ndarray) -> None:
        """Overwrite values in place; the shape must not change."""
        t = self._tensors[name]
        value = np.asarray(value, dtype=t.dtype)
        if value.shape != t.shape:
            raise ValueError(f"shape of '{name}' is fixed at {t.shape}, got {value.shape}")
        t.data = value.copy()

    def set_trainable(self, trainable: bool, prefix: str = "") -> None:
        for name in self.names(prefix):
            self._tensors[name].requires_grad = trainable

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "NetworkParams":
        out = NetworkParams(self.version)
        for name, t in self._tensors.items():
            out.add(name, t.data.copy(), requires_grad=t.requires_grad)
        return out

    def merged(self, other: "NetworkParams", prefix: str) -> "NetworkParams":
        """A view holding this store's tensors plus ``other``'s under ``prefix``."""
        out = NetworkParams(self.version)
        out._tensors = dict(self._tensors)
        for name, t in other.items():
            out._tensors[prefix + name] = t
        return out

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._tensors[name].data).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    # -- serialisation -------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
        for name, t in self._tensors.items():
            arr = np.ascontiguousarray(t.data)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype(dt, copy=False).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NetworkParams":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a parameter checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} not supported")
        pos = 8
        out = cls()
        try:
            while pos < len(blob):
                (nlen,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                name = blob[pos : pos + nlen].decode("utf-8")
                pos += nlen
                tag, rank = struct.unpack_from("<BI", blob, pos)
                pos += 5
                dims = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                dt = _TAG_DTYPES[tag]
                count = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(dims)
                pos += count * dt.itemsize
                t = Tensor(arr.copy(), requires_grad=True, name=name)
                if name in out._tensors:
                    raise CheckpointError(f"duplicate record '{name}'")
                out._tensors[name] = t
        except (struct.error, KeyError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"truncated or corrupt checkpoint at byte {pos}") from exc
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NetworkParams":
        return cls.from_bytes(Path(path).read_bytes())


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)
