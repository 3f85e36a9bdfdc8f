"""Reference text encoder: mean-pooled token embeddings, tanh, linear projection.

Parameters live in float64 but always hold float32-representable values, so
checkpoints (float32 on disk) round-trip bitwise. Call
:meth:`EncoderModel.snap_to_storage` after any in-place update.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import kernels
from .corpus import PAD_ID, TokenSequence
from .io import atomic_write_bytes

Head = Literal["fact", "decision"]

MAGIC = b"DUET"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 64
    proj_dim: int = 256
    seed: int = 0
    share_heads: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _snap(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


@dataclass
class EncoderModel:
    config: EncoderConfig
    E: np.ndarray
    W_F: np.ndarray
    b_F: np.ndarray
    W_D_sep: np.ndarray | None = None
    b_D_sep: np.ndarray | None = None

    @property
    def share_heads(self) -> bool:
        return self.W_D_sep is None

    @property
    def W_D(self) -> np.ndarray:
        return self.W_F if self.share_heads else self.W_D_sep

    @property
    def b_D(self) -> np.ndarray:
        return self.b_F if self.share_heads else self.b_D_sep

    def projection(self, head: Head) -> tuple[np.ndarray, np.ndarray]:
        if head == "fact":
            return self.W_F, self.b_F
        if head == "decision":
            return self.W_D, self.b_D
        raise ValueError(f"unknown head {head!r}")

    def parameters(self) -> dict[str, np.ndarray]:
        """Distinct parameter storage by name (shared heads appear once)."""
        params = {"E": self.E, "W_F": self.W_F, "b_F": self.b_F}
        if not self.share_heads:
            params["W_D"] = self.W_D_sep
            params["b_D"] = self.b_D_sep
        return params

    def snap_to_storage(self) -> None:
        for arr in self.parameters().values():
            arr[...] = _snap(arr)

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            config=self.config,
            E=self.E.copy(),
            W_F=self.W_F.copy(),
            b_F=self.b_F.copy(),
            W_D_sep=None if self.W_D_sep is None else self.W_D_sep.copy(),
            b_D_sep=None if self.b_D_sep is None else self.b_D_sep.copy(),
        )


@dataclass
class EncoderGradients:
    """Additive gradient accumulators, keyed like ``EncoderModel.parameters()``."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: EncoderModel) -> "EncoderGradients":
        return cls({k: np.zeros_like(v) for k, v in model.parameters().items()})

    def projection(self, head: Head, share_heads: bool) -> tuple[np.ndarray, np.ndarray]:
        if head == "fact" or share_heads:
            return self.arrays["W_F"], self.arrays["b_F"]
        return self.arrays["W_D"], self.arrays["b_D"]

    def zero(self) -> None:
        for a in self.arrays.values():
            a.fill(0.0)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: EncoderConfig) -> EncoderModel:
    rng = np.random.default_rng(config.seed)
    V, d, p = config.vocab_size, config.embed_dim, config.proj_dim
    E = _snap(rng.uniform(-xavier_bound(V, d), xavier_bound(V, d), size=(V, d)))
    W_F = _snap(rng.uniform(-xavier_bound(d, p), xavier_bound(d, p), size=(d, p)))
    b_F = np.zeros(p)
    W_D = b_D = None
    if not config.share_heads:
        W_D = _snap(rng.uniform(-xavier_bound(d, p), xavier_bound(d, p), size=(d, p)))
        b_D = np.zeros(p)
    return EncoderModel(config, E, W_F, b_F, W_D, b_D)


@dataclass
class EncodeCache:
    ids: np.ndarray
    offsets: np.ndarray
    activations: np.ndarray  # tanh(mean pooled), one row per sequence


def _flatten(seqs: Sequence[TokenSequence], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    parts = []
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    for k, seq in enumerate(seqs):
        ids = np.asarray(seq.ids, dtype=np.int64)
        ids = ids[ids != PAD_ID]
        if ids.size == 0:
            raise ValueError(f"sequence {k} has no non-PAD tokens")
        if ids.min() < 0 or ids.max() >= vocab_size:
            raise ValueError(f"sequence {k} has token ids outside [0, {vocab_size})")
        parts.append(ids)
        offsets[k + 1] = offsets[k] + ids.size
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return flat, offsets


def encode_batch(model: EncoderModel, seqs: Sequence[TokenSequence], head: Head) -> tuple[np.ndarray, EncodeCache]:
    """Encode many sequences; returns ``(H, cache)`` with one row of H per sequence."""
    W, b = model.projection(head)
    ids, offsets = _flatten(seqs, model.config.vocab_size)
    pooled = kernels.pool_forward(model.E, ids, offsets)
    act = np.tanh(pooled)
    return act @ W + b, EncodeCache(ids, offsets, act)


def encode_batch_backward(model: EncoderModel, cache: EncodeCache, head: Head,
                          upstream: np.ndarray, grads: EncoderGradients) -> None:
    W, _ = model.projection(head)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cache.activations.shape[0], model.config.proj_dim):
        raise ValueError(f"upstream shape {upstream.shape} does not match {(cache.activations.shape[0], model.config.proj_dim)}")
    gW, gb = grads.projection(head, model.share_heads)
    gW += cache.activations.T @ upstream
    gb += upstream.sum(axis=0)
    g_pooled = (upstream @ W.T) * (1.0 - cache.activations**2)
    kernels.pool_backward(np.ascontiguousarray(g_pooled), cache.ids, cache.offsets, grads.arrays["E"])


def encode(model: EncoderModel, seq: TokenSequence, head: Head = "fact") -> np.ndarray:
    H, _ = encode_batch(model, [seq], head)
    return H[0]


def encode_backward(model: EncoderModel, seq: TokenSequence, head: Head, upstream: np.ndarray,
                    grads: EncoderGradients) -> None:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (model.config.proj_dim,):
        raise ValueError(f"upstream must have {model.config.proj_dim} entries")
    _, cache = encode_batch(model, [seq], head)
    encode_batch_backward(model, cache, head, upstream[None, :], grads)


# -- checkpoints ---------------------------------------------------------------
#
# layout: b"DUET" | u32 version | u32 len + JSON config | u32 tensor count |
#         per tensor: u16 name len, name, u32 ndim, u32 dims..., <f4 data


def checkpoint_bytes(model: EncoderModel, extra: dict[str, np.ndarray] | None = None,
                     meta: dict | None = None) -> bytes:
    tensors = dict(model.parameters())
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise ValueError(f"duplicate tensor name {name}")
        tensors[name] = arr
    config = {"encoder": asdict(model.config), "meta": meta or {}}
    blob = json.dumps(config, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name} has non-finite entries")
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model: EncoderModel, path: str | Path, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, extra, meta))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointCorruptError("checkpoint is truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[EncoderModel, dict[str, np.ndarray], dict]:
    """Load a checkpoint; returns ``(model, extra_tensors, meta)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (nblob,) = r.unpack("<I")
    try:
        config = json.loads(r.take(nblob))
        enc_cfg = EncoderConfig(**config["encoder"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: bad config block ({exc})") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointCorruptError(f"{path}: trailing bytes after tensors")
    try:
        model = EncoderModel(
            config=enc_cfg,
            E=tensors.pop("E"),
            W_F=tensors.pop("W_F"),
            b_F=tensors.pop("b_F"),
            W_D_sep=None if enc_cfg.share_heads else tensors.pop("W_D"),
            b_D_sep=None if enc_cfg.share_heads else tensors.pop("b_D"),
        )
    except KeyError as exc:
        raise CheckpointCorruptError(f"{path}: missing tensor {exc}") from exc
    V, d, p = enc_cfg.vocab_size, enc_cfg.embed_dim, enc_cfg.proj_dim
    expected = {"E": (V, d), "W_F": (d, p), "b_F": (p,), "W_D": (d, p), "b_D": (p,)}
    for name, arr in model.parameters().items():
        if arr.shape != expected[name]:
            raise CheckpointCorruptError(f"{path}: tensor {name} has shape {arr.shape}, expected {expected[name]}")
    return model, tensors, config.get("meta", {})


def load_checkpoint(path: str | Path) -> EncoderModel:
    return read_checkpoint(path)[0]
