"""Layers, Glorot initialisation, Adam and the binary checkpoint format.

Parameters live in a flat ``dict[str, np.ndarray]``; a forward pass wraps
them in fresh leaf tensors so each batch builds its own graph.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .ad import Tensor

Params = dict[str, np.ndarray]

LAYERNORM_EPS = 1e-5


@dataclass
class DenseLayer:
    weight: Tensor  # in × out
    bias: Tensor    # out

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ad.ShapeError(f"dense weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNorm:
    gain: Tensor
    shift: Tensor
    eps: float = LAYERNORM_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layernorm epsilon must be positive")
        if self.gain.shape != self.shift.shape or self.gain.ndim != 1:
            raise ad.ShapeError("layernorm gain/shift shapes differ")


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ad.ShapeError(f"dense layer expects {layer.in_dim} columns, got {x.shape}")
    return ad.add_bias(ad.matmul(x, layer.weight), layer.bias)


def layernorm_forward(ln: LayerNorm, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != ln.gain.shape[0]:
        raise ad.ShapeError(f"layernorm expects {ln.gain.shape[0]} columns, got {x.shape}")
    return ad.layernorm(x, ln.gain, ln.shift, ln.eps)


# ------------------------------------------------------------ initialisation

@dataclass(frozen=True)
class LayerSpec:
    """A named parameter group: ``kind`` is ``"dense"`` or ``"layernorm"``."""

    name: str
    kind: str
    in_dim: int
    out_dim: int = 0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(seed: int, specs: Sequence[LayerSpec]) -> Params:
    """Glorot-uniform weights, zero biases, unit LayerNorm gain, zero shift."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for spec in specs:
        if spec.in_dim <= 0 or (spec.kind == "dense" and spec.out_dim <= 0):
            raise ValueError(f"layer {spec.name!r} has non-positive dimensions")
        if spec.kind == "dense":
            params[f"{spec.name}.weight"] = glorot_uniform(rng, spec.in_dim, spec.out_dim)
            params[f"{spec.name}.bias"] = np.zeros(spec.out_dim)
        elif spec.kind == "layernorm":
            params[f"{spec.name}.gain"] = np.ones(spec.in_dim)
            params[f"{spec.name}.shift"] = np.zeros(spec.in_dim)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return params


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name!r} missing or mis-shaped")
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step = state.lr / bc1
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        tmp = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        # tmp <- step * m_hat / (sqrt(v_hat) + eps), all in one buffer
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp


# --------------------------------------------------------------- checkpoints

MAGIC = b"DTGV"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ParameterMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: Params
    hparams: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    header = json.dumps({"hparams": ckpt.hparams, "meta": ckpt.meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.blob)} (needed {self.pos + n})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a DTGV checkpoint (bad magic)")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    header = json.loads(r.take(r.u32()).decode())
    params: Params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return Checkpoint(params=params, hparams=header["hparams"], meta=header["meta"], version=version)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, _encode(ckpt))


def load_checkpoint(path, expected: Mapping[str, tuple[int, ...]] | None = None) -> Checkpoint:
    """Read a checkpoint; if ``expected`` maps names to shapes, enforce it."""
    with open(path, "rb") as fh:
        ckpt = _decode(fh.read())
    if expected is not None:
        got = {k: v.shape for k, v in ckpt.params.items()}
        if got != dict(expected):
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(got) & set(expected) if got[k] != tuple(expected[k]))
            raise ParameterMismatchError(f"missing={missing} unexpected={extra} wrong_shape={wrong}")
    return ckpt
