"""Toy siamese networks: encoder, projector, optional predictor, EMA target.

Parameters live in ordered dicts keyed by dotted names, so declaration order is
stable and doubles as the checkpoint order. The online branch holds
:class:`~softcontrast.tensor.Tensor` leaves that require grad; the target
branch holds plain arrays and is only ever changed by :func:`ema_update`.

Checkpoint layout (all integers little-endian)::

    4s   magic "SCE1"
    u32  format version (1)
    32s  sha256 of the canonical spec JSON
    u32  n, then n bytes: spec JSON (utf-8)
    u32  n, then n bytes: metadata JSON (utf-8)
    u32  tensor count
    per tensor:
        u16 n, n bytes name (utf-8)
        u8  ndim, ndim × u32 extents
        prod(extents) × f64 values, row-major
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    affine_normalize,
    batch_norm,
    conv2d,
    l2_normalize_rows,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
)

BN_CHOICES = ("none", "hidden", "all")
INPUT_NORMS = ("none", "standardize")
# keeps near-constant channels (flat crops, static difference frames) from being blown up
INPUT_NORM_EPS = 0.05
BN_MOMENTUM = 0.1
MAGIC = b"SCE1"
FORMAT_VERSION = 1


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderSpec:
    """``kind="mlp"``: flatten then ``widths`` ReLU layers.
    ``kind="cnn"``: one padded 3×3 ReLU convolution per entry of ``channels``,
    with matching ``strides``, then global average pooling.

    ``input_norm="standardize"`` shifts and scales every channel of every
    input to zero mean and unit spread before the first layer (see
    :func:`standardize_inputs`).
    """

    kind: str = "cnn"
    input_shape: tuple[int, ...] = (24, 24, 3)
    widths: tuple[int, ...] = (256,)
    channels: tuple[int, ...] = (32, 64)
    strides: tuple[int, ...] = (2, 2)
    input_norm: str = "none"

    @property
    def out_dim(self) -> int:
        return self.channels[-1] if self.kind == "cnn" else self.widths[-1]


@dataclass
class HeadSpec:
    layers: int = 2
    hidden_dim: int = 128
    out_dim: int = 64
    bn: str = "hidden"


@dataclass
class NetworkSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projector: HeadSpec = field(default_factory=HeadSpec)
    predictor: Optional[HeadSpec] = None

    def validate(self) -> None:
        enc = self.encoder
        if enc.kind not in ("mlp", "cnn"):
            raise SpecError(f"unknown encoder kind {enc.kind!r}")
        if any(d < 1 for d in enc.input_shape):
            raise SpecError(f"invalid input shape {enc.input_shape}")
        if enc.kind == "cnn" and len(enc.input_shape) != 3:
            raise SpecError("cnn encoder needs an H×W×C input shape")
        if enc.kind == "cnn" and (not enc.channels or len(enc.channels) != len(enc.strides)):
            raise SpecError("cnn encoder needs one stride per conv layer")
        if enc.kind == "cnn" and min(enc.strides) < 1:
            raise SpecError("conv strides must be >= 1")
        if enc.input_norm not in INPUT_NORMS:
            raise SpecError(f"input_norm must be one of {INPUT_NORMS}, got {enc.input_norm!r}")
        if enc.kind == "mlp" and not enc.widths:
            raise SpecError("mlp encoder needs at least one width")
        heads = [self.projector] + ([self.predictor] if self.predictor else [])
        for head in heads:
            if head.layers < 1 or head.out_dim < 1 or head.hidden_dim < 1:
                raise SpecError(f"invalid head {head}")
            if head.bn not in BN_CHOICES:
                raise SpecError(f"bn placement must be one of {BN_CHOICES}, got {head.bn!r}")
        if self.predictor and self.predictor.out_dim != self.projector.out_dim:
            raise SpecError("predictor output dim must equal projector output dim")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> NetworkSpec:
        raw = json.loads(text)
        enc = raw["encoder"]
        enc = EncoderSpec(enc["kind"], tuple(enc["input_shape"]), tuple(enc["widths"]),
                          tuple(enc["channels"]), tuple(enc["strides"]), enc.get("input_norm", "none"))
        pred = HeadSpec(**raw["predictor"]) if raw.get("predictor") else None
        return cls(enc, HeadSpec(**raw["projector"]), pred)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def _layer_plan(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) for every trainable parameter, in declaration order."""
    plan: list[tuple[str, tuple[int, ...]]] = []
    enc = spec.encoder
    if enc.kind == "cnn":
        c_in = enc.input_shape[2]
        for i, c_out in enumerate(enc.channels):
            plan += [(f"encoder.conv{i}.weight", (9 * c_in, c_out)), (f"encoder.conv{i}.bias", (c_out,))]
            c_in = c_out
    else:
        d_in = int(np.prod(enc.input_shape))
        for i, d_out in enumerate(enc.widths):
            plan += [(f"encoder.fc{i}.weight", (d_in, d_out)), (f"encoder.fc{i}.bias", (d_out,))]
            d_in = d_out
    heads = [("projector", spec.projector, enc.out_dim)]
    if spec.predictor:
        heads.append(("predictor", spec.predictor, spec.projector.out_dim))
    for prefix, head, d_in in heads:
        for i in range(head.layers):
            last = i == head.layers - 1
            d_out = head.out_dim if last else head.hidden_dim
            plan += [(f"{prefix}.fc{i}.weight", (d_in, d_out)), (f"{prefix}.fc{i}.bias", (d_out,))]
            if (not last and head.bn != "none") or (last and head.bn == "all"):
                plan += [(f"{prefix}.bn{i}.weight", (d_out,)), (f"{prefix}.bn{i}.bias", (d_out,))]
            d_in = d_out
    return plan


def _buffer_plan(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    plan = []
    for name, shape in _layer_plan(spec):
        if ".bn" in name and name.endswith(".weight"):
            base = name[: -len(".weight")]
            plan += [(f"{base}.running_mean", shape), (f"{base}.running_var", shape)]
    return plan


@dataclass
class SiameseModel:
    spec: NetworkSpec
    online: dict[str, Tensor]
    target: dict[str, np.ndarray]
    online_buffers: dict[str, np.ndarray]
    target_buffers: dict[str, np.ndarray]

    def parameters(self) -> list[Tensor]:
        return list(self.online.values())

    def zero_grad(self) -> None:
        for p in self.online.values():
            p.grad = None


def init(spec: NetworkSpec, seed: int) -> SiameseModel:
    """Fan-in scaled uniform init; the target starts as an exact copy."""
    spec.validate()
    rng = np.random.default_rng([seed, 0x5EED])
    online: dict[str, Tensor] = {}
    for name, shape in _layer_plan(spec):
        if ".bn" in name:
            value = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        elif name.endswith(".weight"):
            bound = np.sqrt(6.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = online[name[: -len(".bias")] + ".weight"].shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        online[name] = Tensor(value, requires_grad=True, name=name)
    buffers = {}
    for name, shape in _buffer_plan(spec):
        buffers[name] = np.zeros(shape) if name.endswith("running_mean") else np.ones(shape)
    target = {k: v.data.copy() for k, v in online.items() if not k.startswith("predictor.")}
    target_buffers = {k: v.copy() for k, v in buffers.items() if not k.startswith("predictor.")}
    return SiameseModel(spec, online, target, buffers, target_buffers)


# forward passes -------------------------------------------------------------

def _as_input(spec: NetworkSpec, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = tuple(spec.encoder.input_shape)
    if x.ndim < 2 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input batch shape {x.shape} does not match B×{expected}")
    return x


def standardize_inputs(x: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel ``(x - mean) / (std + INPUT_NORM_EPS)`` over the spatial axes."""
    axes = tuple(range(1, x.ndim - 1))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return (x - mu) / (sd + INPUT_NORM_EPS)


def _encode(spec: NetworkSpec, params, x: Tensor) -> Tensor:
    enc = spec.encoder
    if enc.input_norm == "standardize":
        x = Tensor(standardize_inputs(x.data))
    if enc.kind == "cnn":
        h = x
        for i in range(len(enc.channels)):
            h = relu(conv2d(h, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"],
                            stride=enc.strides[i], pad=1))
        return mean(h, axis=(1, 2))
    h = reshape(x, (x.shape[0], -1))
    for i in range(len(enc.widths)):
        h = relu(add(matmul(h, params[f"encoder.fc{i}.weight"]), params[f"encoder.fc{i}.bias"]))
    return h


def _head(prefix: str, head: HeadSpec, params, buffers, h: Tensor, train: bool,
          update_stats: bool) -> Tensor:
    for i in range(head.layers):
        last = i == head.layers - 1
        h = add(matmul(h, params[f"{prefix}.fc{i}.weight"]), params[f"{prefix}.fc{i}.bias"])
        bn_key = f"{prefix}.bn{i}"
        if f"{bn_key}.weight" in params:
            gamma, beta = params[f"{bn_key}.weight"], params[f"{bn_key}.bias"]
            if train and h.shape[0] > 1:
                h, mu, var = batch_norm(h, gamma, beta)
                if update_stats:
                    n = h.shape[0]
                    rm, rv = buffers[f"{bn_key}.running_mean"], buffers[f"{bn_key}.running_var"]
                    rm *= 1 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mu
                    rv *= 1 - BN_MOMENTUM
                    rv += BN_MOMENTUM * var * n / (n - 1)
            else:
                h = affine_normalize(h, buffers[f"{bn_key}.running_mean"],
                                     buffers[f"{bn_key}.running_var"], gamma, beta)
        if not last:
            h = relu(h)
    return h


def forward_online(model: SiameseModel, x, train: bool = True) -> Tensor:
    """Unit-norm embeddings ``h(g(f(x)))`` from the online branch, gradient tracked."""
    spec = model.spec
    x = _as_input(spec, x)
    h = _encode(spec, model.online, x)
    z = _head("projector", spec.projector, model.online, model.online_buffers, h, train, train)
    if spec.predictor:
        z = _head("predictor", spec.predictor, model.online, model.online_buffers, z, train, train)
    return l2_normalize_rows(z)


def forward_target(model: SiameseModel, x, train: bool = True) -> Tensor:
    """Unit-norm embeddings ``g(f(x))`` from the target branch, detached."""
    spec = model.spec
    x = _as_input(spec, x)
    params = {k: Tensor(v) for k, v in model.target.items()}
    with no_grad():
        h = _encode(spec, params, Tensor(x.data))
        z = _head("projector", spec.projector, params, model.target_buffers, h, train, False)
        out = l2_normalize_rows(z)
    return Tensor(out.data)


def encode(model: SiameseModel, x, branch: str = "online") -> np.ndarray:
    """Raw encoder features (no projector) as an array, without graph recording."""
    spec = model.spec
    x = _as_input(spec, x)
    if branch == "online":
        params = {k: Tensor(v.data) for k, v in model.online.items()}
    elif branch == "target":
        params = {k: Tensor(v) for k, v in model.target.items()}
    else:
        raise ValueError(f"branch must be 'online' or 'target', got {branch!r}")
    with no_grad():
        return _encode(spec, params, Tensor(x.data)).data


def ema_update(model: SiameseModel, m: float) -> None:
    """``target <- m·target + (1-m)·online`` for weights and BN statistics."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for name, t in model.target.items():
        t *= m
        t += (1.0 - m) * model.online[name].data
    for name, t in model.target_buffers.items():
        t *= m
        t += (1.0 - m) * model.online_buffers[name]


# checkpoints ----------------------------------------------------------------

def _model_tensors(model: SiameseModel) -> list[tuple[str, np.ndarray]]:
    out = [(f"online/{k}", v.data) for k, v in model.online.items()]
    out += [(f"target/{k}", v) for k, v in model.target.items()]
    out += [(f"online_buffer/{k}", v) for k, v in model.online_buffers.items()]
    out += [(f"target_buffer/{k}", v) for k, v in model.target_buffers.items()]
    return out


def save_checkpoint(path, model: SiameseModel, extra: Optional[dict[str, np.ndarray]] = None,
                    metadata: Optional[dict] = None) -> None:
    spec_json = model.spec.to_json().encode()
    meta_json = json.dumps(metadata or {}, sort_keys=True).encode()
    tensors = _model_tensors(model) + [(f"extra/{k}", np.asarray(v, dtype=np.float64))
                                       for k, v in (extra or {}).items()]
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), model.spec.digest(),
              struct.pack("<I", len(spec_json)), spec_json,
              struct.pack("<I", len(meta_json)), meta_json,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[SiameseModel, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; returns (model, extra tensors, metadata)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = take(32)
    (n,) = struct.unpack("<I", take(4))
    spec_json = take(n).decode()
    spec = NetworkSpec.from_json(spec_json)
    if spec.digest() != digest:
        raise CheckpointError(f"{path}: spec digest mismatch")
    (n,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")

    model = init(spec, seed=0)
    for group, store in (("online", None), ("target", model.target),
                         ("online_buffer", model.online_buffers), ("target_buffer", model.target_buffers)):
        names = model.online.keys() if group == "online" else store.keys()
        for k in names:
            key = f"{group}/{k}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if group == "online":
                model.online[k].data = tensors[key].copy()
            else:
                store[k][...] = tensors[key]
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, extra, metadata
