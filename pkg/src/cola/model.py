"""Per-voxel classifier with a detachable classification head.

The network is a small fully-connected backbone with rectified-linear
activations followed by one linear head. All arithmetic is 64-bit. Forward
and backward passes are written out explicitly so gradients can be checked
against finite differences, and the head can be replaced without touching
the backbone — the mechanism that carries a coarse pre-trained model onto a
target dataset with a different class count.

Checkpoints are a fixed little-endian binary format (magic ``COLA``) that
round-trips parameters bit-exactly and carries feature standardization
statistics plus training provenance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .seeding import rng_from

CHECKPOINT_MAGIC = b"COLA"
CHECKPOINT_VERSION = 1
CHECKPOINT_EXTENSION = ".colaptk"

DEFAULT_HIDDEN_WIDTHS = (64, 64, 32)


class InvalidWidth(DataError):
    """A layer width or class count is too small."""


class ShapeMismatch(DataError):
    """Inputs do not chain with the model's layer shapes."""


class UnknownHead(DataError):
    """A multi-head model has no head for the requested dataset."""


class CorruptCheckpoint(DataError):
    """Checkpoint bytes fail magic/version/length validation."""


@dataclass
class Model:
    """Backbone layers plus one linear head; parameters are float64 arrays."""

    backbone: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]

    @property
    def input_width(self) -> int:
        return self.backbone[0][0].shape[0] if self.backbone else self.head[0].shape[0]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.backbone)

    @property
    def n_classes(self) -> int:
        return self.head[0].shape[1]

    def copy(self) -> "Model":
        return Model(
            backbone=[(w.copy(), b.copy()) for w, b in self.backbone],
            head=(self.head[0].copy(), self.head[1].copy()),
        )

    def flat_params(self) -> list[np.ndarray]:
        """Parameter arrays in fixed traversal order (shared with Gradients)."""
        out: list[np.ndarray] = []
        for w, b in self.backbone:
            out += [w, b]
        out += [self.head[0], self.head[1]]
        return out

    def backbone_bytes(self) -> bytes:
        return b"".join(a.tobytes() for pair in self.backbone for a in pair)


@dataclass
class Gradients:
    """Shape-congruent mirror of a Model's parameters."""

    backbone: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]

    def flat_params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in self.backbone:
            out += [w, b]
        out += [self.head[0], self.head[1]]
        return out


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations retained for the backward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def penultimate(self) -> np.ndarray:
        return self.inputs[-1]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_head(hidden: int, n_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = rng_from(seed, "head")
    return _glorot(rng, hidden, n_classes), np.zeros(n_classes)


def init_model(
    hidden_widths=DEFAULT_HIDDEN_WIDTHS,
    n_classes: int = 8,
    seed: int = 0,
    input_width: int = 14,
) -> Model:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    Each layer draws from its own derived seed, so the head stream is
    independent of the backbone — a head re-initialized by swap_head with the
    same seed is identical to this head.
    """
    widths = tuple(int(w) for w in hidden_widths)
    if any(w < 1 for w in widths) or input_width < 1:
        raise InvalidWidth(f"layer widths must be >= 1, got {widths}")
    if n_classes < 2:
        raise InvalidWidth(f"need at least 2 classes, got {n_classes}")
    backbone = []
    fan_in = input_width
    for i, width in enumerate(widths):
        rng = rng_from(seed, "backbone", i)
        backbone.append((_glorot(rng, fan_in, width), np.zeros(width)))
        fan_in = width
    return Model(backbone=backbone, head=_init_head(fan_in, n_classes, seed))


def forward(model: Model, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Affine+relu chain through the backbone, then the affine head."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise ShapeMismatch(
            f"features have width {x.shape[-1] if x.ndim == 2 else '?'},"
            f" model expects {model.input_width}"
        )
    inputs = [x]
    preacts = []
    h = x
    for w, b in model.backbone:
        z = h @ w + b
        preacts.append(z)
        h = np.maximum(z, 0.0)
        inputs.append(h)
    logits = h @ model.head[0] + model.head[1]
    return logits, ForwardCache(inputs=inputs, preacts=preacts)


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray) -> Gradients:
    """Analytic parameter gradients for the loss whose logit gradient is given."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (cache.inputs[0].shape[0], model.n_classes):
        raise ShapeMismatch(f"grad_logits shape {g.shape} does not match forward output")
    if len(cache.preacts) != len(model.backbone):
        raise ShapeMismatch("cache does not match the model's layer count")
    dw_head = cache.penultimate.T @ g
    db_head = g.sum(axis=0)
    delta = g @ model.head[0].T
    backbone_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.backbone)
    for layer in range(len(model.backbone) - 1, -1, -1):
        dz = delta * (cache.preacts[layer] > 0.0)
        backbone_grads[layer] = (cache.inputs[layer].T @ dz, dz.sum(axis=0))
        if layer > 0:
            delta = dz @ model.backbone[layer][0].T
    return Gradients(backbone=backbone_grads, head=(dw_head, db_head))


def swap_head(model: Model, n_new_classes: int, seed: int) -> Model:
    """Fresh head for a new class count; backbone values bit-identical."""
    if n_new_classes < 2:
        raise InvalidWidth(f"need at least 2 classes, got {n_new_classes}")
    hidden = model.backbone[-1][0].shape[1] if model.backbone else model.input_width
    return Model(
        backbone=[(w.copy(), b.copy()) for w, b in model.backbone],
        head=_init_head(hidden, n_new_classes, seed),
    )


def extract_penultimate(model: Model, features: np.ndarray) -> np.ndarray:
    """Activations entering the head; the embedding used for feature analysis."""
    _, cache = forward(model, features)
    return cache.penultimate


@dataclass
class MHModel:
    """Shared backbone with one classification head per source dataset."""

    backbone: list[tuple[np.ndarray, np.ndarray]]
    heads: dict[str, tuple[np.ndarray, np.ndarray]]

    def as_model(self, dataset_name: str) -> Model:
        if dataset_name not in self.heads:
            raise UnknownHead(f"no head for dataset {dataset_name!r}")
        return Model(backbone=self.backbone, head=self.heads[dataset_name])

    def flat_params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in self.backbone:
            out += [w, b]
        for name in sorted(self.heads):
            out += [self.heads[name][0], self.heads[name][1]]
        return out

    def copy(self) -> "MHModel":
        return MHModel(
            backbone=[(w.copy(), b.copy()) for w, b in self.backbone],
            heads={k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
        )


def init_mh_model(
    hidden_widths,
    head_classes: dict[str, int],
    seed: int,
    input_width: int = 14,
) -> MHModel:
    """One Glorot head per dataset name on a shared backbone."""
    base = init_model(hidden_widths, n_classes=2, seed=seed, input_width=input_width)
    hidden = base.backbone[-1][0].shape[1]
    heads = {}
    for name in sorted(head_classes):
        n = head_classes[name]
        if n < 2:
            raise InvalidWidth(f"head {name!r} needs at least 2 classes")
        rng = rng_from(seed, "head", name)
        heads[name] = (_glorot(rng, hidden, n), np.zeros(n))
    return MHModel(backbone=base.backbone, heads=heads)


def mh_forward(mh: MHModel, features: np.ndarray, dataset_name: str):
    """Forward through the shared backbone and the named head."""
    return forward(mh.as_model(dataset_name), features)


@dataclass
class CheckpointStats:
    """Feature standardization plus provenance carried inside a checkpoint."""

    variant: str
    feature_mean: np.ndarray
    feature_std: np.ndarray
    corpus_digest: str = ""
    seed: int = 0

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_std


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string field too long for checkpoint format")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f64_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(model: Model, stats: CheckpointStats) -> bytes:
    """Serialize model + stats; load_checkpoint inverts this bit-exactly."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(stats.variant)]
    parts.append(struct.pack("<I", model.input_width))
    parts.append(struct.pack("<I", len(model.backbone)))
    for w, _ in model.backbone:
        parts.append(struct.pack("<I", w.shape[1]))
    parts.append(struct.pack("<I", model.n_classes))
    for w, b in model.backbone:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.head[0], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.head[1], dtype="<f8").tobytes())
    mean = np.asarray(stats.feature_mean, dtype="<f8").ravel()
    std = np.asarray(stats.feature_std, dtype="<f8").ravel()
    if mean.shape != std.shape:
        raise ValueError("feature mean/std shapes differ")
    parts.append(struct.pack("<I", mean.shape[0]))
    parts.append(mean.tobytes())
    parts.append(std.tobytes())
    parts.append(_pack_str(stats.corpus_digest))
    parts.append(struct.pack("<Q", stats.seed & 0xFFFFFFFFFFFFFFFF))
    return b"".join(parts)


def load_checkpoint(data: bytes) -> tuple[Model, CheckpointStats]:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    variant = r.string()
    input_width = r.u32()
    n_backbone = r.u32()
    if input_width < 1 or n_backbone > 1024:
        raise CorruptCheckpoint("implausible layer header")
    widths = [r.u32() for _ in range(n_backbone)]
    n_classes = r.u32()
    if n_classes < 2 or any(w < 1 for w in widths):
        raise CorruptCheckpoint("implausible layer widths")
    backbone = []
    fan_in = input_width
    for width in widths:
        w = r.f64_array((fan_in, width))
        b = r.f64_array((width,))
        backbone.append((w, b))
        fan_in = width
    head = (r.f64_array((fan_in, n_classes)), r.f64_array((n_classes,)))
    feat_dim = r.u32()
    if feat_dim > 1_000_000:
        raise CorruptCheckpoint("implausible feature dimension")
    mean = r.f64_array((feat_dim,))
    std = r.f64_array((feat_dim,))
    digest = r.string()
    seed = r.u64()
    if r.pos != len(data):
        raise CorruptCheckpoint(f"{len(data) - r.pos} trailing bytes")
    return Model(backbone=backbone, head=head), CheckpointStats(
        variant=variant, feature_mean=mean, feature_std=std, corpus_digest=digest, seed=seed
    )
