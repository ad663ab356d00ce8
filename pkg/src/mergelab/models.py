"""Model parameterization: named tensors, MLP encoders, classifier heads, checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ShapeError,
    StructureError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .numkit import Rng, two_sum

CHECKPOINT_MAGIC = b"MMLB"
CHECKPOINT_VERSION = 1

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


class ModelParams:
    """Ordered, named collection of float64 tensors; the unit of merging arithmetic.

    Two collections are *homologous* when their (name, shape) sequences are
    identical, order included. All parameter-space arithmetic requires it.
    Arrays that are already float64 and C-contiguous are referenced, not
    copied; use :meth:`copy` for an independent instance.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors, check: bool = True):
        if hasattr(tensors, "items"):
            items = tensors.items()
        else:
            items = tensors
        store: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in store:
                raise StructureError(f"duplicate layer name {name!r}")
            arr = np.ascontiguousarray(value, dtype=np.float64)
            if check and not np.isfinite(arr).all():
                raise ValueError(f"layer {name!r} contains non-finite values")
            store[name] = arr
        self._tensors = store

    # -- mapping-ish access -------------------------------------------------
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}:{v.shape}" for n, v in self.items())
        return f"ModelParams({parts})"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    # -- structure ----------------------------------------------------------
    def signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, v.shape) for n, v in self.items())

    def is_homologous(self, other: "ModelParams") -> bool:
        return self.signature() == other.signature()

    def check_homologous(self, other: "ModelParams", context: str = "") -> None:
        if self.is_homologous(other):
            return
        mine = dict(self.signature())
        theirs = dict(other.signature())
        problems = []
        for name in mine.keys() - theirs.keys():
            problems.append(f"missing layer {name!r}")
        for name in theirs.keys() - mine.keys():
            problems.append(f"unexpected layer {name!r}")
        for name in mine.keys() & theirs.keys():
            if mine[name] != theirs[name]:
                problems.append(f"layer {name!r} shape {theirs[name]} != {mine[name]}")
        if not problems:  # same sets, different order
            problems.append(f"layer order differs: {self.names()} vs {other.names()}")
        prefix = f"{context}: " if context else ""
        raise StructureError(prefix + "not homologous: " + "; ".join(sorted(problems)))

    # -- arithmetic helpers ---------------------------------------------------
    def copy(self) -> "ModelParams":
        return ModelParams([(n, v.copy()) for n, v in self.items()], check=False)

    def map(self, fn) -> "ModelParams":
        return ModelParams([(n, fn(v)) for n, v in self.items()], check=False)

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        self.check_homologous(other)
        return ModelParams(
            [(n, fn(v, other[n])) for n, v in self.items()], check=False
        )

    def flat(self) -> np.ndarray:
        if not self._tensors:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"flat vector of size {vec.size}, expected {self.size}")
        out, offset = [], 0
        for name, v in self.items():
            out.append((name, vec[offset : offset + v.size].reshape(v.shape).copy()))
            offset += v.size
        return ModelParams(out, check=False)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality (names, order, shapes, every value)."""
        if not self.is_homologous(other):
            return False
        return all(np.array_equal(v, other[n]) for n, v in self.items())

    def allclose(self, other: "ModelParams", rtol: float = 1e-9, atol: float = 0.0) -> bool:
        if not self.is_homologous(other):
            return False
        return all(np.allclose(v, other[n], rtol=rtol, atol=atol) for n, v in self.items())


# ---------------------------------------------------------------------------
# Encoder / head / task model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderArch:
    """MLP shape: input -> hidden layers (tanh) -> linear embedding layer."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    embed_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1


def _weight_name(i: int) -> str:
    return f"layer{i}.weight"


def _bias_name(i: int) -> str:
    return f"layer{i}.bias"


@dataclass(frozen=True)
class MlpEncoder:
    """tanh MLP with a linear final layer producing embed_dim outputs."""

    arch: EncoderArch
    params: ModelParams

    @classmethod
    def init_random(cls, arch: EncoderArch, rng: Rng) -> "MlpEncoder":
        """Gaussian init with std 1/sqrt(fan_in), zero biases."""
        tensors = []
        dims = arch.layer_dims
        for i in range(arch.num_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
            tensors.append((_weight_name(i), w))
            tensors.append((_bias_name(i), np.zeros(fan_out)))
        return cls(arch, ModelParams(tensors, check=False))

    @classmethod
    def from_params(cls, params: ModelParams) -> "MlpEncoder":
        """Rebuild the architecture from layer shapes."""
        dims: list[int] = []
        i = 0
        while _weight_name(i) in params:
            w = params[_weight_name(i)]
            if _bias_name(i) not in params:
                raise StructureError(f"encoder params missing {_bias_name(i)!r}")
            if not dims:
                dims.append(w.shape[0])
            elif dims[-1] != w.shape[0]:
                raise StructureError(
                    f"layer{i} input dim {w.shape[0]} != previous output {dims[-1]}"
                )
            dims.append(w.shape[1])
            i += 1
        if i == 0:
            raise StructureError("no encoder layers found (expected 'layer0.weight')")
        expected = 2 * i
        if len(params) != expected:
            extra = [n for n in params.names() if not n.startswith("layer")]
            raise StructureError(f"unexpected non-encoder layers: {extra}")
        arch = EncoderArch(dims[0], tuple(dims[1:-1]), dims[-1])
        return cls(arch, params)

    def with_params(self, params: ModelParams) -> "MlpEncoder":
        self.params.check_homologous(params, "encoder")
        return MlpEncoder(self.arch, params)

    def encode(self, x) -> np.ndarray:
        """Forward pass: tanh on all layers except the final (linear) one."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.arch.input_dim:
            raise ShapeError(
                f"encode: expected (n, {self.arch.input_dim}) inputs, got {h.shape}"
            )
        last = self.arch.num_layers - 1
        for i in range(self.arch.num_layers):
            h = h @ self.params[_weight_name(i)] + self.params[_bias_name(i)]
            if i != last:
                h = np.tanh(h)
        return h


@dataclass
class ClassifierHead:
    """Linear head: logits = emb @ weight (+ bias). bias=None is the no-bias mode."""

    weight: np.ndarray  # (embed_dim, num_classes)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"head weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[1],):
                raise ShapeError(
                    f"head bias shape {self.bias.shape} != ({self.weight.shape[1]},)"
                )

    @classmethod
    def init_random(cls, embed_dim: int, num_classes: int, rng: Rng, use_bias: bool = True):
        w = rng.normal((embed_dim, num_classes)) / np.sqrt(embed_dim)
        b = np.zeros(num_classes) if use_bias else None
        return cls(w, b)

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, emb: np.ndarray) -> np.ndarray:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != self.embed_dim:
            raise ShapeError(f"head: expected (n, {self.embed_dim}) embeddings, got {emb.shape}")
        out = emb @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass
class TaskModel:
    """Fine-tuned model for one task: encoder plus its classifier head."""

    task_id: int
    encoder: MlpEncoder
    head: ClassifierHead

    def __post_init__(self):
        if self.encoder.arch.embed_dim != self.head.embed_dim:
            raise ShapeError(
                f"encoder embed_dim {self.encoder.arch.embed_dim} != head {self.head.embed_dim}"
            )

    def logits(self, x) -> np.ndarray:
        return self.head.logits(self.encoder.encode(x))

    def predict(self, x) -> np.ndarray:
        """Argmax class per row; ties resolve to the lowest class index."""
        return np.argmax(self.logits(x), axis=1)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct under argmax with lowest-index tie-breaking."""
    pred = np.argmax(np.asarray(logits), axis=1)
    labels = np.asarray(labels)
    return float(np.count_nonzero(pred == labels)) / labels.size


# ---------------------------------------------------------------------------
# Task vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskVector:
    """Parameter-space offset of a fine-tuned model from the base model.

    ``residual`` holds the exact low-order remainder of the float subtraction
    (delta + residual == theta_t - theta_b in exact arithmetic), so adding a
    task vector back onto the base reconstructs the fine-tuned parameters
    bit-exactly.
    """

    delta: ModelParams
    residual: ModelParams = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.residual is None:
            object.__setattr__(self, "residual", self.delta.map(np.zeros_like))
        self.delta.check_homologous(self.residual, "task vector residual")


def task_vector(theta_t: ModelParams, theta_b: ModelParams) -> TaskVector:
    """Elementwise theta_t - theta_b with exact-reconstruction bookkeeping."""
    theta_b.check_homologous(theta_t, "task_vector")
    deltas, resids = [], []
    for name, t in theta_t.items():
        d, r = two_sum(t, -theta_b[name])
        deltas.append((name, d))
        resids.append((name, r))
    return TaskVector(ModelParams(deltas, check=False), ModelParams(resids, check=False))


def apply_task_vector(theta_b: ModelParams, tv: TaskVector, scale: float = 1.0) -> ModelParams:
    """theta_b + scale * delta, compensated so scale=1 round-trips bit-exactly."""
    theta_b.check_homologous(tv.delta, "apply_task_vector")
    out = []
    for name, b in theta_b.items():
        s, e = two_sum(b, scale * tv.delta[name])
        out.append((name, s + (e + scale * tv.residual[name])))
    return ModelParams(out, check=False)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the little-endian binary checkpoint format (magic 'MMLB', v1)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint` (bit-exact round trip)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf, path)
    magic = rd.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version}, supported: {CHECKPOINT_VERSION}"
        )
    count = rd.u32()
    tensors = []
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        shape = tuple(rd.u32() for _ in range(rank))
        n = 1
        for dim in shape:
            n *= dim
        values = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors.append((name, values))
    if rd.pos != len(buf):
        raise TruncatedCheckpointError(
            f"{path}: {len(buf) - rd.pos} trailing bytes after declared payload"
        )
    return ModelParams(tensors, check=False)


# ---------------------------------------------------------------------------
# Task-model <-> flat-params packing (head stored as extra named layers)
# ---------------------------------------------------------------------------


def pack_task_model(model: TaskModel) -> ModelParams:
    tensors = list(model.encoder.params.items())
    tensors.append((HEAD_WEIGHT, model.head.weight))
    if model.head.bias is not None:
        tensors.append((HEAD_BIAS, model.head.bias))
    return ModelParams(tensors, check=False)


def unpack_task_model(params: ModelParams, task_id: int) -> TaskModel:
    if HEAD_WEIGHT not in params:
        raise StructureError(f"checkpoint has no {HEAD_WEIGHT!r} layer")
    enc_tensors = [(n, v) for n, v in params.items() if n.startswith("layer")]
    encoder = MlpEncoder.from_params(ModelParams(enc_tensors, check=False))
    bias = params[HEAD_BIAS] if HEAD_BIAS in params else None
    head = ClassifierHead(params[HEAD_WEIGHT], bias)
    return TaskModel(task_id, encoder, head)


def encoder_part(params: ModelParams) -> ModelParams:
    """Strip head layers; merging operates on encoder parameters only."""
    return ModelParams([(n, v) for n, v in params.items() if n.startswith("layer")], check=False)
