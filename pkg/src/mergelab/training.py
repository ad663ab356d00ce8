"""From-scratch optimization: manual backprop, Adam, fine-tuning, MTL, grad checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .models import (
    ClassifierHead,
    EncoderArch,
    MlpEncoder,
    ModelParams,
    TaskModel,
    accuracy_from_logits,
)
from .numkit import Rng, derive_seed, softmax_rows
from .synthdata import TaskDataset

PRETEXT_TASK_ID = -1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamState:
    """First/second moment estimates, homologous with the optimized parameters."""

    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def init_for(cls, params: ModelParams) -> "AdamState":
        return cls(m=params.map(np.zeros_like), v=params.map(np.zeros_like))


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction."""
    params.check_homologous(grads, "adam_step grads")
    params.check_homologous(state.m, "adam_step state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# Cross-entropy forward/backward
# ---------------------------------------------------------------------------


def _forward_activations(encoder: MlpEncoder, x: np.ndarray) -> list[np.ndarray]:
    """All layer outputs [x, h1, ..., emb]; tanh everywhere but the last layer."""
    acts = [x]
    h = x
    last = encoder.arch.num_layers - 1
    for i in range(encoder.arch.num_layers):
        h = h @ encoder.params[f"layer{i}.weight"] + encoder.params[f"layer{i}.bias"]
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(labels.size), labels].mean())


def _backward_from_dlogits(
    encoder: MlpEncoder,
    head: ClassifierHead,
    acts: list[np.ndarray],
    dlogits: np.ndarray,
) -> ModelParams:
    """Gradients of a loss whose logit gradient is `dlogits` (already /n)."""
    emb = acts[-1]
    grads: list[tuple[str, np.ndarray]] = []
    dh = dlogits @ head.weight.T
    last = encoder.arch.num_layers - 1
    enc_grads: list[tuple[str, np.ndarray]] = []
    for i in range(last, -1, -1):
        h_out = acts[i + 1]
        dz = dh if i == last else dh * (1.0 - h_out * h_out)  # tanh' = 1 - tanh^2
        enc_grads.append((f"layer{i}.bias", dz.sum(axis=0)))
        enc_grads.append((f"layer{i}.weight", acts[i].T @ dz))
        if i > 0:
            dh = dz @ encoder.params[f"layer{i}.weight"].T
    grads.extend(reversed(enc_grads))
    grads.append(("head.weight", emb.T @ dlogits))
    if head.bias is not None:
        grads.append(("head.bias", dlogits.sum(axis=0)))
    return ModelParams(grads, check=False)


def backprop_ce(model: TaskModel, x, labels) -> tuple[float, ModelParams]:
    """Mean cross-entropy over the batch and gradients for every trainable tensor.

    Gradient layout matches ``pack_task_model``: encoder layers first, then
    head.weight (and head.bias unless the head is bias-free).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"batch must be a nonempty (n, d) matrix, got shape {x.shape}")
    c = model.head.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(
            f"labels outside [0, {c}): range [{labels.min()}, {labels.max()}]"
        )
    acts = _forward_activations(model.encoder, x)
    logits = model.head.logits(acts[-1])
    probs = softmax_rows(logits)
    loss = _ce_loss(logits, labels)
    dlogits = probs.copy()
    dlogits[np.arange(labels.size), labels] -= 1.0
    dlogits /= labels.size
    return loss, _backward_from_dlogits(model.encoder, model.head, acts, dlogits)


# ---------------------------------------------------------------------------
# Joint training loop (fine-tuning is the T=1 case; MTL is the general case)
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for row in history:
            writer.writerow([row.epoch, row.split, repr(row.loss), repr(row.accuracy)])


class _BatchCycler:
    """Per-epoch Fisher-Yates shuffled batches; reshuffles when exhausted."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.order = list(range(n))
        self.batch_size = batch_size
        self.rng = rng
        self.pos = n  # force shuffle on first draw

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.order) // self.batch_size)

    def next_batch(self) -> np.ndarray:
        if self.pos >= len(self.order):
            self.rng.shuffle(self.order)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return np.array(batch, dtype=np.int64)


def _mean_eval(models: dict[int, TaskModel], tasks: list[TaskDataset], split: str):
    losses, accs = [], []
    for ds in tasks:
        model = models[ds.task_id]
        x, y = ds.features_of(split), ds.labels_of(split)
        logits = model.logits(x)
        losses.append(_ce_loss(logits, y))
        accs.append(accuracy_from_logits(logits, y))
    return float(np.mean(losses)), float(np.mean(accs))


def _train_joint(
    theta_b: ModelParams,
    tasks: list[TaskDataset],
    cfg: TrainConfig,
    use_head_bias: bool = True,
) -> tuple[MlpEncoder, dict[int, ClassifierHead], list[EpochStats]]:
    """Shared encoder + one head per task, summed cross-entropy, one Adam step
    per round of task batches. Never mutates theta_b."""
    if not tasks:
        raise ConfigError("at least one task dataset is required")
    min_train = min(ds.train_idx.size for ds in tasks)
    if cfg.batch_size > min_train:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds smallest train split ({min_train})"
        )

    enc_params = theta_b.copy()
    encoder = MlpEncoder.from_params(enc_params)
    d = encoder.arch.embed_dim
    heads: dict[int, ClassifierHead] = {}
    joint_tensors = list(enc_params.items())
    for ds in tasks:
        head_rng = Rng(derive_seed(cfg.seed, f"head:{ds.task_id}"))
        head = ClassifierHead.init_random(d, ds.num_classes, head_rng, use_bias=use_head_bias)
        heads[ds.task_id] = head
        joint_tensors.append((f"head{ds.task_id}.weight", head.weight))
        if head.bias is not None:
            joint_tensors.append((f"head{ds.task_id}.bias", head.bias))
    joint = ModelParams(joint_tensors, check=False)  # shares arrays for in-place Adam
    state = AdamState.init_for(joint)

    cyclers = {
        ds.task_id: _BatchCycler(
            ds.train_idx.size, cfg.batch_size, Rng(derive_seed(cfg.seed, f"shuffle:{ds.task_id}"))
        )
        for ds in tasks
    }
    models = {ds.task_id: TaskModel(ds.task_id, encoder, heads[ds.task_id]) for ds in tasks}
    steps_per_epoch = max(c.batches_per_epoch for c in cyclers.values())

    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            grad_acc: dict[str, np.ndarray] = {}
            for ds in tasks:
                batch = cyclers[ds.task_id].next_batch()
                idx = ds.train_idx[batch]
                _, grads = backprop_ce(models[ds.task_id], ds.features[idx], ds.labels[idx])
                for name, g in grads.items():
                    key = (
                        name
                        if name.startswith("layer")
                        else name.replace("head.", f"head{ds.task_id}.")
                    )
                    if key in grad_acc:
                        grad_acc[key] += g
                    else:
                        grad_acc[key] = g.copy()
            joint_grads = ModelParams(
                [(n, grad_acc[n]) for n in joint.names()], check=False
            )
            adam_step(joint, joint_grads, state, cfg)
        for split in ("train", "val"):
            if all(ds.indices(split).size for ds in tasks):
                loss, acc = _mean_eval(models, tasks, split)
                history.append(EpochStats(epoch, split, loss, acc))
    return encoder, heads, history


@dataclass
class PretrainResult:
    encoder_params: ModelParams
    history: list[EpochStats] = field(repr=False, default_factory=list)


def pretrain_base(
    tasks: list[TaskDataset], arch: EncoderArch, cfg: TrainConfig
) -> PretrainResult:
    """Train a shared base encoder on a pooled pretext task (label = class parity),
    then discard the pretext head. epochs=0 returns the seeded init unchanged."""
    if not tasks:
        raise ConfigError("pretrain_base requires at least one task dataset")
    init_rng = Rng(derive_seed(cfg.seed, "init"))
    encoder = MlpEncoder.init_random(arch, init_rng)
    if cfg.epochs == 0:
        return PretrainResult(encoder.params)

    feats = np.concatenate([ds.features for ds in tasks])
    parity = np.concatenate([ds.labels % 2 for ds in tasks])
    offsets = np.cumsum([0] + [ds.features.shape[0] for ds in tasks])
    train = np.concatenate([ds.train_idx + off for ds, off in zip(tasks, offsets)])
    val = np.concatenate([ds.val_idx + off for ds, off in zip(tasks, offsets)])
    test = np.concatenate([ds.test_idx + off for ds, off in zip(tasks, offsets)])
    pooled = TaskDataset(
        task_id=PRETEXT_TASK_ID,
        num_classes=2,
        features=feats,
        labels=parity,
        train_idx=train,
        val_idx=val,
        test_idx=test,
        seed=cfg.seed,
    )
    trained, _, history = _train_joint(encoder.params, [pooled], cfg)
    return PretrainResult(trained.params, history)


@dataclass
class FinetuneResult:
    model: TaskModel
    history: list[EpochStats] = field(repr=False, default_factory=list)


def finetune(
    theta_b: ModelParams, ds: TaskDataset, cfg: TrainConfig, use_head_bias: bool = True
) -> FinetuneResult:
    """Fine-tune the full encoder plus a fresh head on one task."""
    encoder, heads, history = _train_joint(theta_b, [ds], cfg, use_head_bias)
    return FinetuneResult(TaskModel(ds.task_id, encoder, heads[ds.task_id]), history)


@dataclass
class MtlResult:
    encoder: MlpEncoder
    heads: dict[int, ClassifierHead]
    history: list[EpochStats] = field(repr=False, default_factory=list)

    def model_for(self, task_id: int) -> TaskModel:
        return TaskModel(task_id, self.encoder, self.heads[task_id])


def train_mtl(
    theta_b: ModelParams,
    tasks: list[TaskDataset],
    cfg: TrainConfig,
    use_head_bias: bool = True,
) -> MtlResult:
    """Joint multi-task baseline: one encoder, per-task heads, round-robin batches."""
    encoder, heads, history = _train_joint(theta_b, tasks, cfg, use_head_bias)
    return MtlResult(encoder, heads, history)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

GRAD_DENOM_FLOOR = 1e-6  # gradients below this scale compare by absolute difference


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_layer: str
    worst_index: int
    num_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "OK" if self.passed else "FAIL"
        return (
            f"grad check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}) at {self.worst_layer}[{self.worst_index}] "
            f"over {self.num_checked} coordinates"
        )


def grad_check(
    model: TaskModel,
    x,
    labels,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic CE gradients against central finite differences.

    Checks every coordinate, or a seeded random subsample when the model has
    more than ``max_coords`` parameters.
    """
    if h <= 0:
        raise ConfigError(f"h must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, analytic = backprop_ce(model, x, labels)

    def loss_at(tensor: np.ndarray, flat_i: int, delta: float, name: str) -> float:
        orig = tensor.flat[flat_i]
        tensor.flat[flat_i] = orig + delta
        try:
            return _ce_loss(model.logits(x), labels)
        finally:
            tensor.flat[flat_i] = orig

    coords: list[tuple[str, int]] = []
    tensor_map: dict[str, np.ndarray] = dict(model.encoder.params.items())
    tensor_map["head.weight"] = model.head.weight
    if model.head.bias is not None:
        tensor_map["head.bias"] = model.head.bias
    for name, tensor in tensor_map.items():
        coords.extend((name, i) for i in range(tensor.size))
    if len(coords) > max_coords:
        rng = Rng(seed)
        coords = [coords[i] for i in rng.sample(len(coords), max_coords)]

    worst = (0.0, "", 0)
    for name, i in coords:
        tensor = tensor_map[name]
        numeric = (loss_at(tensor, i, h, name) - loss_at(tensor, i, -h, name)) / (2 * h)
        ana = float(analytic[name].flat[i])
        denom = max(abs(ana), abs(numeric), GRAD_DENOM_FLOOR)
        rel = abs(ana - numeric) / denom
        if rel > worst[0]:
            worst = (rel, name, i)
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords), tol)
