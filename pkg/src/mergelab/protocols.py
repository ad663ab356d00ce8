"""Evaluation protocols and alignment trainers.

Five ways to score an encoder on a task:

* current        -- encoder output through the task's frozen fine-tuned head
* knn            -- classifier-free: nearest mean distance to few-shot anchors
* ft-classifier  -- re-fit a copy of the head to the fine-tuned model's soft
                    predictions on few-shot unlabeled inputs, then score
* aligned-m      -- learn a square map between encoder output and the frozen
                    head, trained with the same distillation objective
* orth-m         -- aligned-m plus an l1 orthogonality penalty on the map

Alignment training minimizes mean per-sample KL(teacher || student) where the
teacher is the frozen fine-tuned model (soft targets; labels are never used).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .models import (
    ClassifierHead,
    MlpEncoder,
    ModelParams,
    TaskModel,
    accuracy_from_logits,
)
from .numkit import (
    Rng,
    derive_seed,
    kl_divergence_rows,
    orth_penalty,
    softmax_rows,
)
from .synthdata import FewShotAnchors, TaskDataset, sample_few_shot
from .training import AdamState, TrainConfig, adam_step

PROTOCOLS = ("current", "knn", "ft-classifier", "aligned-m", "orth-m")

VARIANT_CLASSIFIER = "classifier"
VARIANT_MAPPING = "mapping"
VARIANT_ORTH_MAPPING = "orth_mapping"
ALIGNMENT_VARIANTS = (VARIANT_CLASSIFIER, VARIANT_MAPPING, VARIANT_ORTH_MAPPING)


@dataclass(frozen=True)
class AlignmentConfig:
    """How to train the alignment object and which unlabeled data to feed it.

    Exactly one data source applies: k per class (few-shot), a fraction of the
    split, or (both None) the full split.
    """

    variant: str
    alpha: float = 0.1
    epochs: int = 200
    learning_rate: float = 1e-2
    k: int | None = None
    sample_fraction: float | None = None
    split: str = "test"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ALIGNMENT_VARIANTS:
            raise ConfigError(
                f"unknown alignment variant {self.variant!r}, expected {ALIGNMENT_VARIANTS}"
            )
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.sample_fraction is not None and not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.k is not None and self.sample_fraction is not None:
            raise ConfigError("set k or sample_fraction, not both")

    @property
    def k_or_fraction(self) -> str:
        if self.k is not None:
            return str(self.k)
        if self.sample_fraction is not None:
            return repr(self.sample_fraction)
        return "full"


@dataclass(frozen=True)
class AlignMatrix:
    """Square map inserted between encoder output and the frozen head."""

    m: np.ndarray

    def __post_init__(self):
        if self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ShapeError(f"alignment matrix must be square, got {self.m.shape}")


@dataclass
class AlignmentResult:
    variant: str
    matrix: AlignMatrix | None
    head: ClassifierHead | None
    losses: list[float] = field(repr=False, default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


# ---------------------------------------------------------------------------
# Protocol: current evaluation
# ---------------------------------------------------------------------------


def current_eval(
    encoder: MlpEncoder, head: ClassifierHead, ds: TaskDataset, split: str = "test"
) -> float:
    """Accuracy of argmax(encoder output @ head); ties go to the lowest class."""
    logits = head.logits(encoder.encode(ds.features_of(split)))
    return accuracy_from_logits(logits, ds.labels_of(split))


# ---------------------------------------------------------------------------
# Protocol: KNN / nearest-anchor evaluation
# ---------------------------------------------------------------------------


def knn_eval(
    encoder: MlpEncoder,
    anchors: FewShotAnchors,
    ds: TaskDataset,
    split: str = "test",
) -> float:
    """Assign each sample the class whose anchors have minimal mean Euclidean
    distance in embedding space; anchors are embedded by the same encoder."""
    if anchors.num_classes != ds.num_classes:
        raise ConfigError(
            f"anchors cover {anchors.num_classes} classes, dataset has {ds.num_classes}"
        )
    emb = encoder.encode(ds.features_of(split))
    columns = []
    for cls in range(ds.num_classes):
        feats = anchors.features.get(cls)
        if feats is None or feats.shape[0] == 0:
            raise ConfigError(f"no anchors for class {cls}")
        a = encoder.encode(feats)
        dists = np.linalg.norm(emb[:, None, :] - a[None, :, :], axis=2)
        columns.append(dists.mean(axis=1))
    pred = np.argmin(np.stack(columns, axis=1), axis=1)  # ties: lowest class index
    labels = ds.labels_of(split)
    return float(np.count_nonzero(pred == labels)) / labels.size


def knn_predict_embedded(test_emb: np.ndarray, anchor_embs: dict[int, np.ndarray]) -> np.ndarray:
    """KNN decision on pre-embedded points (used by invariance tests)."""
    columns = []
    for cls in range(len(anchor_embs)):
        a = anchor_embs[cls]
        dists = np.linalg.norm(test_emb[:, None, :] - a[None, :, :], axis=2)
        columns.append(dists.mean(axis=1))
    return np.argmin(np.stack(columns, axis=1), axis=1)


# ---------------------------------------------------------------------------
# Alignment training (distillation against the frozen fine-tuned model)
# ---------------------------------------------------------------------------


def mapping_loss_and_grad(
    emb: np.ndarray,
    teacher_probs: np.ndarray,
    m: np.ndarray,
    head: ClassifierHead,
    alpha: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean KL(teacher || softmax(emb @ M @ W + b)) plus alpha * ||M^T M - I||_1.

    The penalty uses the l1 subgradient with sign(0) = 0.
    """
    n = emb.shape[0]
    logits = head.logits(emb @ m)
    probs = softmax_rows(logits)
    loss = float(kl_divergence_rows(teacher_probs, probs).mean())
    dlogits = (probs - teacher_probs) / n
    grad = emb.T @ dlogits @ head.weight.T
    if alpha > 0.0:
        loss += alpha * orth_penalty(m)
        sign = np.sign(m.T @ m - np.eye(m.shape[0]))
        grad = grad + alpha * (m @ (sign + sign.T))
    return loss, grad


def classifier_loss_and_grad(
    emb: np.ndarray,
    teacher_probs: np.ndarray,
    head: ClassifierHead,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Mean KL(teacher || softmax(emb @ W' + b')) and gradients for W' (and b')."""
    n = emb.shape[0]
    probs = softmax_rows(head.logits(emb))
    loss = float(kl_divergence_rows(teacher_probs, probs).mean())
    dlogits = (probs - teacher_probs) / n
    grad_w = emb.T @ dlogits
    grad_b = dlogits.sum(axis=0) if head.bias is not None else None
    return loss, grad_w, grad_b


def select_alignment_data(ds: TaskDataset, cfg: AlignmentConfig) -> np.ndarray:
    """Pick the unlabeled inputs the alignment trainer sees (labels are only
    used to balance the few-shot draw, never in the objective)."""
    if cfg.k is not None:
        anchors = sample_few_shot(
            ds, cfg.k, cfg.split, derive_seed(cfg.seed, f"align-data:{ds.task_id}")
        )
        return np.concatenate([anchors.features[c] for c in range(ds.num_classes)])
    idx = ds.indices(cfg.split)
    if cfg.sample_fraction is not None:
        m = max(1, round(cfg.sample_fraction * idx.size))
        rng = Rng(derive_seed(cfg.seed, f"align-data:{ds.task_id}"))
        idx = idx[rng.sample(idx.size, m)]
    return ds.features[idx]


def train_alignment(
    merged_encoder: MlpEncoder,
    finetuned: TaskModel,
    data_x,
    cfg: AlignmentConfig,
) -> AlignmentResult:
    """Fit the alignment object by KL distillation; everything else is frozen.

    Teacher targets are softmax(fine-tuned logits) on the same inputs. The
    mapping variants train a d x d matrix initialized to identity; the
    classifier variant trains a copy of the fine-tuned head. ``losses`` holds
    the objective at initialization and after every epoch.
    """
    x = np.asarray(data_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError(f"alignment data must be a nonempty (n, d) matrix, got {x.shape}")
    d = merged_encoder.arch.embed_dim
    if d != finetuned.encoder.arch.embed_dim:
        raise ShapeError(
            f"embed_dim mismatch: merged {d} vs fine-tuned {finetuned.encoder.arch.embed_dim}"
        )

    teacher_probs = softmax_rows(finetuned.logits(x))
    emb = merged_encoder.encode(x)
    opt_cfg = TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate, seed=cfg.seed)

    if cfg.variant == VARIANT_CLASSIFIER:
        head = finetuned.head.copy()
        tensors = [("weight", head.weight)]
        if head.bias is not None:
            tensors.append(("bias", head.bias))
        params = ModelParams(tensors, check=False)
        state = AdamState.init_for(params)
        losses = []
        for _ in range(cfg.epochs):
            loss, gw, gb = classifier_loss_and_grad(emb, teacher_probs, head)
            losses.append(loss)
            grads = [("weight", gw)] + ([("bias", gb)] if gb is not None else [])
            adam_step(params, ModelParams(grads, check=False), state, opt_cfg)
        loss, _, _ = classifier_loss_and_grad(emb, teacher_probs, head)
        losses.append(loss)
        return AlignmentResult(cfg.variant, None, head, losses)

    alpha = cfg.alpha if cfg.variant == VARIANT_ORTH_MAPPING else 0.0
    m = np.eye(d)
    params = ModelParams([("m", m)], check=False)
    state = AdamState.init_for(params)
    losses = []
    for _ in range(cfg.epochs):
        loss, grad = mapping_loss_and_grad(emb, teacher_probs, m, finetuned.head, alpha)
        losses.append(loss)
        adam_step(params, ModelParams([("m", grad)], check=False), state, opt_cfg)
    loss, _ = mapping_loss_and_grad(emb, teacher_probs, m, finetuned.head, alpha)
    losses.append(loss)
    return AlignmentResult(cfg.variant, AlignMatrix(m), None, losses)


# ---------------------------------------------------------------------------
# Protocols built on alignment
# ---------------------------------------------------------------------------


def ft_classifier_eval(
    merged_encoder: MlpEncoder,
    finetuned: TaskModel,
    ds: TaskDataset,
    cfg: AlignmentConfig,
    split: str = "test",
) -> tuple[float, AlignmentResult]:
    """Train an aligned head on few-shot unlabeled inputs, then run the current
    protocol with it."""
    if cfg.variant != VARIANT_CLASSIFIER:
        raise ConfigError(f"ft_classifier_eval requires the classifier variant, got {cfg.variant!r}")
    data = select_alignment_data(ds, cfg)
    result = train_alignment(merged_encoder, finetuned, data, cfg)
    accuracy = current_eval(merged_encoder, result.head, ds, split)
    return accuracy, result


def aligned_m_eval(
    merged_encoder: MlpEncoder,
    finetuned: TaskModel,
    ds: TaskDataset,
    cfg: AlignmentConfig,
    split: str = "test",
) -> tuple[float, AlignmentResult]:
    """Train the mapping matrix, then score argmax over emb @ M @ W + b."""
    if cfg.variant not in (VARIANT_MAPPING, VARIANT_ORTH_MAPPING):
        raise ConfigError(f"aligned_m_eval requires a mapping variant, got {cfg.variant!r}")
    data = select_alignment_data(ds, cfg)
    result = train_alignment(merged_encoder, finetuned, data, cfg)
    emb = merged_encoder.encode(ds.features_of(split))
    logits = finetuned.head.logits(emb @ result.matrix.m)
    accuracy = accuracy_from_logits(logits, ds.labels_of(split))
    return accuracy, result


def base_model_eval(
    base_encoder: MlpEncoder,
    finetuned_models: list[TaskModel],
    datasets: list[TaskDataset],
    seed: int,
    protocols: tuple[str, ...] = ("current", "ft-classifier"),
    align_cfg: AlignmentConfig | None = None,
) -> list["EvalRow"]:
    """Score the base encoder in place of a merged one (control experiment)."""
    rows = []
    for model, ds in zip(finetuned_models, datasets):
        for protocol in protocols:
            if protocol == "current":
                acc = current_eval(base_encoder, model.head, ds)
                rows.append(EvalRow("base", "-", "current", ds.task_id, "-", seed, acc))
            elif protocol == "ft-classifier":
                cfg = align_cfg or AlignmentConfig(VARIANT_CLASSIFIER, k=5, seed=seed)
                acc, _ = ft_classifier_eval(base_encoder, model, ds, cfg)
                rows.append(
                    EvalRow("base", "-", "ft-classifier", ds.task_id, cfg.k_or_fraction, seed, acc)
                )
            else:
                raise ConfigError(f"base_model_eval does not support protocol {protocol!r}")
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("model", "method", "protocol", "task", "k_or_fraction", "seed", "accuracy")


@dataclass(frozen=True)
class EvalRow:
    model: str
    method: str
    protocol: str
    task: int
    k_or_fraction: str
    seed: int
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or not np.isfinite(self.accuracy):
            raise NumericError(f"accuracy {self.accuracy} outside [0, 1]")


class EvalReport:
    """Accumulates rows; averages are recomputed at emission and checked
    against the running sums kept while adding."""

    def __init__(self, config_digest: str = ""):
        self.config_digest = config_digest
        self.rows: list[EvalRow] = []
        self._sums: dict[tuple, list[float]] = {}

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)
        key = (row.model, row.method, row.protocol, row.k_or_fraction, row.seed)
        bucket = self._sums.setdefault(key, [0.0, 0])
        bucket[0] += row.accuracy
        bucket[1] += 1

    def extend(self, rows) -> None:
        for row in rows:
            self.add(row)

    def averages(self) -> dict[tuple, float]:
        """Mean accuracy across tasks per (model, method, protocol, k, seed)."""
        fresh: dict[tuple, list[float]] = {}
        for row in self.rows:
            key = (row.model, row.method, row.protocol, row.k_or_fraction, row.seed)
            fresh.setdefault(key, []).append(row.accuracy)
        out = {}
        for key, vals in fresh.items():
            mean = float(np.mean(vals))
            stored_sum, stored_n = self._sums[key]
            if abs(stored_sum / stored_n - mean) > 1e-12:
                raise NumericError(f"stored average drifted for {key}")
            out[key] = mean
        return out

    def to_csv(self, path) -> None:
        write_report_csv(path, self.rows, self.config_digest)

    def to_json(self, path) -> None:
        payload = {
            "config_digest": self.config_digest,
            "rows": [asdict(r) for r in self.rows],
            "averages": [
                {
                    "model": k[0],
                    "method": k[1],
                    "protocol": k[2],
                    "k_or_fraction": k[3],
                    "seed": k[4],
                    "mean_accuracy": v,
                }
                for k, v in sorted(self.averages().items())
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_report_csv(path, rows: list[EvalRow], config_digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest: {config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.model, r.method, r.protocol, r.task, r.k_or_fraction, r.seed, repr(r.accuracy)]
            )


def append_report_csv(path, rows: list[EvalRow], config_digest: str) -> None:
    """Append rows, refusing to mix artifacts from different configurations."""
    import os

    if not os.path.exists(path):
        write_report_csv(path, rows, config_digest)
        return
    existing_digest, _ = read_report_csv(path)
    if existing_digest != config_digest:
        raise DataError(
            f"{path}: config digest mismatch "
            f"(report {existing_digest[:12]}..., current {config_digest[:12]}...)"
        )
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for r in rows:
            writer.writerow(
                [r.model, r.method, r.protocol, r.task, r.k_or_fraction, r.seed, repr(r.accuracy)]
            )


def read_report_csv(path) -> tuple[str, list[EvalRow]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config_digest:"):
            raise DataError(f"{path}: missing config digest line")
        digest = first.split(":", 1)[1].strip()
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(REPORT_COLUMNS):
            raise DataError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            rows.append(
                EvalRow(rec[0], rec[1], rec[2], int(rec[3]), rec[4], int(rec[5]), float(rec[6]))
            )
    return digest, rows


def dump_embeddings(encoder: MlpEncoder, ds: TaskDataset, split: str, path) -> None:
    """Write `task,split,label,e0..e{d-1}` rows for external visualization."""
    emb = encoder.encode(ds.features_of(split))
    labels = ds.labels_of(split)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "split", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for label, row in zip(labels, emb):
            writer.writerow([ds.task_id, split, int(label)] + [repr(float(v)) for v in row])
