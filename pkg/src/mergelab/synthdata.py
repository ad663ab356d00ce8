"""Synthetic per-task classification datasets: Gaussian blobs, splits, anchors, CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numkit import Rng

SPLITS = ("train", "val", "test")

MEAN_RANGE = 4.0  # class means drawn uniformly from [-4, 4]^input_dim


@dataclass(frozen=True)
class TaskDataset:
    """Features/labels for one task plus disjoint, exhaustive split indices."""

    task_id: int
    num_classes: int
    features: np.ndarray  # (n, input_dim) float64
    labels: np.ndarray  # (n,) int64 in [0, num_classes)
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} != ({n},)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(
                f"labels outside [0, {self.num_classes}): "
                f"range [{self.labels.min()}, {self.labels.max()}]"
            )
        combined = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if len(np.unique(combined)) != combined.size or combined.size != n:
            raise DataError("splits must be disjoint and exhaustive")

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]
        except KeyError:
            raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}") from None

    def features_of(self, split: str) -> np.ndarray:
        return self.features[self.indices(split)]

    def labels_of(self, split: str) -> np.ndarray:
        return self.labels[self.indices(split)]

    def class_indices(self, split: str, cls: int) -> np.ndarray:
        idx = self.indices(split)
        return idx[self.labels[idx] == cls]


@dataclass(frozen=True)
class FewShotAnchors:
    """Exactly k reference samples per class, drawn without replacement."""

    k: int
    split: str
    features: dict[int, np.ndarray]  # class -> (k, input_dim) raw inputs
    indices: dict[int, np.ndarray]  # class -> dataset row indices

    @property
    def num_classes(self) -> int:
        return len(self.features)


def _split_sizes(per_class: int) -> tuple[int, int, int]:
    # 70/10/20, but never fewer than 2 per class in val/test
    n_val = max(2, round(0.1 * per_class))
    n_test = max(2, round(0.2 * per_class))
    return per_class - n_val - n_test, n_val, n_test


def gen_task(
    task_id: int,
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
) -> TaskDataset:
    """Gaussian-blob task: per-class means in [-4,4]^d, isotropic noise of std `spread`.

    Stratified 70/10/20 train/val/test split; fully deterministic per seed.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if samples_per_class < 10:
        raise ConfigError(f"samples_per_class must be >= 10, got {samples_per_class}")
    if input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got {input_dim}")
    if spread < 0:
        raise ConfigError(f"spread must be >= 0, got {spread}")

    rng = Rng(seed)
    means = [rng.uniform(-MEAN_RANGE, MEAN_RANGE, input_dim) for _ in range(num_classes)]

    features = np.empty((num_classes * samples_per_class, input_dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    train, val, test = [], [], []
    n_train, n_val, n_test = _split_sizes(samples_per_class)
    row = 0
    for cls in range(num_classes):
        noise = rng.normal((samples_per_class, input_dim))
        features[row : row + samples_per_class] = means[cls] + spread * noise
        labels[row : row + samples_per_class] = cls
        rows = np.arange(row, row + samples_per_class)
        train.append(rows[:n_train])
        val.append(rows[n_train : n_train + n_val])
        test.append(rows[n_train + n_val :])
        row += samples_per_class

    return TaskDataset(
        task_id=task_id,
        num_classes=num_classes,
        features=features,
        labels=labels,
        train_idx=np.concatenate(train),
        val_idx=np.concatenate(val),
        test_idx=np.concatenate(test),
        seed=seed,
    )


def sample_few_shot(ds: TaskDataset, k: int, split: str, seed: int) -> FewShotAnchors:
    """Uniformly sample k anchors per class from one split, without replacement."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = Rng(seed)
    feats: dict[int, np.ndarray] = {}
    idxs: dict[int, np.ndarray] = {}
    for cls in range(ds.num_classes):
        pool = ds.class_indices(split, cls)
        if pool.size < k:
            raise ConfigError(
                f"task {ds.task_id}: class {cls} has {pool.size} samples "
                f"in split {split!r}, need k={k}"
            )
        chosen = pool[rng.sample(pool.size, k)]
        idxs[cls] = chosen
        feats[cls] = ds.features[chosen]
    return FewShotAnchors(k=k, split=split, features=feats, indices=idxs)


# ---------------------------------------------------------------------------
# CSV interchange (so real embeddings can replace the synthetic suite)
# ---------------------------------------------------------------------------


def export_dataset_csv(ds: TaskDataset, path, split_path=None) -> None:
    """Write `label,f0,f1,...` rows; optionally an `index,split` assignment file."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.input_dim)])
        for label, row in zip(ds.labels, ds.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])
    if split_path is not None:
        with open(split_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "split"])
            for split in SPLITS:
                for i in ds.indices(split):
                    writer.writerow([int(i), split])


def import_dataset_csv(path, task_id: int, seed: int, split_path=None) -> TaskDataset:
    """Load a dataset CSV; splits come from the assignment file or a fresh
    stratified split (seeded, per-class shuffled since external row order may
    be structured)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DataError(f"{path}: expected header starting with 'label'")
        dim = len(header) - 1
        labels_list, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(rec)}")
            try:
                labels_list.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = np.array(labels_list, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label {labels.min()}")
    features = np.array(rows, dtype=np.float64)
    num_classes = int(labels.max()) + 1

    if split_path is not None:
        assign: dict[int, str] = {}
        with open(split_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for rec in reader:
                assign[int(rec[0])] = rec[1]
        if sorted(assign) != list(range(len(labels))):
            raise DataError(f"{split_path}: split file must cover every index exactly once")
        by_split = {s: [] for s in SPLITS}
        for i, s in assign.items():
            if s not in by_split:
                raise DataError(f"{split_path}: unknown split {s!r} for index {i}")
            by_split[s].append(i)
        train, val, test = (np.array(sorted(by_split[s]), dtype=np.int64) for s in SPLITS)
    else:
        rng = Rng(seed)
        train_l, val_l, test_l = [], [], []
        for cls in range(num_classes):
            pool = np.nonzero(labels == cls)[0]
            if pool.size < 10:
                raise DataError(f"{path}: class {cls} has {pool.size} rows, need >= 10")
            order = pool[rng.sample(pool.size, pool.size)]
            n_train, n_val, _ = _split_sizes(pool.size)
            train_l.append(order[:n_train])
            val_l.append(order[n_train : n_train + n_val])
            test_l.append(order[n_train + n_val :])
        train = np.concatenate(train_l)
        val = np.concatenate(val_l)
        test = np.concatenate(test_l)

    return TaskDataset(
        task_id=task_id,
        num_classes=num_classes,
        features=features,
        labels=labels,
        train_idx=train,
        val_idx=val,
        test_idx=test,
        seed=seed,
    )
