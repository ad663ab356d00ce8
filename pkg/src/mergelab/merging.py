"""Merging algorithms over encoder parameters: weight averaging, task arithmetic, Ties.

All three keep classifier heads out of the arithmetic. Sums are evaluated with
compensated (error-free transformation) accumulation so the algebraic
identities hold bit-exactly: averaging identical models returns them
unchanged, and task arithmetic over a single model at scale 1 reproduces the
fine-tuned parameters.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .models import (
    ClassifierHead,
    MlpEncoder,
    ModelParams,
    TaskVector,
    accuracy_from_logits,
    task_vector,
)
from .synthdata import TaskDataset

MERGE_METHODS = ("weight_averaging", "task_arithmetic", "ties")

DEFAULT_LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEFAULT_TIES_KEEP = 0.2


@dataclass(frozen=True)
class MergeSpec:
    """Method plus its hyperparameters; lam applies to TA/Ties, keep to Ties only."""

    method: str
    lam: float = 0.5
    ties_keep_fraction: float = DEFAULT_TIES_KEEP

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise ConfigError(f"unknown merge method {self.method!r}, expected {MERGE_METHODS}")
        if self.method in ("task_arithmetic", "ties") and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.method == "ties" and not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ConfigError(
                f"ties_keep_fraction must lie in (0, 1], got {self.ties_keep_fraction}"
            )


def _check_lambda(lam: float, strict: bool) -> None:
    if 0.0 <= lam <= 1.0:
        return
    if strict:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    warnings.warn(f"lambda {lam} outside [0, 1]", stacklevel=3)


def _content_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, v in params.items():
        h.update(name.encode("utf-8"))
        h.update(str(v.shape).encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def weight_average(models: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean. Input order does not matter: models are summed in a
    canonical (content-digest) order, centered on the first."""
    if not models:
        raise ConfigError("weight_average requires at least one model")
    first = models[0]
    for other in models[1:]:
        first.check_homologous(other, "weight_average")
    ordered = sorted(models, key=_content_digest)
    ref = ordered[0]
    out = []
    for name, base in ref.items():
        acc = np.zeros_like(base)
        comp = np.zeros_like(base)
        for m in ordered[1:]:
            d = m[name] - base  # exact zero for identical models
            s = acc + d
            comp += (acc - s) + d  # Neumaier correction (|acc| >= |d| not assumed)
            acc = s
        out.append((name, base + (acc + comp) / len(models)))
    return ModelParams(out, check=False)


def _compensated_combine(
    theta_b: ModelParams,
    merged_delta: ModelParams,
    merged_resid: ModelParams,
    lam: float,
) -> ModelParams:
    """theta_b + lam * (delta + residual), exact when the true result is representable."""
    out = []
    for name, b in theta_b.items():
        p = lam * merged_delta[name]
        s = b + p
        bp = s - b
        err = (b - (s - bp)) + (p - bp)  # TwoSum error term
        out.append((name, s + (err + lam * merged_resid[name])))
    return ModelParams(out, check=False)


def task_arithmetic(
    theta_b: ModelParams,
    models: Sequence[ModelParams],
    lam: float,
    strict_lambda: bool = True,
) -> ModelParams:
    """theta_b + lam * sum of task vectors."""
    if not models:
        raise ConfigError("task_arithmetic requires at least one model")
    _check_lambda(lam, strict_lambda)
    vectors = [task_vector(m, theta_b) for m in models]
    total_d, total_r = [], []
    for name, b in theta_b.items():
        acc = np.zeros_like(b)
        comp = np.zeros_like(b)
        for tv in vectors:
            d = tv.delta[name]
            s = acc + d
            comp += (acc - s) + d
            acc = s
            comp += tv.residual[name]
        total_d.append((name, acc))
        total_r.append((name, comp))
    return _compensated_combine(
        theta_b,
        ModelParams(total_d, check=False),
        ModelParams(total_r, check=False),
        lam,
    )


def ties_trim(tv: TaskVector, keep_fraction: float) -> TaskVector:
    """Keep the top ceil(keep_fraction * n) entries of the flattened delta by
    magnitude, zero the rest. Ties at the threshold keep the lower flat index."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    flat = tv.delta.flat()
    n = flat.size
    if n == 0:
        return tv
    k = math.ceil(keep_fraction * n)
    # stable argsort on -|v|: equal magnitudes stay in index order
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    trimmed = np.where(mask, flat, 0.0)
    resid = np.where(mask, tv.residual.flat(), 0.0)
    return TaskVector(tv.delta.with_flat(trimmed), tv.residual.with_flat(resid))


def _elect_and_merge(stacked: np.ndarray, resids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ties election: per coordinate pick sign of the summed deltas (zero sum
    elects +), then average the nonzero sign-agreeing entries."""
    signs = np.where(stacked.sum(axis=0) >= 0.0, 1.0, -1.0)
    agree = (np.sign(stacked) == signs) & (stacked != 0.0)
    count = agree.sum(axis=0)
    safe = np.maximum(count, 1)
    merged = np.where(count > 0, (stacked * agree).sum(axis=0) / safe, 0.0)
    merged_r = np.where(count > 0, (resids * agree).sum(axis=0) / safe, 0.0)
    return merged, merged_r


def ties_merge(
    theta_b: ModelParams,
    models: Sequence[ModelParams],
    lam: float,
    keep_fraction: float = DEFAULT_TIES_KEEP,
    strict_lambda: bool = True,
) -> ModelParams:
    """Trim each task vector, elect per-coordinate signs, average agreeing values."""
    if not models:
        raise ConfigError("ties_merge requires at least one model")
    _check_lambda(lam, strict_lambda)
    trimmed = [ties_trim(task_vector(m, theta_b), keep_fraction) for m in models]
    merged_d, merged_r = [], []
    for name, b in theta_b.items():
        stacked = np.stack([tv.delta[name] for tv in trimmed])
        resids = np.stack([tv.residual[name] for tv in trimmed])
        m, r = _elect_and_merge(stacked, resids)
        merged_d.append((name, m))
        merged_r.append((name, r))
    return _compensated_combine(
        theta_b,
        ModelParams(merged_d, check=False),
        ModelParams(merged_r, check=False),
        lam,
    )


def merge_encoders(
    theta_b: ModelParams, models: Sequence[ModelParams], spec: MergeSpec
) -> ModelParams:
    """Dispatch to the method named by the spec."""
    if spec.method == "weight_averaging":
        return weight_average(models)
    if spec.method == "task_arithmetic":
        return task_arithmetic(theta_b, models, spec.lam)
    return ties_merge(theta_b, models, spec.lam, spec.ties_keep_fraction)


def select_lambda(
    theta_b: ModelParams,
    models: Sequence[ModelParams],
    heads: Sequence[ClassifierHead],
    val_sets: Sequence[TaskDataset],
    grid: Sequence[float] | None = None,
    method: str = "task_arithmetic",
    keep_fraction: float = DEFAULT_TIES_KEEP,
) -> float:
    """Pick the lambda maximizing mean validation accuracy under the current
    protocol (merged encoder scored through each task's head); ties go to the
    smaller lambda. The chosen value is then reused across all protocols."""
    if grid is None:
        grid = DEFAULT_LAMBDA_GRID
    if len(grid) == 0:
        raise ConfigError("lambda grid must be nonempty")
    if method not in ("task_arithmetic", "ties"):
        raise ConfigError(f"select_lambda applies to task_arithmetic/ties, not {method!r}")
    if not (len(models) == len(heads) == len(val_sets)):
        raise ConfigError("models, heads and val_sets must align")

    best_lam, best_acc = None, -1.0
    for lam in sorted(grid):
        if method == "task_arithmetic":
            merged = task_arithmetic(theta_b, models, lam, strict_lambda=False)
        else:
            merged = ties_merge(theta_b, models, lam, keep_fraction, strict_lambda=False)
        encoder = MlpEncoder.from_params(merged)
        accs = []
        for head, ds in zip(heads, val_sets):
            logits = head.logits(encoder.encode(ds.features_of("val")))
            accs.append(accuracy_from_logits(logits, ds.labels_of("val")))
        acc = float(np.mean(accs))
        if acc > best_acc:  # strict: equal accuracy keeps the smaller lambda
            best_lam, best_acc = lam, acc
    return float(best_lam)
