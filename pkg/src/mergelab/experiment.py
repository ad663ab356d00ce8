"""Config-driven experiment pipeline: generate, pretrain, fine-tune, merge, evaluate."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .merging import (
    DEFAULT_LAMBDA_GRID,
    MergeSpec,
    merge_encoders,
    select_lambda,
)
from .models import (
    ClassifierHead,
    EncoderArch,
    MlpEncoder,
    ModelParams,
    TaskModel,
    pack_task_model,
    save_checkpoint,
)
from .numkit import derive_seed
from .protocols import (
    AlignmentConfig,
    EvalReport,
    EvalRow,
    PROTOCOLS,
    VARIANT_CLASSIFIER,
    VARIANT_MAPPING,
    VARIANT_ORTH_MAPPING,
    aligned_m_eval,
    current_eval,
    ft_classifier_eval,
    knn_eval,
)
from .synthdata import TaskDataset, export_dataset_csv, gen_task, sample_few_shot
from .training import (
    FinetuneResult,
    MtlResult,
    TrainConfig,
    finetune,
    pretrain_base,
    train_mtl,
    write_history_csv,
)


@dataclass(frozen=True)
class TaskSpecConfig:
    task_id: int
    num_classes: int
    samples_per_class: int


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; the digest of the resolved JSON stamps all outputs."""

    seeds: tuple[int, ...]
    tasks: tuple[TaskSpecConfig, ...]
    input_dim: int = 16
    spread: float = 1.5
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    use_head_bias: bool = True
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    mtl: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    merges: tuple[MergeSpec, ...] = (
        MergeSpec("weight_averaging"),
        MergeSpec("task_arithmetic"),
        MergeSpec("ties"),
    )
    select_lambdas: tuple[bool, ...] = (False, True, True)  # per merge spec
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    protocols: tuple[str, ...] = PROTOCOLS
    knn_k: int = 5
    ftc_k: int = 5
    align_epochs: int = 200
    align_lr: float = 1e-2
    align_alpha: float = 0.1
    aligned_m_fraction: float | None = None  # None = full test split
    k_sweep: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.tasks:
            raise ConfigError("tasks must be nonempty")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids: {ids}")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"config field 'protocols': unknown protocol {p!r}")
        if len(self.select_lambdas) != len(self.merges):
            raise ConfigError("select_lambdas must align with merges")

    @property
    def arch(self) -> EncoderArch:
        return EncoderArch(self.input_dim, self.hidden_dims, self.embed_dim)

    def to_json_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "suite": {
                "input_dim": self.input_dim,
                "spread": self.spread,
                "tasks": [
                    {
                        "task_id": t.task_id,
                        "num_classes": t.num_classes,
                        "samples_per_class": t.samples_per_class,
                    }
                    for t in self.tasks
                ],
            },
            "architecture": {
                "hidden_dims": list(self.hidden_dims),
                "embed_dim": self.embed_dim,
            },
            "use_head_bias": self.use_head_bias,
            "pretrain": _train_to_dict(self.pretrain),
            "finetune": _train_to_dict(self.finetune),
            "mtl": _train_to_dict(self.mtl),
            "merges": [
                {
                    "method": m.method,
                    "lambda": "select" if sel else m.lam,
                    "ties_keep_fraction": m.ties_keep_fraction,
                }
                for m, sel in zip(self.merges, self.select_lambdas)
            ],
            "lambda_grid": list(self.lambda_grid),
            "protocols": list(self.protocols),
            "knn_k": self.knn_k,
            "alignment": {
                "epochs": self.align_epochs,
                "learning_rate": self.align_lr,
                "alpha": self.align_alpha,
                "ft_classifier_k": self.ftc_k,
                "aligned_m_fraction": self.aligned_m_fraction,
            },
            "k_sweep": list(self.k_sweep),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _train_to_dict(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
    }


def _train_from_dict(d: dict, where: str) -> TrainConfig:
    known = {"epochs", "batch_size", "learning_rate", "weight_decay"}
    for key in d:
        if key not in known:
            raise ConfigError(f"config field '{where}.{key}': unknown key")
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"config field {where!r}: {exc}") from None


def config_from_dict(raw: dict, path: str = "<config>") -> ExperimentConfig:
    """Parse and validate the JSON config structure, naming bad fields."""

    def need(container: dict, key: str, where: str):
        if key not in container:
            raise ConfigError(f"{path}: missing config field '{where}{key}'")
        return container[key]

    suite = need(raw, "suite", "")
    tasks = tuple(
        TaskSpecConfig(t["task_id"], t["num_classes"], t["samples_per_class"])
        for t in need(suite, "tasks", "suite.")
    )
    arch = raw.get("architecture", {})
    merges_raw = raw.get(
        "merges",
        [
            {"method": "weight_averaging"},
            {"method": "task_arithmetic", "lambda": "select"},
            {"method": "ties", "lambda": "select"},
        ],
    )
    merges, selects = [], []
    for m in merges_raw:
        method = need(m, "method", "merges.")
        lam = m.get("lambda", "select" if method != "weight_averaging" else 0.5)
        select = lam == "select"
        spec = MergeSpec(
            method,
            lam=0.5 if select else float(lam),
            ties_keep_fraction=float(m.get("ties_keep_fraction", 0.2)),
        )
        merges.append(spec)
        selects.append(select)
    align = raw.get("alignment", {})
    try:
        return ExperimentConfig(
            seeds=tuple(need(raw, "seeds", "")),
            tasks=tasks,
            input_dim=suite.get("input_dim", 16),
            spread=suite.get("spread", 1.5),
            hidden_dims=tuple(arch.get("hidden_dims", (64, 64))),
            embed_dim=arch.get("embed_dim", 32),
            use_head_bias=raw.get("use_head_bias", True),
            pretrain=_train_from_dict(raw.get("pretrain", {"epochs": 10}), "pretrain"),
            finetune=_train_from_dict(raw.get("finetune", {"epochs": 30}), "finetune"),
            mtl=_train_from_dict(raw.get("mtl", {"epochs": 30}), "mtl"),
            merges=tuple(merges),
            select_lambdas=tuple(selects),
            lambda_grid=tuple(raw.get("lambda_grid", DEFAULT_LAMBDA_GRID)),
            protocols=tuple(raw.get("protocols", PROTOCOLS)),
            knn_k=raw.get("knn_k", 5),
            ftc_k=align.get("ft_classifier_k", 5),
            align_epochs=align.get("epochs", 200),
            align_lr=align.get("learning_rate", 1e-2),
            align_alpha=align.get("alpha", 0.1),
            aligned_m_fraction=align.get("aligned_m_fraction"),
            k_sweep=tuple(raw.get("k_sweep", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(raw, str(path))


def default_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "configs", "default.json")


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


@dataclass
class SeedArtifacts:
    """Everything trained and merged for one seed of the suite."""

    seed: int
    datasets: list[TaskDataset]
    theta_b: ModelParams
    finetuned: dict[int, FinetuneResult]
    mtl: MtlResult
    merged: dict[str, ModelParams]  # method -> encoder params
    merge_lambdas: dict[str, float]

    def finetuned_model(self, task_id: int) -> TaskModel:
        return self.finetuned[task_id].model


def gen_suite(cfg: ExperimentConfig, seed: int) -> list[TaskDataset]:
    return [
        gen_task(
            t.task_id,
            t.num_classes,
            t.samples_per_class,
            cfg.input_dim,
            cfg.spread,
            seed=derive_seed(seed, f"data:{t.task_id}"),
        )
        for t in cfg.tasks
    ]


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        seed=seed,
    )


def build_seed_artifacts(cfg: ExperimentConfig, seed: int, threads: int = 1) -> SeedArtifacts:
    """Run generate -> pretrain -> fine-tune -> mtl -> merge for one seed."""
    datasets = gen_suite(cfg, seed)
    pre = pretrain_base(datasets, cfg.arch, _with_seed(cfg.pretrain, derive_seed(seed, "pretrain")))
    theta_b = pre.encoder_params

    def ft_one(ds: TaskDataset) -> FinetuneResult:
        task_cfg = _with_seed(cfg.finetune, derive_seed(seed, f"task:{ds.task_id}"))
        return finetune(theta_b, ds, task_cfg, use_head_bias=cfg.use_head_bias)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(ft_one, datasets))
    else:
        results = [ft_one(ds) for ds in datasets]
    finetuned = {r.model.task_id: r for r in results}

    mtl = train_mtl(
        theta_b, datasets, _with_seed(cfg.mtl, derive_seed(seed, "mtl")),
        use_head_bias=cfg.use_head_bias,
    )

    encoders = [finetuned[ds.task_id].model.encoder.params for ds in datasets]
    heads = [finetuned[ds.task_id].model.head for ds in datasets]
    merged: dict[str, ModelParams] = {}
    lambdas: dict[str, float] = {}
    for spec, select in zip(cfg.merges, cfg.select_lambdas):
        if select and spec.method != "weight_averaging":
            lam = select_lambda(
                theta_b,
                encoders,
                heads,
                datasets,
                grid=cfg.lambda_grid,
                method=spec.method,
                keep_fraction=spec.ties_keep_fraction,
            )
            spec = MergeSpec(spec.method, lam=lam, ties_keep_fraction=spec.ties_keep_fraction)
        merged[spec.method] = merge_encoders(theta_b, encoders, spec)
        lambdas[spec.method] = spec.lam
    _check_finite_params(merged)
    return SeedArtifacts(seed, datasets, theta_b, finetuned, mtl, merged, lambdas)


def _check_finite_params(merged: dict[str, ModelParams]) -> None:
    for method, params in merged.items():
        for name, v in params.items():
            if not np.isfinite(v).all():
                raise NumericError(f"non-finite values in merged[{method}] layer {name!r}")


METHOD_LABELS = {"weight_averaging": "wa", "task_arithmetic": "ta", "ties": "ties"}


def _align_cfg(cfg: ExperimentConfig, variant: str, seed: int, label: str, k: int | None):
    return AlignmentConfig(
        variant=variant,
        alpha=cfg.align_alpha,
        epochs=cfg.align_epochs,
        learning_rate=cfg.align_lr,
        k=k,
        sample_fraction=None if k is not None else cfg.aligned_m_fraction,
        split="test",
        seed=derive_seed(seed, label),
    )


def evaluate_seed(cfg: ExperimentConfig, art: SeedArtifacts) -> list[EvalRow]:
    """Produce report rows for {ft, mtl, base, merged methods} x protocols."""
    rows: list[EvalRow] = []
    seed = art.seed
    base_encoder = MlpEncoder.from_params(art.theta_b)

    # candidate encoders scored as "the merged model" per row
    candidates: list[tuple[str, str, MlpEncoder | None]] = [
        ("ft", "-", None),  # per task: its own fine-tuned encoder
        ("mtl", "-", art.mtl.encoder),
        ("base", "-", base_encoder),
    ]
    for method, params in art.merged.items():
        candidates.append(("merged", METHOD_LABELS[method], MlpEncoder.from_params(params)))

    for ds in art.datasets:
        task = ds.task_id
        teacher = art.finetuned_model(task)
        anchors = sample_few_shot(ds, cfg.knn_k, "train", derive_seed(seed, f"anchors:{task}"))
        for model_name, method, encoder in candidates:
            enc = teacher.encoder if encoder is None else encoder
            # the head the current protocol scores through
            head = art.mtl.heads[task] if model_name == "mtl" else teacher.head
            for protocol in cfg.protocols:
                if protocol == "current":
                    acc = current_eval(enc, head, ds)
                    rows.append(EvalRow(model_name, method, protocol, task, "-", seed, acc))
                elif protocol == "knn":
                    acc = knn_eval(enc, anchors, ds)
                    rows.append(
                        EvalRow(model_name, method, protocol, task, str(cfg.knn_k), seed, acc)
                    )
                elif protocol == "ft-classifier":
                    for k in (cfg.ftc_k, *cfg.k_sweep):
                        a_cfg = _align_cfg(
                            cfg, VARIANT_CLASSIFIER, seed,
                            f"align:{task}:ft-classifier:{model_name}:{method}:{k}", k,
                        )
                        acc, _ = ft_classifier_eval(enc, teacher, ds, a_cfg)
                        rows.append(
                            EvalRow(model_name, method, protocol, task, str(k), seed, acc)
                        )
                elif protocol == "aligned-m":
                    a_cfg = _align_cfg(
                        cfg, VARIANT_MAPPING, seed,
                        f"align:{task}:aligned-m:{model_name}:{method}", None,
                    )
                    acc, _ = aligned_m_eval(enc, teacher, ds, a_cfg)
                    rows.append(
                        EvalRow(model_name, method, protocol, task, a_cfg.k_or_fraction, seed, acc)
                    )
                elif protocol == "orth-m":
                    a_cfg = _align_cfg(
                        cfg, VARIANT_ORTH_MAPPING, seed,
                        f"align:{task}:orth-m:{model_name}:{method}", None,
                    )
                    acc, _ = aligned_m_eval(enc, teacher, ds, a_cfg)
                    rows.append(
                        EvalRow(model_name, method, protocol, task, a_cfg.k_or_fraction, seed, acc)
                    )
    return rows


# ---------------------------------------------------------------------------
# Full run with artifact persistence
# ---------------------------------------------------------------------------


def summarize(rows: list[EvalRow]) -> list[dict]:
    """Mean/std across seeds of per-seed task-mean accuracy, per evaluation cell."""
    per_seed: dict[tuple, dict[int, list[float]]] = {}
    for r in rows:
        key = (r.model, r.method, r.protocol, r.k_or_fraction)
        per_seed.setdefault(key, {}).setdefault(r.seed, []).append(r.accuracy)
    out = []
    for key in sorted(per_seed):
        means = [float(np.mean(accs)) for _, accs in sorted(per_seed[key].items())]
        out.append(
            {
                "model": key[0],
                "method": key[1],
                "protocol": key[2],
                "k_or_fraction": key[3],
                "mean_accuracy": float(np.mean(means)),
                "std_accuracy": float(np.std(means)),
                "num_seeds": len(means),
            }
        )
    return out


def write_summary_csv(path, summary: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = [
            "model", "method", "protocol", "k_or_fraction",
            "mean_accuracy", "std_accuracy", "num_seeds",
        ]
        writer.writerow(cols)
        for rec in summary:
            writer.writerow(
                [
                    rec["model"], rec["method"], rec["protocol"], rec["k_or_fraction"],
                    repr(rec["mean_accuracy"]), repr(rec["std_accuracy"]), rec["num_seeds"],
                ]
            )


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> EvalReport:
    """Execute the full pipeline for every seed and write all artifacts.

    Deterministic: rerunning with the same config produces byte-identical
    reports.
    """
    os.makedirs(out_dir, exist_ok=True)
    digest = cfg.digest()
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"config_digest": digest, **cfg.to_json_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    report = EvalReport(digest)
    for seed in cfg.seeds:
        art = build_seed_artifacts(cfg, seed, threads=threads)
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        os.makedirs(os.path.join(seed_dir, "data"), exist_ok=True)
        for ds in art.datasets:
            export_dataset_csv(
                ds,
                os.path.join(seed_dir, "data", f"task{ds.task_id}.csv"),
                os.path.join(seed_dir, "data", f"task{ds.task_id}.splits.csv"),
            )
        save_checkpoint(art.theta_b, os.path.join(seed_dir, "base.ckpt"))
        for task_id, result in art.finetuned.items():
            save_checkpoint(
                pack_task_model(result.model), os.path.join(seed_dir, f"task{task_id}.ckpt")
            )
            write_history_csv(
                result.history, os.path.join(seed_dir, f"task{task_id}_history.csv")
            )
        mtl_tensors = list(art.mtl.encoder.params.items())
        for task_id, head in sorted(art.mtl.heads.items()):
            mtl_tensors.append((f"head{task_id}.weight", head.weight))
            if head.bias is not None:
                mtl_tensors.append((f"head{task_id}.bias", head.bias))
        save_checkpoint(ModelParams(mtl_tensors, check=False), os.path.join(seed_dir, "mtl.ckpt"))
        for method, params in art.merged.items():
            label = METHOD_LABELS[method]
            ckpt = os.path.join(seed_dir, f"merged_{label}.ckpt")
            save_checkpoint(params, ckpt)
            manifest = {
                "method": method,
                "lambda": art.merge_lambdas[method],
                "config_digest": digest,
                "inputs": [f"task{ds.task_id}.ckpt" for ds in art.datasets],
            }
            with open(os.path.join(seed_dir, f"merged_{label}.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")

        report.extend(evaluate_seed(cfg, art))

    report.to_csv(os.path.join(out_dir, "report.csv"))
    report.to_json(os.path.join(out_dir, "report.json"))
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summarize(report.rows))
    return report
