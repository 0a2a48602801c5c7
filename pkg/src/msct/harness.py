"""Experiment driver: training loop, configuration sweep, result tables.

A run is a pure function of (TrainConfig, seed): shuffling, dropout, and
augmentation each draw from their own child stream keyed by purpose tag and
epoch, preprocessing is cached by content hash, and all reductions happen
in fixed order, so reruns produce byte-identical result files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import ImagingConfig, lung_masks_volume
from .kds import AreaProfile, bundle as make_bundle, kds_select
from .metrics import (
    CSV_COLUMNS,
    EvalReport,
    LabeledBundle,
    evaluate,
    fmt,
    report_csv_fields,
)
from .nncore import (
    AdamHyper,
    AdamState,
    AugmentConfig,
    LossSpec,
    ModelConfig,
    ModelParams,
    adam_step,
    augment,
    backward,
    init_params,
)
from .objective import SourcePriors, estimate_priors
from .rng import child_rng, content_hash
from .scanio import ManifestRecord, load_manifest, read_scan

LOSS_KINDS = ("bce_only", "mt_ce", "mt_la")


@dataclass(frozen=True)
class TrainConfig:
    manifest: str
    loss: str = "bce_only"
    gamma: float = 0.0
    epochs: int = 8
    batch_size: int = 10
    lr: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    resolution: int = 64
    feature_dim: int = 128
    widths: tuple[int, ...] = (8, 16, 32)
    mask_threshold: float = 0.35
    decision_threshold: float = 0.5
    augment: bool = True
    cache_dir: str | None = None

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.loss == "bce_only":
            object.__setattr__(self, "gamma", 0.0)
        elif self.gamma <= 0:
            raise ValueError(f"{self.loss} with gamma = 0 duplicates the baseline; set gamma > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def imaging(self) -> ImagingConfig:
        return ImagingConfig(threshold=self.mask_threshold, target=self.resolution)

    def model(self) -> ModelConfig:
        return ModelConfig(resolution=self.resolution, feature_dim=self.feature_dim, widths=self.widths)


@dataclass
class EpochStats:
    epoch: int
    detection_loss: float
    source_loss: float
    total_loss: float
    val_f1: float
    val_final_score: float


@dataclass
class RunResult:
    config: TrainConfig
    best_report: EvalReport
    best_epoch: int
    history: list[EpochStats]
    best_params: ModelParams


class ScanRejectedError(ValueError):
    """A manifest scan failed preprocessing validity checks."""


def preprocess_record(
    record: ManifestRecord, base_dir: Path, config: ImagingConfig, cache_dir: Path | None
) -> LabeledBundle:
    """Preprocess one scan into a bundle, with content-hash disk caching."""
    scan_path = base_dir / record.path
    raw = scan_path.read_bytes()
    key = content_hash(raw, config.cache_token().encode())
    cache_file = cache_dir / f"{key}.npy" if cache_dir is not None else None
    if cache_file is not None and cache_file.exists():
        images = np.load(cache_file)
    else:
        volume = read_scan(scan_path, record.scan_id, record.source, record.label)
        masks = lung_masks_volume(volume.voxels / 65535.0, config.threshold)
        areas = masks.sum(axis=(1, 2))
        usable = np.flatnonzero(areas > 0)
        if len(usable) < 5:
            raise ScanRejectedError(f"scan {record.scan_id}: fewer than five usable slices")
        profile = AreaProfile(areas=areas[usable].astype(np.float64), slice_indices=usable)
        chosen = kds_select(profile)
        images = np.stack(make_bundle(volume, chosen, config).images)
        if cache_file is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)
            np.save(cache_file, images)
    return LabeledBundle(scan_id=record.scan_id, source=record.source, label=record.label, images=images)


def load_dataset(
    manifest_path: str | Path, config: ImagingConfig, cache_dir: str | Path | None = None
) -> dict[str, list[LabeledBundle]]:
    """Preprocess every manifest scan into per-split bundle lists."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    cache = Path(cache_dir) if cache_dir is not None else None
    splits: dict[str, list[LabeledBundle]] = {"train": [], "val": []}
    for rec in records:
        splits[rec.split].append(preprocess_record(rec, manifest_path.parent, config, cache))
    return splits


def _chunks(seq: np.ndarray, size: int):
    for start in range(0, len(seq), size):
        yield seq[start : start + size]


def train(
    config: TrainConfig,
    data: dict[str, list[LabeledBundle]] | None = None,
    priors_override: SourcePriors | None = None,
) -> RunResult:
    """Run the full training protocol and return the best-F1 checkpoint.

    ``data`` lets callers (the sweep) share preprocessed bundles across runs;
    ``priors_override`` substitutes the estimated source priors (test hook).
    """
    records = load_manifest(config.manifest)
    priors = None
    if config.loss == "mt_la":
        priors = priors_override if priors_override is not None else estimate_priors(records)
    if data is None:
        data = load_dataset(config.manifest, config.imaging(), config.cache_dir)
    train_items, val_items = data["train"], data["val"]
    if not train_items:
        raise ValueError("empty training split")
    if not val_items:
        raise ValueError("empty validation split")

    model_cfg = config.model()
    params = init_params(model_cfg, child_rng(config.seed, "init"))
    state = AdamState.init_like(params)
    hyper = AdamHyper(lr=config.lr, weight_decay=config.weight_decay)
    spec = LossSpec(kind=config.loss, gamma=config.gamma, priors=priors)
    trainable = [True] * len(params.tensors())
    if config.loss == "bce_only":
        trainable[-1] = trainable[-2] = False  # source head detached from the objective

    aug_cfg = AugmentConfig()
    best_report: EvalReport | None = None
    best_epoch = -1
    best_params = params
    history: list[EpochStats] = []
    n = len(train_items)
    for epoch in range(config.epochs):
        perm = child_rng(config.seed, "shuffle", epoch).permutation(n)
        aug_rng = child_rng(config.seed, "augment", epoch)
        drop_rng = child_rng(config.seed, "dropout", epoch)
        det_sum = src_sum = tot_sum = 0.0
        for batch_idx in _chunks(perm, config.batch_size):
            items = [train_items[i] for i in batch_idx]
            if config.augment:
                images = np.stack(
                    [np.stack([augment(s, aug_rng, aug_cfg) for s in item.images]) for item in items]
                )
            else:
                images = np.stack([item.images for item in items])
            labels = np.array([item.label for item in items])
            sources = np.array([item.source for item in items])
            breakdown, grads = backward(
                params,
                images,
                labels,
                sources,
                spec,
                mode="train",
                rng=drop_rng,
                scan_ids=[item.scan_id for item in items],
            )
            params, state = adam_step(params, grads, state, hyper, trainable)
            weight = len(items)
            det_sum += breakdown.detection_loss * weight
            src_sum += breakdown.source_loss * weight
            tot_sum += breakdown.total * weight
        report = evaluate(params, val_items, threshold=config.decision_threshold)
        history.append(
            EpochStats(
                epoch=epoch,
                detection_loss=det_sum / n,
                source_loss=src_sum / n,
                total_loss=tot_sum / n,
                val_f1=report.f1,
                val_final_score=report.final_score,
            )
        )
        if best_report is None or report.f1 > best_report.f1:
            best_report = report
            best_epoch = epoch
            best_params = params
    return RunResult(
        config=config,
        best_report=best_report,
        best_epoch=best_epoch,
        history=history,
        best_params=best_params,
    )


@dataclass
class SweepRow:
    config_id: str
    loss: str
    gamma: float
    seed: int
    status: str
    best_epoch: int = -1
    report: EvalReport | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)


def sweep(
    base: TrainConfig,
    gammas: list[float],
    losses: list[str],
    seeds: list[int],
    progress=None,
) -> SweepResult:
    """Grid of (loss, gamma, seed) runs plus the per-seed BCE baseline.

    Individual failures are recorded in their row; the sweep continues.
    """
    if not gammas or not losses or not seeds:
        raise ValueError("gammas, losses, and seeds must be nonempty")
    data = load_dataset(base.manifest, base.imaging(), base.cache_dir)
    result = SweepResult()
    grid: list[tuple[str, str, float, int]] = []
    for seed in seeds:
        grid.append((f"baseline-s{seed}", "bce_only", 0.0, seed))
        for loss in losses:
            for gamma in gammas:
                grid.append((f"{loss}-g{gamma:g}-s{seed}", loss, gamma, seed))
    for config_id, loss, gamma, seed in grid:
        if progress is not None:
            progress(config_id)
        cfg = replace(base, loss=loss, gamma=gamma, seed=seed)
        try:
            run = train(cfg, data=data)
            result.rows.append(
                SweepRow(
                    config_id=config_id,
                    loss=loss,
                    gamma=gamma,
                    seed=seed,
                    status="ok",
                    best_epoch=run.best_epoch,
                    report=run.best_report,
                )
            )
        except Exception as exc:  # noqa: BLE001 - sweep rows capture failures
            result.rows.append(
                SweepRow(config_id=config_id, loss=loss, gamma=gamma, seed=seed, status=f"error: {exc}")
            )
    return result


def results_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in result.rows:
        fields = [row.config_id, row.loss, fmt(row.gamma), str(row.seed), row.status, str(row.best_epoch)]
        if row.report is not None:
            fields += report_csv_fields(row.report)
        else:
            fields += [""] * (len(CSV_COLUMNS) - len(fields))
        writer.writerow(fields)
    return buf.getvalue()


def run_csv(result: RunResult, config_id: str = "run") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    cfg = result.config
    fields = [config_id, cfg.loss, fmt(cfg.gamma), str(cfg.seed), "ok", str(result.best_epoch)]
    fields += report_csv_fields(result.best_report)
    writer.writerow(fields)
    return buf.getvalue()


def trajectory_csv(result: RunResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "detection_loss", "source_loss", "total_loss", "val_f1", "val_final_score"])
    for st in result.history:
        writer.writerow(
            [str(st.epoch), fmt(st.detection_loss), fmt(st.source_loss), fmt(st.total_loss), fmt(st.val_f1), fmt(st.val_final_score)]
        )
    return buf.getvalue()


_LOSS_TITLES = {"bce_only": "Baseline (BCE)", "mt_ce": "Multi-task (CE)", "mt_la": "Multi-task + LA"}


def _aggregate(rows: list[SweepRow]) -> list[dict]:
    groups: dict[tuple[str, float], list[SweepRow]] = {}
    order: list[tuple[str, float]] = []
    for row in rows:
        if row.status != "ok":
            continue
        key = (row.loss, row.gamma)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        members = groups[key]
        metrics_arr = {
            name: np.array([getattr(m.report, name) for m in members])
            for name in ("accuracy", "f1", "auc", "sensitivity", "specificity", "final_score")
        }
        out.append(
            {
                "loss": key[0],
                "gamma": key[1],
                "n": len(members),
                "mean": {k: float(v.mean()) for k, v in metrics_arr.items()},
                "std": {k: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for k, v in metrics_arr.items()},
            }
        )
    return out


def summary_markdown(result: SweepResult) -> str:
    """Aggregated results table (mean +- std across seeds when >= 2)."""
    agg = _aggregate(result.rows)
    multi_seed = any(g["n"] > 1 for g in agg)
    lines = [
        "| Configuration | gamma | Accuracy | F1 | AUC | Sensitivity | Specificity | Final Score |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for g in agg:
        title = _LOSS_TITLES.get(g["loss"], g["loss"])
        gamma = "--" if g["loss"] == "bce_only" else f"{g['gamma']:g}"

        def cell(name):
            if multi_seed and g["n"] > 1:
                return f"{g['mean'][name]:.4f} ± {g['std'][name]:.4f}"
            return f"{g['mean'][name]:.4f}"

        lines.append(
            f"| {title} | {gamma} | {cell('accuracy')} | {cell('f1')} | {cell('auc')} "
            f"| {cell('sensitivity')} | {cell('specificity')} | {cell('final_score')} |"
        )
    failures = [row for row in result.rows if row.status != "ok"]
    if failures:
        lines.append("")
        lines.append("Failed runs:")
        for row in failures:
            lines.append(f"- {row.config_id}: {row.status}")
    return "\n".join(lines) + "\n"


def gamma_curve_csv(result: SweepResult, loss: str = "mt_la") -> str:
    """Two-column final-score-vs-gamma data (baseline contributes gamma = 0)."""
    agg = _aggregate(result.rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["gamma", "final_score"])
    for g in agg:
        if g["loss"] == "bce_only":
            writer.writerow([fmt(0.0), fmt(g["mean"]["final_score"])])
    for g in sorted((g for g in agg if g["loss"] == loss), key=lambda g: g["gamma"]):
        writer.writerow([fmt(g["gamma"]), fmt(g["mean"]["final_score"])])
    return buf.getvalue()


def rows_from_csv(text: str) -> SweepResult:
    """Rebuild sweep rows from a results CSV (used by the report command)."""
    from .metrics import SourceF1

    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_COLUMNS:
        raise ValueError("unrecognized results CSV header")
    result = SweepResult()
    for fields in reader:
        row = SweepRow(
            config_id=fields[0],
            loss=fields[1],
            gamma=float(fields[2]),
            seed=int(fields[3]),
            status=fields[4],
            best_epoch=int(fields[5]) if fields[5] else -1,
        )
        if row.status == "ok":
            vals = fields[6:]
            per_source = {
                i: SourceF1(f1_covid=float(vals[5 + 2 * i]), f1_noncovid=float(vals[6 + 2 * i]))
                for i in range(4)
            }
            row.report = EvalReport(
                accuracy=float(vals[0]),
                f1=float(vals[1]),
                auc=float(vals[2]),
                sensitivity=float(vals[3]),
                specificity=float(vals[4]),
                per_source=per_source,
                final_score=float(vals[13]),
            )
        result.rows.append(row)
    return result


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file with # comments and namespaced keys."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
