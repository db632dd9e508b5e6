"""Training loop, Huber loss and displacement-error evaluation."""

import copy
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader
from tqdm import tqdm

from .dataset import SampleDataset
from .exceptions import DivergenceDetected, IndexOutOfRange, ShapeMismatch
from .model import ModelConfig, ModelKind, build_model
from .raster import TICK_SECONDS

logger = logging.getLogger(__name__)

SHORT_HORIZON_SECONDS = 4.0
STOP_DEVIATION_METERS = 2.0
COMPARISON_ORDER = [
    ModelKind.LSTM.value,
    ModelKind.SAPI_NO_LRA.value,
    ModelKind.SAPI_NO_TRAFFIC.value,
    ModelKind.SAPI.value,
]
COMPARISON_COLUMNS = [
    "model",
    "4s FDE",
    "4s FDE std",
    "6s FDE",
    "6s FDE std",
    "6s ADE",
    "stop deviation",
]

ArrayLike = Union[np.ndarray, torch.Tensor]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(0.003, gt=0)
    huber_r: float = Field(3.0, gt=0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(10, ge=1)
    seed: int = 0
    max_loss: float = Field(1e6, gt=0, description="batch loss ceiling treated as divergence")
    betas: Tuple[float, float] = (0.9, 0.999)


class EvalReport(BaseModel):
    """Displacement-error summary over one sample set, in meters."""

    model_config = ConfigDict(extra="forbid")

    ade_6s: float = Field(ge=0)
    fde_4s: float = Field(ge=0)
    fde_4s_std: float = Field(ge=0)
    fde_6s: float = Field(ge=0)
    fde_6s_std: float = Field(ge=0)
    per_step_errors: List[float]
    stop_deviation: Optional[float] = Field(None, ge=0, le=1)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.model_validate_json(text)

    def save(self, path: str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.to_json())
        return out

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(f"Evaluation report not found: {path}")
        return cls.from_json(source.read_text())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_ade: float


@dataclass
class TrainResult:
    model: nn.Module
    kind: ModelKind
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ade: float = math.inf
    stopped_early: bool = False


def huber_loss(pred: torch.Tensor, gt: torch.Tensor, r: float = 3.0) -> torch.Tensor:
    """
    Huber loss on per-step displacement magnitudes.

    Each step contributes e^2 / (2r) when e < r and e - r otherwise, where e is
    the Euclidean distance between predicted and true positions. Steps are
    summed; a leading batch axis is averaged.

    Args:
        pred: Predicted positions (n, 2) or (B, n, 2)
        gt: True positions, same shape
        r: Threshold between the quadratic and linear branches

    Returns:
        Scalar tensor

    Raises:
        ShapeMismatch: If the shapes differ or the last axis isn't 2
    """
    if pred.shape != gt.shape or pred.shape[-1] != 2 or pred.dim() not in (2, 3):
        raise ShapeMismatch(
            f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} must match as (.., n, 2)"
        )
    if r <= 0:
        raise ValueError(f"huber threshold must be positive, got {r}")
    squared = ((pred - gt) ** 2).sum(dim=-1)
    positive = squared > 0
    # sqrt only where positive, so the gradient at zero error stays finite
    distance = torch.where(
        positive, torch.sqrt(torch.where(positive, squared, torch.ones_like(squared))), squared
    )
    per_step = torch.where(distance < r, squared / (2.0 * r), distance - r)
    per_sample = per_step.sum(dim=-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def _as_numpy(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().double().numpy()
    return np.asarray(values, dtype=float)


def displacement_error(pred: ArrayLike, gt: ArrayLike, k: int) -> float:
    """
    Euclidean distance between prediction and truth at step k (1-based).

    Raises:
        IndexOutOfRange: If k is outside 1..n
    """
    pred_np, gt_np = _as_numpy(pred), _as_numpy(gt)
    if pred_np.shape != gt_np.shape:
        raise ShapeMismatch(f"pred {pred_np.shape} and gt {gt_np.shape} differ")
    n = pred_np.shape[-2]
    if not 1 <= k <= n:
        raise IndexOutOfRange(f"step {k} outside 1..{n}")
    return float(np.linalg.norm(pred_np[..., k - 1, :] - gt_np[..., k - 1, :], axis=-1))


def horizon_step(seconds: float) -> int:
    """Prediction step whose timestamp is the given horizon (10 for 4 s at 0.4 s ticks)."""
    return int(round(seconds / TICK_SECONDS))


def compute_report(pred: ArrayLike, gt: ArrayLike) -> EvalReport:
    """
    Summarise displacement errors of (N, n, 2) predictions.

    Standard deviations are population deviations over samples.
    """
    pred_np, gt_np = _as_numpy(pred), _as_numpy(gt)
    if pred_np.shape != gt_np.shape or pred_np.ndim != 3 or pred_np.shape[0] == 0:
        raise ShapeMismatch(f"expected matching non-empty (N, n, 2) arrays, got {pred_np.shape}")
    errors = np.linalg.norm(pred_np - gt_np, axis=-1)
    per_step = errors.mean(axis=0)
    n = errors.shape[1]
    short = horizon_step(SHORT_HORIZON_SECONDS)
    if short > n:
        logger.warning(f"Horizon of {n} steps is shorter than {SHORT_HORIZON_SECONDS}s")
        short = n
    return EvalReport(
        ade_6s=float(errors.mean()),
        fde_4s=float(per_step[short - 1]),
        fde_4s_std=float(errors[:, short - 1].std()),
        fde_6s=float(per_step[-1]),
        fde_6s_std=float(errors[:, -1].std()),
        per_step_errors=[float(v) for v in per_step],
    )


def constant_velocity_prediction(history_positions: ArrayLike, n: int) -> np.ndarray:
    """Extrapolate the last two history positions linearly for n steps."""
    history = _as_numpy(history_positions)
    last = history[-1]
    velocity = history[-1] - history[-2] if len(history) > 1 else np.zeros(2)
    steps = np.arange(1, n + 1, dtype=float)[:, None]
    return last + steps * velocity


def _loader(dataset: SampleDataset, batch_size: int, shuffle: bool, seed: int = 0) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator)


def _forward(model: nn.Module, batch: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return model(batch["history"], batch.get("rasters"))


def predict(
    model: nn.Module, dataset: SampleDataset, batch_size: int = 64
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run a model over a dataset in order.

    Returns:
        (predictions, ground truth), both (N, n, 2) float64
    """
    model.eval()
    preds, truths = [], []
    with torch.no_grad():
        for batch in _loader(dataset, batch_size, shuffle=False):
            preds.append(_forward(model, batch).double().cpu().numpy())
            truths.append(batch["future"].double().cpu().numpy())
    if not preds:
        return np.zeros((0, 0, 2)), np.zeros((0, 0, 2))
    return np.concatenate(preds), np.concatenate(truths)


def evaluate(model: nn.Module, dataset: SampleDataset, batch_size: int = 64) -> EvalReport:
    """
    Evaluate a model on a test set.

    The report's stop_deviation is filled when the set holds stop_for_traffic samples.

    Raises:
        ValueError: If the dataset is empty
    """
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty sample set")
    pred, gt = predict(model, dataset, batch_size)
    report = compute_report(pred, gt)
    report.stop_deviation = _stop_deviation(pred, dataset, STOP_DEVIATION_METERS)
    logger.info(
        f"Evaluated {len(dataset)} samples: ADE {report.ade_6s:.3f} m, "
        f"FDE@4s {report.fde_4s:.3f} m, FDE@6s {report.fde_6s:.3f} m"
    )
    if report.stop_deviation is not None:
        logger.info(f"stop_for_traffic deviation rate {report.stop_deviation:.1%}")
    return report


def evaluate_by_behavior(
    model: nn.Module, dataset: SampleDataset, batch_size: int = 64
) -> Dict[str, EvalReport]:
    """One EvalReport per behavior label present in the dataset."""
    pred, gt = predict(model, dataset, batch_size)
    groups: Dict[str, List[int]] = defaultdict(list)
    for idx in range(len(dataset)):
        groups[dataset.sample(idx).behavior_label].append(idx)
    return {label: compute_report(pred[idx], gt[idx]) for label, idx in sorted(groups.items())}


def _stop_deviation(pred: np.ndarray, dataset: SampleDataset, threshold: float) -> Optional[float]:
    deviations = []
    for idx in range(len(dataset)):
        sample = dataset.sample(idx)
        if sample.behavior_label != "stop_for_traffic":
            continue
        linear = constant_velocity_prediction(sample.history_positions, sample.n)
        deviations.append(np.linalg.norm(pred[idx, -1] - linear[-1]) > threshold)
    if not deviations:
        return None
    return float(np.mean(deviations))


def stop_deviation_rate(
    model: nn.Module,
    dataset: SampleDataset,
    threshold: float = STOP_DEVIATION_METERS,
    batch_size: int = 64,
) -> Optional[float]:
    """
    Fraction of stop-for-traffic samples whose final predicted position is more
    than threshold meters away from constant-velocity extrapolation.

    Returns:
        The fraction, or None when the dataset holds no stop-for-traffic samples
    """
    pred, _ = predict(model, dataset, batch_size)
    rate = _stop_deviation(pred, dataset, threshold)
    if rate is None:
        logger.warning("No stop_for_traffic samples to measure deviation on")
    return rate


def _check_finite(value: float, max_loss: float, where: str) -> None:
    if not math.isfinite(value) or value > max_loss:
        logger.error(f"Training diverged: {where} = {value}")
        raise DivergenceDetected(f"{where} = {value} (ceiling {max_loss})")


def train(
    train_set: SampleDataset,
    val_set: SampleDataset,
    kind: ModelKind,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    show_progress: bool = False,
) -> TrainResult:
    """
    Train one model kind with Adam on the Huber loss.

    Validation ADE is measured after every epoch; the best weights are
    restored at the end, and training stops after `patience` epochs without
    improvement.

    Args:
        train_set: Training samples
        val_set: Validation samples
        kind: Model kind
        train_config: Optimiser and stopping settings
        model_config: Layer sizes
        show_progress: Show a progress bar over epochs

    Returns:
        TrainResult with the best model and the per-epoch log

    Raises:
        ValueError: If either split is empty
        DivergenceDetected: If a loss or gradient norm becomes non-finite or exceeds max_loss
    """
    cfg = train_config or TrainConfig()
    kind = ModelKind(kind)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")

    model = build_model(kind, model_config, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    loader = _loader(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed)
    result = TrainResult(model=model, kind=kind)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0

    epochs = tqdm(range(1, cfg.max_epochs + 1), desc=kind.value, disable=not show_progress)
    for epoch in epochs:
        model.train()
        total, count = 0.0, 0
        for batch in loader:
            optimizer.zero_grad()
            target = batch["future"].to(torch.float32)
            loss = huber_loss(_forward(model, batch), target, cfg.huber_r)
            _check_finite(loss.item(), cfg.max_loss, f"train loss at epoch {epoch}")
            loss.backward()
            grad_norm = nn.utils.clip_grad_norm_(model.parameters(), math.inf)
            _check_finite(float(grad_norm), math.inf, f"gradient norm at epoch {epoch}")
            optimizer.step()
            total += loss.item() * len(batch["future"])
            count += len(batch["future"])

        pred, gt = predict(model, val_set, cfg.batch_size)
        val_loss = huber_loss(torch.from_numpy(pred), torch.from_numpy(gt), cfg.huber_r).item()
        _check_finite(val_loss, cfg.max_loss, f"validation loss at epoch {epoch}")
        val_ade = float(np.linalg.norm(pred - gt, axis=-1).mean())
        record = EpochRecord(epoch, total / count, val_loss, val_ade)
        result.history.append(record)
        epochs.set_postfix(train=f"{record.train_loss:.3f}", val_ade=f"{val_ade:.3f}")
        logger.debug(
            f"{kind.value} epoch {epoch}: train {record.train_loss:.4f}, "
            f"val {val_loss:.4f}, val ADE {val_ade:.4f}"
        )

        if val_ade < result.best_val_ade:
            result.best_val_ade = val_ade
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stopped_early = True
                logger.warning(
                    f"Early stop of {kind.value} at epoch {epoch}: "
                    f"no improvement for {stale} epochs"
                )
                break

    model.load_state_dict(best_state)
    logger.info(
        f"Trained {kind.value}: best val ADE {result.best_val_ade:.3f} m "
        f"at epoch {result.best_epoch}"
    )
    return result


def write_training_log(history: Sequence[EpochRecord], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_ade"])
        for record in history:
            writer.writerow([record.epoch, record.train_loss, record.val_loss, record.val_ade])
    return out


def comparison_table(reports: Mapping[str, EvalReport]) -> List[List[object]]:
    """Rows in lstm, sapi_no_lra, sapi_no_traffic, sapi order for the kinds present."""
    rows: List[List[object]] = []
    for kind in COMPARISON_ORDER:
        report = reports.get(kind)
        if report is None:
            continue
        rows.append(
            [
                kind,
                report.fde_4s,
                report.fde_4s_std,
                report.fde_6s,
                report.fde_6s_std,
                report.ade_6s,
                report.stop_deviation,
            ]
        )
    return rows


def _cell(value: Optional[float], spec: str, missing: str) -> str:
    return missing if value is None else format(value, spec)


def write_comparison_csv(reports: Mapping[str, EvalReport], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(COMPARISON_COLUMNS)
        for row in comparison_table(reports):
            writer.writerow([row[0], *(_cell(value, ".4f", "") for value in row[1:])])
    return out


def format_comparison(reports: Mapping[str, EvalReport]) -> str:
    header = f"{COMPARISON_COLUMNS[0]:<16}" + "".join(f"{c:>16}" for c in COMPARISON_COLUMNS[1:])
    lines = [header]
    for row in comparison_table(reports):
        cells = (_cell(value, ".3f", "-") for value in row[1:])
        lines.append(f"{row[0]:<16}" + "".join(f"{cell:>16}" for cell in cells))
    return "\n".join(lines)


class BenchmarkRow(BaseModel):
    """Mean and population spread of one model kind's test metrics across seeds."""

    model_config = ConfigDict(extra="forbid")

    kind: str
    seeds: List[int]
    ade_6s_mean: float
    ade_6s_std: float
    fde_4s_mean: float
    fde_4s_std: float
    fde_6s_mean: float
    fde_6s_std: float
    stop_deviation_mean: Optional[float] = None
    per_step_errors: List[float]
    step_errors_non_decreasing: bool


BENCHMARK_COLUMNS = [
    "model",
    "seeds",
    "6s ADE",
    "6s ADE std",
    "4s FDE",
    "4s FDE std",
    "6s FDE",
    "6s FDE std",
    "stop deviation",
    "monotone steps",
]


def is_non_decreasing(values: Sequence[float], tolerance: float = 0.0) -> bool:
    """True when no value drops more than tolerance below its predecessor."""
    return all(b >= a - tolerance for a, b in zip(values, values[1:]))


def summarize_benchmark(
    runs: Mapping[int, Mapping[str, EvalReport]], tolerance: float = 0.0
) -> Dict[str, BenchmarkRow]:
    """
    Aggregate per-seed test reports into one row per model kind.

    Args:
        runs: seed -> {kind: EvalReport}
        tolerance: Allowed drop between neighbouring steps of the averaged error curve

    Returns:
        kind -> BenchmarkRow, in comparison order
    """
    summary: Dict[str, BenchmarkRow] = {}
    for kind in COMPARISON_ORDER:
        seeds = sorted(seed for seed, reports in runs.items() if kind in reports)
        if not seeds:
            continue
        reports = [runs[seed][kind] for seed in seeds]
        metrics = {
            name: np.array([getattr(r, name) for r in reports])
            for name in ("ade_6s", "fde_4s", "fde_6s")
        }
        stops = [r.stop_deviation for r in reports if r.stop_deviation is not None]
        curve = np.mean([r.per_step_errors for r in reports], axis=0)
        summary[kind] = BenchmarkRow(
            kind=kind,
            seeds=seeds,
            ade_6s_mean=float(metrics["ade_6s"].mean()),
            ade_6s_std=float(metrics["ade_6s"].std()),
            fde_4s_mean=float(metrics["fde_4s"].mean()),
            fde_4s_std=float(metrics["fde_4s"].std()),
            fde_6s_mean=float(metrics["fde_6s"].mean()),
            fde_6s_std=float(metrics["fde_6s"].std()),
            stop_deviation_mean=float(np.mean(stops)) if stops else None,
            per_step_errors=[float(v) for v in curve],
            step_errors_non_decreasing=is_non_decreasing(curve, tolerance),
        )
    return summary


def ordering_wins(
    runs: Mapping[int, Mapping[str, EvalReport]],
    better: str,
    worse: str,
    metric: str = "fde_6s",
) -> Tuple[int, int]:
    """
    Count the seeds where `better` has a strictly lower metric than `worse`.

    Returns:
        (wins, seeds where both kinds were evaluated)
    """
    wins = compared = 0
    for reports in runs.values():
        if better not in reports or worse not in reports:
            continue
        compared += 1
        if getattr(reports[better], metric) < getattr(reports[worse], metric):
            wins += 1
    return wins, compared


EXPECTED_RANKING = [
    ModelKind.SAPI.value,
    ModelKind.SAPI_NO_TRAFFIC.value,
    ModelKind.SAPI_NO_LRA.value,
    ModelKind.LSTM.value,
]


def ranking_holds(
    summary: Mapping[str, BenchmarkRow], ranking: Sequence[str] = tuple(EXPECTED_RANKING)
) -> bool:
    """True when mean 6s ADE strictly increases along ranking for the kinds present."""
    means = [summary[kind].ade_6s_mean for kind in ranking if kind in summary]
    return all(a < b for a, b in zip(means, means[1:]))


def write_benchmark_csv(summary: Mapping[str, BenchmarkRow], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(BENCHMARK_COLUMNS)
        for row in summary.values():
            values = [
                row.ade_6s_mean,
                row.ade_6s_std,
                row.fde_4s_mean,
                row.fde_4s_std,
                row.fde_6s_mean,
                row.fde_6s_std,
                row.stop_deviation_mean,
            ]
            writer.writerow(
                [
                    row.kind,
                    len(row.seeds),
                    *(_cell(value, ".4f", "") for value in values),
                    str(row.step_errors_non_decreasing).lower(),
                ]
            )
    return out


def format_benchmark(summary: Mapping[str, BenchmarkRow]) -> str:
    header = f"{'model':<16}{'seeds':>6}{'6s ADE':>16}{'4s FDE':>16}{'6s FDE':>16}{'stop dev':>10}"
    lines = [header]
    for row in summary.values():
        stop = _cell(row.stop_deviation_mean, ".2f", "-")
        lines.append(
            f"{row.kind:<16}{len(row.seeds):>6}"
            f"{row.ade_6s_mean:>9.3f} ±{row.ade_6s_std:<5.2f}"
            f"{row.fde_4s_mean:>9.3f} ±{row.fde_4s_std:<5.2f}"
            f"{row.fde_6s_mean:>9.3f} ±{row.fde_6s_std:<5.2f}"
            f"{stop:>10}"
        )
    return "\n".join(lines)
