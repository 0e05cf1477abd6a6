"""Quantitative evaluation: reconstruction error, label accuracy, cost.

Reconstruction MSE is per-pixel (mean over batch, channels and pixels),
so values are directly comparable to trivial predictors on [0, 1]
images. Per-iteration metrics persist as append-only CSV rows with
repr-formatted floats, which makes reruns byte-comparable; wall-clock
timing lives in a separate cost report, never in the metrics records.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import UsageError
from .graph import ModelGraph, count_flops

METRIC_FIELDS = (
    "iteration",
    "client",
    "train_loss",
    "train_acc",
    "attack_mse",
    "aux_mse",
    "label_acc",
    "loss_sim",
    "loss_d1",
    "loss_dec",
    "loss_d2",
    "loss_head",
)


def attack_mse(x_hat: torch.Tensor, x: torch.Tensor) -> float:
    """Mean squared error over all pixels and batch entries."""
    if x_hat.shape != x.shape:
        raise UsageError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return torch.mean((x_hat - x) ** 2).item()


def label_accuracy(y_hat: torch.Tensor, y: torch.Tensor) -> float:
    if y_hat.shape != y.shape:
        raise UsageError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    return (y_hat == y).float().mean().item()


def mean_image_mse(images: torch.Tensor) -> float:
    """MSE of the trivial predictor that always outputs the mean image."""
    mean = images.mean(dim=0, keepdim=True)
    return torch.mean((images - mean) ** 2).item()


@dataclass
class MetricsRecord:
    iteration: int
    client: int = 0
    train_loss: float = math.nan
    train_acc: float = math.nan
    attack_mse: float = math.nan
    aux_mse: float = math.nan
    label_acc: float = math.nan
    loss_sim: float = math.nan
    loss_d1: float = math.nan
    loss_dec: float = math.nan
    loss_d2: float = math.nan
    loss_head: float = math.nan


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_metrics(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in records:
            writer.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kwargs = {}
            for f in METRIC_FIELDS:
                raw = row[f]
                if f in ("iteration", "client"):
                    kwargs[f] = int(raw)
                else:
                    kwargs[f] = float(raw) if raw else math.nan
            records.append(MetricsRecord(**kwargs))
    return records


def training_flops_per_iteration(graphs: list[ModelGraph], batch_size: int) -> int:
    """Analytic cost of one protocol+attack iteration.

    Every participating model does a forward pass (count_flops) and a
    backward pass at twice that, so one iteration costs 3x the summed
    forward FLOPs of all trained components.
    """
    return 3 * sum(count_flops(g, batch_size) for g in graphs)


@dataclass
class CostReport:
    wall_mean: float
    wall_std: float
    flops_per_iteration: int
    iterations: int


def cost_report(wall_times: list[float], graphs: list[ModelGraph],
                batch_size: int) -> CostReport:
    n = len(wall_times)
    mean = sum(wall_times) / n if n else math.nan
    var = sum((t - mean) ** 2 for t in wall_times) / n if n else math.nan
    return CostReport(
        wall_mean=mean,
        wall_std=math.sqrt(var) if n else math.nan,
        flops_per_iteration=training_flops_per_iteration(graphs, batch_size),
        iterations=n,
    )
