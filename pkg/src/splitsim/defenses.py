"""Client-side mitigations applied inside the protocol loop.

Three mechanisms: dropout inserted after each building block of the
client's partial model, l1/l2 penalties on the client's parameters, and
a decorrelation term that pushes the split-layer representation to be
statistically independent of the raw input. The attacker mirrors dropout
and weight penalties onto its simulator, and adds the same decorrelation
term to the simulator objective, so defended runs stay comparable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .graph import ModelGraph, SkipEdge
from .layers import dropout as dropout_spec

DEFENSE_KINDS = ("none", "dropout", "weight_penalty", "decorrelation")


class DegenerateInputWarning(UserWarning):
    """Distance correlation saw a constant batch; value reported as 0."""


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    rate: float = 0.0      # dropout
    penalty: str = "l2"    # weight_penalty: l1 | l2
    factor: float = 0.0    # weight_penalty
    alpha: float = 0.0     # decorrelation

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.penalty not in ("l1", "l2"):
            raise ConfigError(f"penalty kind must be l1 or l2, got {self.penalty!r}")
        if self.factor < 0:
            raise ConfigError("penalty factor must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")

    @property
    def task_weight(self) -> float:
        return 1.0 - self.alpha if self.kind == "decorrelation" else 1.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "rate": self.rate, "penalty": self.penalty,
            "factor": self.factor, "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        unknown = set(d) - {"kind", "rate", "penalty", "factor", "alpha"}
        if unknown:
            raise ConfigError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


def _block_spans(model: ModelGraph) -> list[tuple[int, int]]:
    bounds = list(model.boundaries) + [len(model.layers)]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def with_dropout(model: ModelGraph, rate: float,
                 through_block: int | None = None) -> ModelGraph:
    """Insert a dropout layer after each building block of the graph.

    Building blocks are the conv blocks after the input conv; the head
    (pooling + dense output), when present, is left alone. With
    `through_block`, insertion stops after that block index, which lets a
    whole backbone be defended only on the client-held blocks before
    splitting.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return model
    ends = []
    for k, (start, stop) in enumerate(_block_spans(model)):
        if k == 0:
            continue  # input conv block
        if through_block is not None and k > through_block:
            continue
        if any(model.layers[i].kind == "conv" for i in range(start, stop)):
            ends.append(stop)
    layers = []
    new_index = {}
    for i, spec in enumerate(model.layers):
        if i in ends:
            layers.append(dropout_spec(rate))
        new_index[i] = len(layers)
        layers.append(spec)
    if len(model.layers) in ends:
        layers.append(dropout_spec(rate))
    skips = tuple(
        SkipEdge(new_index[e.src], new_index[e.dst], e.projection)
        for e in model.skips
    )
    boundaries = tuple(new_index[b] for b in model.boundaries)
    return ModelGraph(
        layers=tuple(layers),
        input_shape=model.input_shape,
        skips=skips,
        boundaries=boundaries,
        label_branch=model.label_branch,
    )


def with_weight_penalty(loss: torch.Tensor, parameters, kind: str, factor: float) -> torch.Tensor:
    """loss + factor * sum(|w|) or factor * sum(w^2) over the parameters."""
    if factor < 0:
        raise ConfigError("penalty factor must be >= 0")
    if factor == 0.0:
        return loss
    total = loss
    for p in parameters:
        if kind == "l1":
            total = total + factor * p.abs().sum()
        elif kind == "l2":
            total = total + factor * p.square().sum()
        else:
            raise ConfigError(f"penalty kind must be l1 or l2, got {kind!r}")
    return total


def _pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    # exact sqrt with zero subgradient on (numerically) zero entries, so the
    # all-zero diagonal never produces NaN gradients
    sq = (x * x).sum(dim=1)
    d2 = sq.unsqueeze(1) + sq.unsqueeze(0) - 2.0 * (x @ x.T)
    d2 = torch.clamp(d2, min=0.0)
    tiny = torch.finfo(x.dtype).tiny
    positive = d2 > tiny
    return torch.sqrt(torch.where(positive, d2, torch.ones_like(d2))) * positive


def _double_center(d: torch.Tensor) -> torch.Tensor:
    return d - d.mean(dim=1, keepdim=True) - d.mean(dim=0, keepdim=True) + d.mean()


def _u_center(d: torch.Tensor) -> torch.Tensor:
    n = d.shape[0]
    row = d.sum(dim=1, keepdim=True) / (n - 2)
    col = d.sum(dim=0, keepdim=True) / (n - 2)
    grand = d.sum() / ((n - 1) * (n - 2))
    centered = d - row - col + grand
    return centered * (1.0 - torch.eye(n, dtype=d.dtype))


def distance_correlation(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sample distance correlation between two batches of vectors.

    Pairwise Euclidean distance matrices are centered, dCov^2 is the mean
    of their elementwise product, and dCor = dCov / sqrt(dVar_a * dVar_b)
    with the covariance clipped at 0 before the square root. Centering is
    bias-corrected (U-centering, zero diagonal) for n >= 4, which keeps
    the statistic near 0 on independent batches even when the vector
    dimension is comparable to the batch size; the plain double-centered
    V-statistic (which inflates severely in that regime) is only used for
    n in {2, 3} where the corrected form is undefined.

    Exactly 1 on identical non-constant inputs, invariant under rigid
    motions of either argument, differentiable, computed in float64. A
    constant batch on either side yields 0 with a DegenerateInputWarning.
    """
    if a.shape[0] != b.shape[0]:
        raise ConfigError("batches must have equal size")
    n = a.shape[0]
    if n < 2:
        raise ConfigError("distance correlation needs batch size >= 2")
    a2 = a.reshape(n, -1).double()
    b2 = b.reshape(n, -1).double()
    center = _u_center if n >= 4 else _double_center
    ca = center(_pairwise_distances(a2))
    cb = center(_pairwise_distances(b2))
    dcov2 = (ca * cb).mean()
    dvar_a2 = (ca * ca).mean()
    dvar_b2 = (cb * cb).mean()
    tiny = torch.finfo(torch.float64).tiny
    if dvar_a2.item() <= tiny or dvar_b2.item() <= tiny:
        warnings.warn("constant batch in distance correlation", DegenerateInputWarning)
        return torch.zeros((), dtype=a.dtype)
    dcor2 = torch.clamp(dcov2, min=0.0) / torch.sqrt(dvar_a2 * dvar_b2)
    return torch.sqrt(torch.clamp(dcor2, 0.0, 1.0)).to(a.dtype)


def decorrelated_loss(
    pred: torch.Tensor,
    y: torch.Tensor,
    z_s: torch.Tensor,
    x: torch.Tensor,
    alpha: float,
) -> torch.Tensor:
    """(1 - alpha) * task loss + alpha * dCor(flatten(z_s), flatten(x))."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    task = F.cross_entropy(pred, y)
    if alpha == 0.0:
        return task
    return (1.0 - alpha) * task + alpha * distance_correlation(z_s, x)
