"""Optimization-based inversion baseline.

Knowing only the client model's architecture, the attacker jointly
recovers a surrogate model and the private inputs by alternating
minimization of || surrogate(x_hat) - z_s ||^2: a fixed number of
surrogate steps against the current candidate images, then candidate
steps against the frozen surrogate with total-variation regularization.
Candidates start as 0.5-filled tensors and stay clamped to [0, 1]. The
procedure never reads the true private features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .graph import ModelGraph
from .modules import frozen, materialize
from .protocol import Transcript, make_optimizer
from .rng import stream

UNSPLIT_LR = 1e-3
UNSPLIT_ROUNDS = 1000
UNSPLIT_INNER_STEPS = 100
TV_WEIGHT = 0.1


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Mean anisotropic total variation over a batch of images."""
    dh = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().mean()
    dw = (x[:, :, :, 1:] - x[:, :, :, :-1]).abs().mean()
    return dh + dw


@dataclass
class UnsplitResult:
    x_hat: torch.Tensor
    objectives: list[float] = field(default_factory=list)


def unsplit_attack(
    f_graph: ModelGraph,
    z_s: torch.Tensor,
    rounds: int = UNSPLIT_ROUNDS,
    inner_steps: int = UNSPLIT_INNER_STEPS,
    seed: int = 0,
    lr: float = UNSPLIT_LR,
    tv_weight: float = TV_WEIGHT,
) -> UnsplitResult:
    """Alternating inversion of a batch of split-layer representations.

    Returns the recovered batch and the per-round objective values
    (representation MSE + TV term), which decrease apart from optimizer
    noise.
    """
    surrogate = materialize(f_graph, stream(seed, "attack:init:unsplit"))
    surrogate.train()
    h, w, c = f_graph.input_shape
    x_hat = torch.full((z_s.shape[0], c, h, w), 0.5, requires_grad=True)
    opt_model = make_optimizer(surrogate.parameters(), lr)
    opt_x = make_optimizer([x_hat], lr)
    z_target = z_s.detach()
    objectives = []
    for _ in range(rounds):
        x_const = x_hat.detach()
        for _ in range(inner_steps):
            loss = torch.mean((surrogate(x_const) - z_target) ** 2)
            opt_model.zero_grad(set_to_none=True)
            loss.backward()
            opt_model.step()
        with frozen(surrogate):
            for _ in range(inner_steps):
                loss = torch.mean((surrogate(x_hat) - z_target) ** 2)
                loss = loss + tv_weight * total_variation(x_hat)
                opt_x.zero_grad(set_to_none=True)
                loss.backward()
                opt_x.step()
                with torch.no_grad():
                    x_hat.clamp_(0.0, 1.0)
        with torch.no_grad():
            obj = torch.mean((surrogate(x_hat) - z_target) ** 2)
            obj = obj + tv_weight * total_variation(x_hat)
        objectives.append(obj.item())
    return UnsplitResult(x_hat=x_hat.detach(), objectives=objectives)


class UnsplitAttack:
    """Protocol hook: records the last transcript, inverts it at the end.

    Running the full alternating optimization every iteration is
    prohibitively expensive, so the attack targets the final batch.
    """

    passive = True
    variant = "unsplit"

    def __init__(self, f_graph: ModelGraph, seed: int = 0,
                 rounds: int = UNSPLIT_ROUNDS, inner_steps: int = UNSPLIT_INNER_STEPS,
                 lr: float = UNSPLIT_LR, tv_weight: float = TV_WEIGHT):
        self.f_graph = f_graph
        self.seed = seed
        self.rounds = rounds
        self.inner_steps = inner_steps
        self.lr = lr
        self.tv_weight = tv_weight
        self.last_transcript: Transcript | None = None
        self.result: UnsplitResult | None = None

    def observe(self, iteration: int, client_index: int,
                transcript: Transcript, server) -> dict:
        self.last_transcript = transcript
        return {}

    def finalize(self) -> dict:
        if self.last_transcript is None:
            return {}
        self.result = unsplit_attack(
            self.f_graph, self.last_transcript.smashed, self.rounds,
            self.inner_steps, self.seed, self.lr, self.tv_weight,
        )
        return {"x_hat": self.result.x_hat}
