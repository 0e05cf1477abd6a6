"""Client/server state machines for vanilla and U-shaped split learning.

One protocol step exchanges explicit messages in the order the parties
would emit them on the wire: the client sends the split-layer activation
(plus labels in vanilla mode), the server answers with the gradient at
the split (U-shaped mode inserts the upper activation and its gradient
in between). Each side updates only its own parameters with its own Adam
state; a step is numerically identical to one monolithic training step
on the composed model.

Passive attacks observe the finished transcript after every step. An
active attack may install an interceptor that replaces the boundary
gradient sent to the client; passive runs never expose that path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .defenses import DefenseConfig, distance_correlation, with_weight_penalty
from .errors import ConfigError, NumericsError, ProtocolError
from .modules import GraphModule

SL_LR = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-7

TAG_SMASHED = "SmashedData"
TAG_LABELS = "Labels"
TAG_UP = "IntermediateUp"
TAG_GRAD_T = "GradAtT"
TAG_GRAD_SPLIT = "GradAtSplit"


@dataclass
class Message:
    tag: str
    tensor: torch.Tensor


@dataclass
class Transcript:
    """Messages of a single protocol iteration, in wire order."""

    iteration: int
    client_index: int
    messages: list[Message]

    def get(self, tag: str) -> torch.Tensor:
        for m in self.messages:
            if m.tag == tag:
                return m.tensor
        raise ProtocolError(f"no {tag} message in iteration {self.iteration}")

    def has(self, tag: str) -> bool:
        return any(m.tag == tag for m in self.messages)

    @property
    def smashed(self) -> torch.Tensor:
        return self.get(TAG_SMASHED)

    @property
    def labels(self) -> torch.Tensor:
        return self.get(TAG_LABELS)


@dataclass
class IterationRecord:
    iteration: int
    client_index: int
    loss: float
    accuracy: float
    attack: dict = field(default_factory=dict)


@dataclass
class TrainingTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def attack_series(self, key: str) -> list[tuple[int, float]]:
        return [
            (r.iteration, r.attack[key])
            for r in self.records
            if key in r.attack and r.attack[key] == r.attack[key]
        ]


def make_optimizer(params, lr: float = SL_LR) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


class ClientState:
    """A client party: partial model(s), optimizer, defense settings."""

    def __init__(self, f: GraphModule, h: GraphModule | None = None,
                 lr: float = SL_LR, defense: DefenseConfig | None = None):
        self.f = f
        self.h = h
        self.defense = defense or DefenseConfig()
        params = list(f.parameters()) + (list(h.parameters()) if h else [])
        self.optimizer = make_optimizer(params, lr)

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr


class ServerState:
    """The server party: the middle partial model and its optimizer."""

    def __init__(self, g: GraphModule, lr: float = SL_LR):
        self.g = g
        self.optimizer = make_optimizer(g.parameters(), lr)


def _check_finite(loss: torch.Tensor, iteration: int) -> None:
    if not torch.isfinite(loss):
        raise NumericsError(
            f"non-finite training loss at iteration {iteration}", iteration
        )


def _client_local_terms(surrogate, client: ClientState, z, x):
    defense = client.defense
    if defense.kind == "decorrelation" and defense.alpha > 0.0:
        surrogate = surrogate + defense.alpha * distance_correlation(
            z.flatten(1), x.flatten(1)
        )
    if defense.kind == "weight_penalty":
        surrogate = with_weight_penalty(
            surrogate, client.f.parameters(), defense.penalty, defense.factor
        )
    return surrogate


def vanilla_step(
    client: ClientState,
    server: ServerState,
    batch: tuple[torch.Tensor, torch.Tensor],
    iteration: int = 0,
    client_index: int = 0,
    interceptor=None,
) -> tuple[Transcript, float, float]:
    """One vanilla protocol iteration; returns (transcript, loss, accuracy)."""
    x, y = batch
    client.f.train()
    server.g.train()

    z = client.f(x)
    z_srv = z.detach().requires_grad_(True)

    out = server.g(z_srv)
    task = F.cross_entropy(out, y)
    _check_finite(task, iteration)
    server_loss = client.defense.task_weight * task
    server.optimizer.zero_grad(set_to_none=True)
    server_loss.backward()
    grad_split = z_srv.grad.detach()
    server.optimizer.step()

    if interceptor is not None:
        sent = interceptor(iteration, z.detach(), y, server)
        if sent.shape != grad_split.shape:
            raise ProtocolError("intercepted gradient has wrong shape")
    else:
        sent = grad_split

    surrogate = (z * sent).sum()
    surrogate = _client_local_terms(surrogate, client, z, x)
    client.optimizer.zero_grad(set_to_none=True)
    surrogate.backward()
    client.optimizer.step()

    transcript = Transcript(iteration, client_index, [
        Message(TAG_SMASHED, z.detach()),
        Message(TAG_LABELS, y),
        Message(TAG_GRAD_SPLIT, sent),
    ])
    accuracy = (out.detach().argmax(dim=1) == y).float().mean().item()
    return transcript, task.item(), accuracy


def u_step(
    client: ClientState,
    server: ServerState,
    batch: tuple[torch.Tensor, torch.Tensor],
    iteration: int = 0,
    client_index: int = 0,
) -> tuple[Transcript, float, float]:
    """One U-shaped protocol iteration. Labels never leave the client."""
    if client.h is None:
        raise ProtocolError("u_step requires a client with a head model")
    x, y = batch
    client.f.train()
    client.h.train()
    server.g.train()

    z = client.f(x)
    z_srv = z.detach().requires_grad_(True)
    z_t = server.g(z_srv)
    zt_cli = z_t.detach().requires_grad_(True)

    out = client.h(zt_cli)
    task = F.cross_entropy(out, y)
    _check_finite(task, iteration)
    client_loss = client.defense.task_weight * task
    client.optimizer.zero_grad(set_to_none=True)
    client_loss.backward()
    client.optimizer.step()  # head update; f has no gradients yet
    grad_t = zt_cli.grad.detach()

    server_surrogate = (z_t * grad_t).sum()
    server.optimizer.zero_grad(set_to_none=True)
    server_surrogate.backward()
    grad_split = z_srv.grad.detach()
    server.optimizer.step()

    surrogate = (z * grad_split).sum()
    surrogate = _client_local_terms(surrogate, client, z, x)
    client.optimizer.zero_grad(set_to_none=True)
    surrogate.backward()
    client.optimizer.step()

    transcript = Transcript(iteration, client_index, [
        Message(TAG_SMASHED, z.detach()),
        Message(TAG_UP, z_t.detach()),
        Message(TAG_GRAD_T, grad_t),
        Message(TAG_GRAD_SPLIT, grad_split),
    ])
    accuracy = (out.detach().argmax(dim=1) == y).float().mean().item()
    return transcript, task.item(), accuracy


def score_attack_outputs(outputs: dict, batch) -> dict:
    """Score attack outputs against the private batch.

    Attacks return reconstructions/label guesses without ever seeing the
    private features; the evaluation against ground truth happens here,
    in the harness, so the information boundary is visible in the
    interface itself.
    """
    from .metrics import attack_mse, label_accuracy

    x, y = batch
    scored = {}
    x_hat = outputs.pop("x_hat", None)
    y_hat = outputs.pop("y_hat", None)
    if x_hat is not None:
        scored["attack_mse"] = attack_mse(x_hat, x)
    if y_hat is not None:
        scored["label_acc"] = label_accuracy(y_hat, y)
    scored.update(outputs)
    return scored


def multi_client_schedule(
    clients: list[ClientState],
    server: ServerState,
    batch_streams: list,
    iterations: int,
    attack=None,
    u_shaped: bool = False,
    transcript_writer=None,
    sink=None,
) -> TrainingTrace:
    """Round-robin protocol loop over one or more clients.

    `batch_streams[i]` yields (x, y) batches for client i. A passive
    attack observes each transcript after the step; an active attack may
    additionally intercept the boundary gradient (vanilla mode only).
    `sink(iteration, batch, outputs)` sees raw attack outputs (tensors
    included) before scoring, for checkpointing. Deterministic under
    fixed streams; the attack's randomness never touches the parties'
    streams.
    """
    if not clients:
        raise ConfigError("need at least one client")
    if len(batch_streams) != len(clients):
        raise ConfigError("one batch stream per client required")
    trace = TrainingTrace()
    for i in range(iterations):
        idx = i % len(clients)
        client = clients[idx]
        batch = next(batch_streams[idx])
        interceptor = None
        if attack is not None and getattr(attack, "passive", True) is False:
            if u_shaped:
                raise ConfigError("active gradient interception requires vanilla mode")
            interceptor = attack.intercept
        if u_shaped:
            transcript, loss, acc = u_step(client, server, batch, i, idx)
        else:
            transcript, loss, acc = vanilla_step(
                client, server, batch, i, idx, interceptor
            )
        record = IterationRecord(i, idx, loss, acc)
        outputs = {}
        if attack is not None:
            outputs = attack.observe(i, idx, transcript, server) or {}
        if sink is not None:
            sink(i, batch, outputs)
        if outputs:
            record.attack = score_attack_outputs(outputs, batch)
        if transcript_writer is not None:
            for msg in transcript.messages:
                transcript_writer.append(i, msg.tag, msg.tensor.numpy())
        trace.records.append(record)
    return trace


def run_training(
    client: ClientState,
    server: ServerState,
    batch_stream,
    iterations: int,
    attack=None,
    u_shaped: bool = False,
    transcript_writer=None,
    sink=None,
) -> TrainingTrace:
    """Single-client convenience wrapper over multi_client_schedule."""
    return multi_client_schedule(
        [client], server, [batch_stream], iterations, attack, u_shaped,
        transcript_writer, sink,
    )
