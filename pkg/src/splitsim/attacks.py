"""Server-side inference attacks over protocol transcripts.

The simulator-decoding family shares one engine: the server trains a
simulator of the client's partial model against its own frozen server
model on auxiliary data, plus a decoder from split-layer representations
back to input space. Variants differ in regularization and bookkeeping:

  * naive_sda: the bare simulator + decoder, no regularization;
  * pcat: naive updates with a fixed attack delay and, in vanilla mode,
    auxiliary batches sampled to match the private batch's labels;
  * sdar: adversarial regularization with two discriminators (d1 on
    representations, d2 on reconstructions); label-conditional models in
    vanilla mode, an extra head simulator trained with randomly flipped
    labels in U-shaped mode, which also yields label inference.

All of these are passive: they only read transcripts and the server's
own model, and their randomness lives on dedicated attack streams, so
the protocol parties' parameter trajectories are unchanged by attacking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attacker_zoo import build_attacker_models
from .backbones import SplitAssignment
from .data import AuxiliarySampler, DataSubset
from .defenses import DefenseConfig, distance_correlation, with_weight_penalty
from .errors import ConfigError, UsageError
from .graph import ModelGraph
from .metrics import attack_mse
from .modules import batch_stat_pass, frozen, materialize
from .protocol import SL_LR, TAG_UP, Transcript, make_optimizer
from .rng import stream

logger = logging.getLogger(__name__)

DECODER_LR_FACTOR = 0.5  # decoder learns at half the simulator rate

# restart policy for U-shaped instability
RESTART_WINDOW = 500
RESTART_PATIENCE = 200
RESTART_FACTOR = 5.0
MAX_RESTARTS = 3

PCAT_DELAY = 100


def default_hyperparams(mode: str, dataset: str, arch: str) -> tuple[float, float, float]:
    """(lambda1, lambda2, flip_p) defaults per setting.

    Vanilla uses one row for every dataset/model; U-shaped values vary by
    dataset and model. synthetic-tiny follows the cifar10 row.
    """
    if mode == "vanilla":
        return 0.02, 1e-5, 0.0
    name = "cifar10" if dataset == "synthetic-tiny" else dataset
    if arch == "resnet20":
        lam1 = 0.02 if name == "cifar10" else 0.04
        return lam1, 1e-5, 0.2
    p = 0.1 if name in ("cifar10", "cifar100") else 0.4
    return 0.04, 1e-5, p


def flip_labels(labels: torch.Tensor, p: float, generator: torch.Generator,
                num_classes: int) -> torch.Tensor:
    """Independently replace each label with Uniform(classes) w.p. p.

    The uniform replacement may equal the original label.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability must be in [0, 1], got {p}")
    if p == 0.0:
        return labels
    flip = torch.rand(labels.shape, generator=generator) < p
    replacement = torch.randint(num_classes, labels.shape, generator=generator)
    return torch.where(flip, replacement, labels)


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties broken by the lowest class index."""
    n, c = logits.shape
    top = logits.max(dim=1, keepdim=True).values
    idx = torch.arange(c).expand(n, c)
    return torch.where(logits == top, idx, torch.full_like(idx, c)).min(dim=1).values


def _bce_to(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(
        logits, torch.full_like(logits, target)
    )


class AttackState:
    """Attacker models, optimizers and sampling streams for one client.

    Learning rates follow the coupled scheme: simulator and head simulator
    at `lr`, decoder at lr/2, d1 at lambda1*lr and d2 at lambda2*lr.
    """

    def __init__(
        self,
        split: SplitAssignment,
        aux: DataSubset,
        seed: int,
        *,
        mode: str = "vanilla",
        num_classes: int = 10,
        conditional: bool = False,
        same_arch: bool = True,
        lambda1: float = 0.0,
        lambda2: float = 0.0,
        flip_p: float = 0.0,
        lr: float = SL_LR,
        disc_width: float = 1.0,
        defense: DefenseConfig | None = None,
        tag: str = "attack",
    ):
        if mode not in ("vanilla", "u"):
            raise ConfigError(f"unknown attack mode {mode!r}")
        if mode == "u" and not split.u_shaped:
            raise ConfigError("u-mode attack needs a U-shaped split")
        if conditional and mode == "u":
            raise ConfigError("conditional attacker models require vanilla mode")
        if lambda1 < 0 or lambda2 < 0:
            raise ConfigError("adversarial penalties must be >= 0")
        self.split = split
        self.mode = mode
        self.num_classes = num_classes
        self.conditional = conditional
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.flip_p = flip_p
        self.lr = lr
        self.defense = defense or DefenseConfig()
        self.seed = seed
        self.tag = tag
        self.restarts = 0

        # note: a dropout-defended split already carries dropout layers in
        # f's graph, which build_simulator copies, so the simulator mirrors
        # the client's regularization with no extra handling here
        self.models = build_attacker_models(
            split, conditional=conditional, num_classes=num_classes,
            same_arch=same_arch, disc_width=disc_width,
        )
        self.sampler = AuxiliarySampler(aux, stream(seed, f"{tag}:aux"))
        self.flip_gen = stream(seed, f"{tag}:flip")
        self._materialize(restart=0)
        self._recon_history: list[float] = []
        self._bad_streak = 0

    def _materialize(self, restart: int) -> None:
        suffix = f":r{restart}" if restart else ""

        def init(name: str):
            return stream(self.seed, f"{self.tag}:init:{name}{suffix}")

        def drops(name: str):
            return stream(self.seed, f"{self.tag}:drop:{name}{suffix}")

        m = self.models
        self.simulator = materialize(m.simulator, init("sim"), drops("sim"))
        self.decoder = materialize(m.decoder, init("dec"), drops("dec"))
        self.d1 = materialize(m.d1, init("d1"), drops("d1"))
        self.d2 = materialize(m.d2, init("d2"), drops("d2"))
        self.head_simulator = None
        if m.head_simulator is not None:
            self.head_simulator = materialize(m.head_simulator, init("head"), drops("head"))
        self.opt_sim = make_optimizer(self.simulator.parameters(), self.lr)
        self.opt_dec = make_optimizer(self.decoder.parameters(), self.lr * DECODER_LR_FACTOR)
        self.opt_d1 = make_optimizer(self.d1.parameters(), self.lambda1 * self.lr)
        self.opt_d2 = make_optimizer(self.d2.parameters(), self.lambda2 * self.lr)
        self.opt_head = None
        if self.head_simulator is not None:
            self.opt_head = make_optimizer(self.head_simulator.parameters(), self.lr)

    def set_lr(self, **rates: float) -> None:
        """Override per-model learning rates (sim/dec/d1/d2/head)."""
        opts = {"sim": self.opt_sim, "dec": self.opt_dec, "d1": self.opt_d1,
                "d2": self.opt_d2, "head": self.opt_head}
        for name, value in rates.items():
            opt = opts.get(name)
            if opt is None:
                raise ConfigError(f"no optimizer named {name!r}")
            for group in opt.param_groups:
                group["lr"] = value

    def reinitialize(self) -> None:
        """Fresh models and optimizer state on a new derived stream."""
        self.restarts += 1
        logger.warning("attack state reinitialized (restart %d)", self.restarts)
        self._materialize(restart=self.restarts)
        self._recon_history.clear()
        self._bad_streak = 0

    def note_reconstruction_loss(self, value: float) -> bool:
        """Track decoder loss for the instability restart policy.

        Returns True when the attack should reinitialize: the loss exceeded
        RESTART_FACTOR x its trailing-window median for RESTART_PATIENCE
        consecutive iterations (or went non-finite), and the restart budget
        is not exhausted.
        """
        if not math.isfinite(value):
            return self.restarts < MAX_RESTARTS
        history = self._recon_history
        if len(history) >= RESTART_WINDOW // 2:
            median = sorted(history)[len(history) // 2]
            if value > RESTART_FACTOR * median:
                self._bad_streak += 1
            else:
                self._bad_streak = 0
        history.append(value)
        if len(history) > RESTART_WINDOW:
            history.pop(0)
        return self._bad_streak >= RESTART_PATIENCE and self.restarts < MAX_RESTARTS


def reconstruct_features(state: AttackState, z_s: torch.Tensor,
                         y: torch.Tensor | None = None) -> torch.Tensor:
    """Decode split-layer representations into input space (eval mode)."""
    if state.conditional and y is None:
        raise UsageError("conditional decoder requires labels")
    state.decoder.eval()
    with torch.no_grad():
        x_hat = state.decoder(z_s, y if state.conditional else None)
    state.decoder.train()
    return x_hat


def infer_labels(state: AttackState, z_s: torch.Tensor, g) -> torch.Tensor:
    """Predict private labels via the head simulator (U-shaped mode only)."""
    if state.head_simulator is None:
        raise UsageError("label inference requires a U-shaped attack state")
    with torch.no_grad(), batch_stat_pass(g, state.head_simulator):
        logits = state.head_simulator(g(z_s))
    return argmax_lowest(logits)


def _simulator_loss(state: AttackState, z_aux, out_aux, y_task, x_aux):
    """Task loss (+ mirrored defense terms) + adversarial d1 term."""
    task = F.cross_entropy(out_aux, y_task)
    defense = state.defense
    loss = task
    if defense.kind == "decorrelation" and defense.alpha > 0:
        loss = (1 - defense.alpha) * task + defense.alpha * distance_correlation(
            z_aux.flatten(1), x_aux.flatten(1)
        )
    if state.lambda1 > 0:
        with frozen(state.d1):
            y_cond = y_task if state.conditional else None
            loss = loss + state.lambda1 * _bce_to(state.d1(z_aux, y_cond), 1.0)
    if defense.kind == "weight_penalty":
        loss = with_weight_penalty(
            loss, state.simulator.parameters(), defense.penalty, defense.factor
        )
    return loss, task


def _decoder_loss(state: AttackState, x_aux, x_hat_aux, x_hat_private, y_private):
    recon = F.mse_loss(x_hat_aux, x_aux)
    loss = recon
    if state.lambda2 > 0:
        with frozen(state.d2):
            y_cond = y_private if state.conditional else None
            loss = loss + state.lambda2 * _bce_to(state.d2(x_hat_private, y_cond), 1.0)
    return loss, recon


def sda_step(state: AttackState, transcript: Transcript, g,
             label_align: bool = False) -> dict:
    """One simulator-decoding update from a transcript (shared engine).

    With lambda1 = lambda2 = 0 and unconditional models this is exactly
    the naive attack: discriminators are neither consulted nor updated.
    All losses are computed from pre-update snapshots before any model
    steps, and the server model g is frozen throughout (batch-stat
    forward, no parameter or statistic updates).
    """
    z_s = transcript.smashed
    y_private = transcript.labels if state.mode == "vanilla" else None
    batch = z_s.shape[0]

    if label_align:
        if y_private is None:
            x_aux, y_aux = state.sampler.batch(batch)
        else:
            x_aux, y_aux = state.sampler.label_aligned(y_private)
    else:
        x_aux, y_aux = state.sampler.batch(batch)

    sim, dec, d1, d2, head = (
        state.simulator, state.decoder, state.d1, state.d2, state.head_simulator
    )
    for m in (sim, dec, d1, d2):
        m.train()
    if head is not None:
        head.train()

    # forward passes; every loss below reads these pre-update tensors
    z_aux = sim(x_aux)
    with frozen(g), batch_stat_pass(g):
        g_out = g(z_aux)
    if state.mode == "u":
        y_task = flip_labels(y_aux, state.flip_p, state.flip_gen, state.num_classes)
        out_aux = head(g_out)
    else:
        y_task = y_aux
        out_aux = g_out

    loss_sim, task = _simulator_loss(state, z_aux, out_aux, y_task, x_aux)

    z_aux_const = z_aux.detach()
    y_aux_cond = y_aux if state.conditional else None
    y_priv_cond = y_private if state.conditional else None
    x_hat_aux = dec(z_aux_const, y_aux_cond)
    x_hat_private = dec(z_s, y_priv_cond)
    loss_dec, recon = _decoder_loss(state, x_aux, x_hat_aux, x_hat_private, y_private)

    losses = [loss_sim, loss_dec]
    loss_d1 = loss_d2 = None
    if state.lambda1 > 0:
        loss_d1 = _bce_to(d1(z_aux_const, y_aux_cond), 0.0) + _bce_to(
            d1(z_s, y_priv_cond), 1.0
        )
        losses.append(loss_d1)
    if state.lambda2 > 0:
        loss_d2 = _bce_to(d2(x_hat_private.detach(), y_priv_cond), 0.0) + _bce_to(
            d2(x_aux, y_aux_cond), 1.0
        )
        losses.append(loss_d2)

    if not all(torch.isfinite(l) for l in losses):
        if state.restarts < MAX_RESTARTS:
            state.reinitialize()
            return {"restarted": 1.0}
        raise UsageError("attack losses diverged and restart budget is exhausted")

    # simulator (and head simulator) update: the adversarial term has no
    # head dependency, so one backward yields both models' gradients
    state.opt_sim.zero_grad(set_to_none=True)
    if state.opt_head is not None:
        state.opt_head.zero_grad(set_to_none=True)
    loss_sim.backward()
    state.opt_sim.step()
    if state.opt_head is not None:
        state.opt_head.step()

    if loss_d1 is not None:
        state.opt_d1.zero_grad(set_to_none=True)
        loss_d1.backward()
        state.opt_d1.step()

    state.opt_dec.zero_grad(set_to_none=True)
    loss_dec.backward()
    state.opt_dec.step()

    if loss_d2 is not None:
        state.opt_d2.zero_grad(set_to_none=True)
        loss_d2.backward()
        state.opt_d2.step()

    # reconstructed private features from the updated decoder
    with torch.no_grad(), batch_stat_pass(dec):
        x_hat = dec(z_s, y_priv_cond)

    metrics = {
        "x_hat": x_hat,
        "aux_mse": recon.item(),
        "loss_sim": loss_sim.item(),
        "loss_dec": loss_dec.item(),
    }
    if loss_d1 is not None:
        metrics["loss_d1"] = loss_d1.item()
    if loss_d2 is not None:
        metrics["loss_d2"] = loss_d2.item()
    if state.mode == "u":
        metrics["loss_head"] = task.item()
        with torch.no_grad(), batch_stat_pass(head):
            metrics["y_hat"] = argmax_lowest(head(transcript.get(TAG_UP)))
    if state.mode == "u" and state.lambda1 > 0 and state.note_reconstruction_loss(
        recon.item()
    ):
        state.reinitialize()
        metrics["restarted"] = 1.0
    return metrics


def naive_sda_step(state: AttackState, transcript: Transcript, g) -> dict:
    """Unregularized simulator decoding; vanilla transcripts only."""
    if state.mode != "vanilla":
        raise UsageError("the naive attack is defined for vanilla transcripts")
    return sda_step(state, transcript, g, label_align=False)


def sdar_vanilla_step(state: AttackState, transcript: Transcript, g) -> dict:
    return sda_step(state, transcript, g, label_align=False)


def sdar_u_step(state: AttackState, transcript: Transcript, g) -> dict:
    if state.mode != "u":
        raise UsageError("sdar_u_step needs a u-mode attack state")
    return sda_step(state, transcript, g, label_align=False)


def pcat_step(state: AttackState, transcript: Transcript, g, iteration: int) -> dict:
    """Delayed naive attack; label-aligned auxiliary batches in vanilla mode."""
    if iteration < PCAT_DELAY:
        return {}
    return sda_step(state, transcript, g, label_align=state.mode == "vanilla")


@dataclass
class _StateSpec:
    """Constructor arguments shared by all per-client attack states."""

    split: SplitAssignment
    aux: list[DataSubset]
    seed: int
    mode: str
    num_classes: int
    conditional: bool
    same_arch: bool
    lambda1: float
    lambda2: float
    flip_p: float
    lr: float
    disc_width: float
    defense: DefenseConfig


class SimulatorDecodingAttack:
    """Protocol hook running the shared engine; variants set the knobs.

    `aux` may be a single auxiliary subset or one per client: the server
    knows which client each batch comes from and keeps a separate attack
    state (with its own auxiliary sampler) per client.
    """

    passive = True
    variant = "sda"
    delay = 0
    label_align = False

    def __init__(self, split: SplitAssignment, aux, seed: int, *,
                 mode: str = "vanilla", num_classes: int = 10,
                 conditional: bool = False, same_arch: bool = True,
                 lambda1: float = 0.0, lambda2: float = 0.0,
                 flip_p: float = 0.0, lr: float = SL_LR,
                 disc_width: float = 1.0,
                 defense: DefenseConfig | None = None):
        if isinstance(aux, DataSubset):
            aux = [aux]
        self._spec = _StateSpec(
            split=split, aux=aux, seed=seed, mode=mode, num_classes=num_classes,
            conditional=conditional, same_arch=same_arch, lambda1=lambda1,
            lambda2=lambda2, flip_p=flip_p, lr=lr, disc_width=disc_width,
            defense=defense or DefenseConfig(),
        )
        self.states: dict[int, AttackState] = {}

    def state_for(self, client_index: int) -> AttackState:
        if client_index not in self.states:
            s = self._spec
            aux = s.aux[client_index % len(s.aux)]
            self.states[client_index] = AttackState(
                s.split, aux, s.seed, mode=s.mode, num_classes=s.num_classes,
                conditional=s.conditional, same_arch=s.same_arch,
                lambda1=s.lambda1, lambda2=s.lambda2, flip_p=s.flip_p,
                lr=s.lr, disc_width=s.disc_width, defense=s.defense,
                tag=f"attack:c{client_index}",
            )
        return self.states[client_index]

    def observe(self, iteration: int, client_index: int,
                transcript: Transcript, server) -> dict:
        if iteration < self.delay:
            return {}
        state = self.state_for(client_index)
        return sda_step(state, transcript, server.g, label_align=self.label_align)


class NaiveSdaAttack(SimulatorDecodingAttack):
    variant = "naive_sda"

    def __init__(self, split, aux, seed, **kwargs):
        kwargs.setdefault("conditional", False)
        if kwargs.get("mode", "vanilla") != "vanilla":
            raise ConfigError("naive_sda requires vanilla mode")
        kwargs["lambda1"] = 0.0
        kwargs["lambda2"] = 0.0
        kwargs["flip_p"] = 0.0
        super().__init__(split, aux, seed, **kwargs)


class PcatAttack(SimulatorDecodingAttack):
    variant = "pcat"
    delay = PCAT_DELAY

    def __init__(self, split, aux, seed, **kwargs):
        kwargs.setdefault("conditional", False)
        kwargs["lambda1"] = 0.0
        kwargs["lambda2"] = 0.0
        kwargs["flip_p"] = 0.0
        super().__init__(split, aux, seed, **kwargs)
        self.label_align = self._spec.mode == "vanilla"


class SdarAttack(SimulatorDecodingAttack):
    variant = "sdar"

    def __init__(self, split, aux, seed, *, mode="vanilla",
                 conditional: bool | None = None, **kwargs):
        if conditional is None:
            conditional = mode == "vanilla"
        super().__init__(split, aux, seed, mode=mode, conditional=conditional, **kwargs)
