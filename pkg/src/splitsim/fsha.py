"""Active feature-space hijacking baseline.

The server abandons honest training of the client's objective: it trains
an encoder/decoder pair as an autoencoder on its auxiliary data, trains
a critic (gradient-penalty Wasserstein loss, batch-norm-free) to tell
the client's split-layer outputs from its own encoder's, and replaces
the task gradient sent to the client with the critic's gradient, pulling
the client's model into the encoder's (decodable) representation space.

This violates passivity by construction and must be explicitly enabled;
the passive invariant test fails on it by design.
"""

from __future__ import annotations

import torch

from .attacker_zoo import build_decoder, build_discriminators, build_simulator
from .backbones import SplitAssignment
from .data import AuxiliarySampler, DataSubset
from .errors import ConfigError
from .modules import batch_stat_pass, frozen, materialize
from .protocol import Transcript, make_optimizer
from .rng import stream

FSHA_MODEL_LR = 1e-5   # encoder/decoder autoencoder rate; also the client's rate
FSHA_DISC_LR = 1e-4
FSHA_GRAD_PENALTY = 500.0


class FshaAttack:
    passive = False
    variant = "fsha"

    def __init__(self, split: SplitAssignment, aux: DataSubset, seed: int, *,
                 num_classes: int = 10, same_arch: bool = True,
                 disc_width: float = 1.0, grad_penalty: float = FSHA_GRAD_PENALTY):
        if split.u_shaped:
            raise ConfigError("fsha is defined for vanilla split learning")
        enc_graph = build_simulator(split, same_arch)
        dec_graph = build_decoder(split, conditional=False, same_arch=same_arch)
        disc_graph, _ = build_discriminators(
            split, conditional=False, wgan_mode=True, width=disc_width
        )
        tag = "attack"
        self.encoder = materialize(enc_graph, stream(seed, f"{tag}:init:enc"),
                                   stream(seed, f"{tag}:drop:enc"))
        self.decoder = materialize(dec_graph, stream(seed, f"{tag}:init:dec"),
                                   stream(seed, f"{tag}:drop:dec"))
        self.critic = materialize(disc_graph, stream(seed, f"{tag}:init:disc"),
                                  stream(seed, f"{tag}:drop:disc"))
        self.opt_models = make_optimizer(
            list(self.encoder.parameters()) + list(self.decoder.parameters()),
            FSHA_MODEL_LR,
        )
        self.opt_critic = make_optimizer(self.critic.parameters(), FSHA_DISC_LR)
        self.sampler = AuxiliarySampler(aux, stream(seed, f"{tag}:aux"))
        self.eps_gen = stream(seed, f"{tag}:gp")
        self.grad_penalty = grad_penalty
        self._last = {}

    def _gradient_penalty(self, z_real: torch.Tensor, z_fake: torch.Tensor) -> torch.Tensor:
        eps = torch.rand(z_real.shape[0], 1, 1, 1, generator=self.eps_gen)
        mix = (eps * z_real + (1 - eps) * z_fake).requires_grad_(True)
        score = self.critic(mix).sum()
        grads = torch.autograd.grad(score, mix, create_graph=True)[0]
        norms = grads.flatten(1).norm(dim=1)
        return ((norms - 1.0) ** 2).mean()

    def intercept(self, iteration: int, z_private: torch.Tensor,
                  y: torch.Tensor, server) -> torch.Tensor:
        """Train attacker models and craft the gradient sent to the client."""
        self.encoder.train()
        self.decoder.train()
        self.critic.train()
        x_aux, _ = self.sampler.batch(z_private.shape[0])

        # autoencoder on auxiliary data
        z_aux = self.encoder(x_aux)
        recon = torch.mean((self.decoder(z_aux) - x_aux) ** 2)
        self.opt_models.zero_grad(set_to_none=True)
        recon.backward()
        self.opt_models.step()

        # critic: score the attacker's representation space high, the
        # client's low; gradient penalty on interpolates
        z_aux_const = self.encoder(x_aux).detach()
        critic_loss = (
            self.critic(z_private).mean()
            - self.critic(z_aux_const).mean()
            + self.grad_penalty * self._gradient_penalty(z_aux_const, z_private)
        )
        self.opt_critic.zero_grad(set_to_none=True)
        critic_loss.backward()
        self.opt_critic.step()

        # adversarial gradient for the client's model-as-generator
        z_leaf = z_private.detach().requires_grad_(True)
        with frozen(self.critic):
            gen_loss = -self.critic(z_leaf).mean()
        gen_loss.backward()
        self._last = {
            "loss_ae": recon.item(),
            "loss_disc": critic_loss.item(),
            "loss_gen": gen_loss.item(),
        }
        return z_leaf.grad.detach()

    def observe(self, iteration: int, client_index: int,
                transcript: Transcript, server) -> dict:
        with torch.no_grad(), batch_stat_pass(self.decoder):
            x_hat = self.decoder(transcript.smashed)
        out = {"x_hat": x_hat}
        out.update(self._last)
        return out
