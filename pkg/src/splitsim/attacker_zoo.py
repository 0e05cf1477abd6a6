"""Attacker-side networks: simulator, decoder, and the two discriminators.

The simulator mirrors the client's partial model (or, when the attacker
does not know the architecture, the same layer stack with skip edges
removed). The decoder inverts the simulator block by block in reverse
order; stride-2 blocks are inverted with an upsample + conv pair instead
of a strided transpose conv to avoid checkerboard artifacts, and a
terminal sigmoid keeps reconstructions in [0, 1].

Conditional variants (vanilla split learning, where the attacker sees
labels) embed the label into 50 units, project it to one extra input
channel and concatenate it to the model input.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbones import SplitAssignment
from .graph import ModelGraph
from .layers import (
    LayerSpec,
    batchnorm,
    concat,
    conv,
    conv_transpose,
    dense,
    dropout,
    embedding,
    flatten,
    leaky_relu,
    relu,
    sigmoid,
    upsample,
)

LABEL_EMBED_UNITS = 50


@dataclass(frozen=True)
class AttackerModelSet:
    """Graphs for one attack run; materialization happens in the attack."""

    simulator: ModelGraph
    head_simulator: ModelGraph | None
    decoder: ModelGraph
    d1: ModelGraph
    d2: ModelGraph
    conditional: bool


def _label_branch(num_classes: int, input_shape: tuple[int, ...]) -> tuple[LayerSpec, ...]:
    h, w = input_shape[0], input_shape[1]
    return (embedding(num_classes, LABEL_EMBED_UNITS), dense(h * w), concat())


def build_simulator(split: SplitAssignment, same_arch: bool = True) -> ModelGraph:
    """Graph for the client-model simulator (fresh parameters at materialize).

    With `same_arch` the attacker copies f's architecture; without it, the
    skip edges are removed, leaving a plain convolutional stack with the
    same input/output shapes.
    """
    f = split.f
    if same_arch:
        return f
    return ModelGraph(
        layers=f.layers,
        input_shape=f.input_shape,
        skips=(),
        boundaries=f.boundaries,
    )


def build_head_simulator(split: SplitAssignment) -> ModelGraph:
    """Graph for the simulator of the client's head (U-shaped mode only)."""
    if split.h is None:
        raise ValueError("head simulator requires a U-shaped split")
    return split.h


def _client_blocks(simulator: ModelGraph) -> list[tuple[int, int]]:
    """(filters, stride) of each building block after the input conv."""
    blocks = []
    for start in simulator.boundaries[1:]:
        first = simulator.layers[start]
        blocks.append((first.filters, first.stride))
    return blocks


def build_decoder(
    split: SplitAssignment,
    conditional: bool = False,
    num_classes: int = 10,
    same_arch: bool = True,
) -> ModelGraph:
    """Decoder mapping split-layer representations back to input space.

    One deconvolution block per building block of the simulator, in
    reverse order: stride-2 blocks become upsample + conv, the rest
    transpose convs, each followed by batch norm and ReLU; a final conv
    to the image channel count and a sigmoid close the stack.
    """
    simulator = build_simulator(split, same_arch)
    zs_shape = simulator.output_shape
    img_channels = split.whole.input_shape[2]
    layers: list[LayerSpec] = []
    for filters, stride in reversed(_client_blocks(simulator)):
        if stride == 2:
            layers += [upsample(2), conv(filters, 3, 1, bias=False)]
        else:
            layers += [conv_transpose(filters, 3, 1, bias=False)]
        layers += [batchnorm(), relu()]
    layers += [conv(img_channels, 3, 1, bias=True), sigmoid()]
    return ModelGraph(
        layers=tuple(layers),
        input_shape=zs_shape,
        label_branch=_label_branch(num_classes, zs_shape) if conditional else (),
    )


def _scale(filters: int, width: float) -> int:
    return max(1, round(filters * width))


def _disc_tail() -> list[LayerSpec]:
    return [flatten(), dropout(0.4), dense(1)]


def build_discriminators(
    split: SplitAssignment,
    conditional: bool = False,
    num_classes: int = 10,
    wgan_mode: bool = False,
    width: float = 1.0,
) -> tuple[ModelGraph, ModelGraph]:
    """(d1, d2): logit discriminators over representations and images.

    d1 consumes split-layer tensors, d2 images; both end in a single-logit
    dense layer. `wgan_mode` strips batch norm (gradient-penalty training
    is incompatible with it). `width` scales filter counts for reduced
    desk-scale runs; 1.0 reproduces the reference structures.
    """
    zs_shape = split.f.output_shape
    img_shape = split.whole.input_shape

    def block(filters: int, stride: int, with_bn: bool) -> list[LayerSpec]:
        use_bn = with_bn and not wgan_mode
        out = [conv(_scale(filters, width), 3, stride, bias=not use_bn)]
        if use_bn:
            out.append(batchnorm())
        out.append(leaky_relu())
        return out

    if split.level <= 6:
        d1_layers = (
            block(64, 1, False)
            + block(128, 2, True)
            + block(256, 1, True)
            + block(256, 1, True)
            + block(256, 1, True)
            + [conv(_scale(256, width), 3, 2, bias=True)]
            + _disc_tail()
        )
    else:
        d1_layers = (
            block(128, 1, False)
            + block(256, 1, True)
            + block(256, 1, True)
            + block(256, 1, True)
            + [conv(_scale(256, width), 3, 2, bias=True)]
            + _disc_tail()
        )

    d2_layers = (
        block(64, 1, False)
        + block(128, 2, True)
        + block(128, 2, True)
        + block(256, 2, False)
        + _disc_tail()
    )

    branch_d1 = _label_branch(num_classes, zs_shape) if conditional else ()
    branch_d2 = _label_branch(num_classes, img_shape) if conditional else ()
    d1 = ModelGraph(layers=tuple(d1_layers), input_shape=zs_shape, label_branch=branch_d1)
    d2 = ModelGraph(layers=tuple(d2_layers), input_shape=img_shape, label_branch=branch_d2)
    return d1, d2


def build_attacker_models(
    split: SplitAssignment,
    conditional: bool = False,
    num_classes: int = 10,
    same_arch: bool = True,
    wgan_mode: bool = False,
    disc_width: float = 1.0,
) -> AttackerModelSet:
    d1, d2 = build_discriminators(split, conditional, num_classes, wgan_mode, disc_width)
    return AttackerModelSet(
        simulator=build_simulator(split, same_arch),
        head_simulator=build_head_simulator(split) if split.u_shaped else None,
        decoder=build_decoder(split, conditional, num_classes, same_arch),
        d1=d1,
        d2=d2,
        conditional=conditional,
    )
