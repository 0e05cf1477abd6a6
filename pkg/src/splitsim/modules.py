"""Torch materialization of model graphs.

`materialize` turns a ModelGraph into a GraphModule whose parameters are
drawn from an explicit torch.Generator, so identical seeds give
bit-identical initial parameters. Initialization is He-normal for conv
and dense weights, zeros for biases, gamma=1 / beta=0 for batch norm.

All dropout inside a GraphModule draws from a private generator derived
from the init generator (overridable), never from torch's global RNG:
randomness stays confined to the stream that owns the model.
"""

from __future__ import annotations

import contextlib
import math

import torch
from torch import nn

from .errors import UsageError
from .graph import ModelGraph, from_dict, layer_shapes, to_dict
from .layers import LayerSpec, out_shape


class SeededDropout(nn.Module):
    """Dropout whose masks come from an explicit generator."""

    def __init__(self, rate: float, generator: torch.Generator):
        super().__init__()
        self.rate = rate
        self.generator = generator

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (torch.rand(x.shape, generator=self.generator) < keep).to(x.dtype)
        return x * mask / keep

    def extra_repr(self) -> str:
        return f"rate={self.rate}"


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


def _he_normal_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    std = math.sqrt(2.0 / fan_in)
    with torch.no_grad():
        tensor.normal_(0.0, std, generator=generator)


def _build_op(spec: LayerSpec, in_shape: tuple[int, ...], drop_gen: torch.Generator) -> nn.Module:
    kind = spec.kind
    if kind == "conv":
        return nn.Conv2d(
            in_shape[2], spec.filters, spec.kernel,
            stride=spec.stride, padding=spec.kernel // 2, bias=spec.bias,
        )
    if kind == "conv-transpose":
        return nn.ConvTranspose2d(
            in_shape[2], spec.filters, spec.kernel,
            stride=spec.stride, padding=spec.kernel // 2,
            output_padding=spec.stride - 1, bias=spec.bias,
        )
    if kind == "upsample":
        return nn.Upsample(scale_factor=spec.factor, mode="nearest")
    if kind == "batchnorm":
        return nn.BatchNorm2d(in_shape[2])
    if kind == "relu":
        return nn.ReLU()
    if kind == "leaky-relu":
        return nn.LeakyReLU(spec.alpha)
    if kind == "sigmoid":
        return nn.Sigmoid()
    if kind == "avgpool":
        return GlobalAvgPool()
    if kind == "flatten":
        return nn.Flatten()
    if kind == "dense":
        return nn.Linear(in_shape[0], spec.units, bias=spec.bias)
    if kind == "dropout":
        return SeededDropout(spec.rate, drop_gen)
    if kind == "embedding":
        return nn.Embedding(spec.num_embeddings, spec.units)
    raise UsageError(f"layer kind {kind!r} has no torch op")


def _init_op(op: nn.Module, generator: torch.Generator) -> None:
    if isinstance(op, (nn.Conv2d, nn.ConvTranspose2d)):
        fan_in = op.in_channels * op.kernel_size[0] * op.kernel_size[1]
        _he_normal_(op.weight, fan_in, generator)
        if op.bias is not None:
            with torch.no_grad():
                op.bias.zero_()
    elif isinstance(op, nn.Linear):
        _he_normal_(op.weight, op.in_features, generator)
        if op.bias is not None:
            with torch.no_grad():
                op.bias.zero_()
    elif isinstance(op, nn.BatchNorm2d):
        op.reset_parameters()
        op.reset_running_stats()
    elif isinstance(op, nn.Embedding):
        with torch.no_grad():
            op.weight.normal_(0.0, 0.05, generator=generator)


class GraphModule(nn.Module):
    """Executable form of a ModelGraph.

    Tensors are NCHW; graph shapes are (H, W, C). Conditional graphs take
    (x, y) and concatenate the label embedding as one extra input channel.
    """

    def __init__(self, graph: ModelGraph, generator: torch.Generator,
                 dropout_generator: torch.Generator | None = None):
        super().__init__()
        self.graph = graph
        if dropout_generator is None:
            dropout_generator = torch.Generator()
            dropout_generator.manual_seed(
                int(torch.randint(0, 2**62, (1,), generator=generator).item())
            )
        self._drop_gen = dropout_generator

        shapes = layer_shapes(graph)
        shape = graph.input_shape
        if graph.label_branch:
            h, w, c = shape
            shape = (h, w, c + 1)
        in_shapes = []
        for i in range(len(graph.layers)):
            in_shapes.append(shape)
            shape = shapes[i]

        self.ops = nn.ModuleList(
            _build_op(spec, in_shapes[i], dropout_generator)
            for i, spec in enumerate(graph.layers)
        )
        self.skip_projs = nn.ModuleList()
        for edge in graph.skips:
            tap_shape = in_shapes[edge.src]
            mods = []
            for spec in edge.projection:
                mods.append(_build_op(spec, tap_shape, dropout_generator))
                tap_shape = out_shape(spec, tap_shape)
            self.skip_projs.append(nn.Sequential(*mods))

        self.branch = None
        if graph.label_branch:
            mods = []
            bshape: tuple[int, ...] = (1,)
            for spec in graph.label_branch:
                if spec.kind == "concat":
                    continue
                mods.append(_build_op(spec, bshape, dropout_generator))
                bshape = out_shape(spec, bshape)
            self.branch = nn.ModuleList(mods)

        self._src_edges: dict[int, list[int]] = {}
        self._dst_edges: dict[int, list[int]] = {}
        for j, edge in enumerate(graph.skips):
            self._src_edges.setdefault(edge.src, []).append(j)
            self._dst_edges.setdefault(edge.dst, []).append(j)

        for op in self.ops:
            _init_op(op, generator)
        for proj in self.skip_projs:
            for op in proj:
                _init_op(op, generator)
        if self.branch is not None:
            for op in self.branch:
                _init_op(op, generator)

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        if self.graph.label_branch:
            if y is None:
                raise UsageError("conditional model requires labels")
            h, w, _ = self.graph.input_shape
            e = y
            for mod in self.branch:
                e = mod(e)
            e = e.view(-1, 1, h, w)
            x = torch.cat([x, e], dim=1)
        taps: dict[int, torch.Tensor] = {}
        for i, op in enumerate(self.ops):
            for j in self._src_edges.get(i, ()):
                taps[j] = x
            x = op(x)
            for j in self._dst_edges.get(i, ()):
                x = x + self.skip_projs[j](taps.pop(j))
        return x


def materialize(graph: ModelGraph, generator: torch.Generator,
                dropout_generator: torch.Generator | None = None) -> GraphModule:
    return GraphModule(graph, generator, dropout_generator)


def _throwaway() -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(0)
    return gen


def materialize_split(split, generator: torch.Generator,
                      dropout_generator: torch.Generator | None = None):
    """Materialize (f, g, h) of a SplitAssignment with a shared init.

    Parameters are drawn once for the whole backbone and sliced into the
    parts, so the composition of the materialized parts reproduces the
    whole model's function exactly and matches a monolithic build under
    the same generator. Returns (f, g, h) with h None in vanilla mode.
    """
    whole = materialize(split.whole, generator, dropout_generator)
    graphs = [split.f, split.g]
    starts = [0, split.cut]
    if split.h is not None:
        graphs.append(split.h)
        starts.append(split.upper_cut)
    parts = []
    for graph, start in zip(graphs, starts):
        stop = start + len(graph.layers)
        part = materialize(graph, _throwaway(), dropout_generator)
        for i in range(len(graph.layers)):
            part.ops[i].load_state_dict(whole.ops[start + i].state_dict())
        whole_edges = [
            j for j, e in enumerate(split.whole.skips)
            if start <= e.src and e.dst < stop
        ]
        for j_part, j_whole in enumerate(whole_edges):
            part.skip_projs[j_part].load_state_dict(
                whole.skip_projs[j_whole].state_dict()
            )
        parts.append(part)
    while len(parts) < 3:
        parts.append(None)
    return tuple(parts)


def count_torch_params(module: nn.Module) -> int:
    """Parameters + buffers, excluding batch-norm step counters."""
    total = sum(p.numel() for p in module.parameters())
    for name, buf in module.named_buffers():
        if not name.endswith("num_batches_tracked"):
            total += buf.numel()
    return total


def save_model(module: GraphModule, path) -> None:
    torch.save({"graph": to_dict(module.graph), "state": module.state_dict()}, path)


def load_model(path) -> GraphModule:
    payload = torch.load(path, weights_only=False)
    module = GraphModule(from_dict(payload["graph"]), _throwaway())
    module.load_state_dict(payload["state"])
    return module


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Exclude modules' parameters from autograd; restores previous flags."""
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


@contextlib.contextmanager
def batch_stat_pass(*modules: nn.Module):
    """Run modules in training mode with batch-norm statistics frozen.

    Forward passes normalize with batch statistics but leave running
    statistics (and step counters) untouched, so a pass through another
    party's frozen model cannot perturb its state.
    """
    saved_training = [m.training for m in modules]
    saved_flags = []
    for m in modules:
        m.train()
        for sub in m.modules():
            if isinstance(sub, nn.modules.batchnorm._BatchNorm):
                saved_flags.append((sub, sub.track_running_stats))
                sub.track_running_stats = False
    try:
        yield
    finally:
        for sub, flag in saved_flags:
            sub.track_running_stats = flag
        for m, was_training in zip(modules, saved_training):
            m.train(was_training)
