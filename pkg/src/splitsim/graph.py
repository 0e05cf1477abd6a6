"""Model graphs: ordered layer lists with optional residual skip edges.

A ModelGraph is immutable once built. Splitting, parameter counting,
FLOP counting and summaries all operate on the graph; the torch
materialization lives in modules.py.

A skip edge taps the *input* of layer `src` and adds it (optionally
through a projection, e.g. a strided 1x1 conv + batch norm) to the
*output* of layer `dst`. The layer at `dst + 1` therefore sees the sum,
which is how a residual block places its final activation after the add.

`boundaries` marks the first layer index of each building block; split
operations cut only at boundaries, and an optional label branch
(embedding -> dense -> concat as an extra input channel) makes a graph
conditional on class labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ShapeError
from .layers import (
    LayerSpec,
    forward_macs,
    out_shape,
    param_count as layer_params,
    spec_from_dict,
    spec_to_dict,
)


@dataclass(frozen=True)
class SkipEdge:
    src: int
    dst: int
    projection: tuple[LayerSpec, ...] = ()


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    skips: tuple[SkipEdge, ...] = ()
    boundaries: tuple[int, ...] = ()
    label_branch: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        layer_shapes(self)  # validates composition eagerly

    @property
    def output_shape(self) -> tuple[int, ...]:
        return layer_shapes(self)[-1]

    @property
    def conditional(self) -> bool:
        return bool(self.label_branch)


def _branch_input_shape(graph: ModelGraph) -> tuple[int, ...]:
    """Shape seen by the first layer, including the label channel if any."""
    if not graph.label_branch:
        return graph.input_shape
    h, w, c = graph.input_shape
    return (h, w, c + 1)


def layer_shapes(graph: ModelGraph) -> list[tuple[int, ...]]:
    """Output shape after every layer; index -1 is the model output.

    Also validates that adjacent layers compose and that every skip edge
    connects shape-compatible endpoints.
    """
    shapes = []
    shape = _branch_input_shape(graph)
    inputs = []  # input shape of each layer, for skip validation
    for i, spec in enumerate(graph.layers):
        inputs.append(shape)
        shape = out_shape(spec, shape)
        shapes.append(shape)
    for edge in graph.skips:
        if not 0 <= edge.src <= edge.dst < len(graph.layers):
            raise ShapeError(f"skip edge {edge.src}->{edge.dst} out of range")
        tap = inputs[edge.src]
        for spec in edge.projection:
            tap = out_shape(spec, tap)
        if tap != shapes[edge.dst]:
            raise ShapeError(
                f"skip edge {edge.src}->{edge.dst}: tap shape {tap} does not "
                f"match layer output {shapes[edge.dst]}"
            )
    return shapes


def param_count(graph: ModelGraph) -> int:
    """Total stateful scalars: layers, skip projections and label branch."""
    total = 0
    shape = _branch_input_shape(graph)
    inputs = []
    for spec in graph.layers:
        inputs.append(shape)
        total += layer_params(spec, shape)
        shape = out_shape(spec, shape)
    for edge in graph.skips:
        tap = inputs[edge.src]
        for spec in edge.projection:
            total += layer_params(spec, tap)
            tap = out_shape(spec, tap)
    total += _branch_params(graph)
    return total


def _branch_params(graph: ModelGraph) -> int:
    total = 0
    shape: tuple[int, ...] = (1,)
    for spec in graph.label_branch:
        if spec.kind == "concat":
            continue
        total += layer_params(spec, shape)
        shape = out_shape(spec, shape)
    return total


def count_flops(graph: ModelGraph, batch_size: int = 1) -> int:
    """Forward-pass FLOPs for a batch: 2 x MACs, summed over the graph.

    Backpropagation is conventionally twice this; a full training step on
    the graph therefore costs 3 x count_flops.
    """
    if batch_size <= 0:
        raise ShapeError(f"batch_size must be positive, got {batch_size}")
    macs = 0
    shape = _branch_input_shape(graph)
    inputs = []
    for spec in graph.layers:
        inputs.append(shape)
        macs += forward_macs(spec, shape)
        shape = out_shape(spec, shape)
    for edge in graph.skips:
        tap = inputs[edge.src]
        for spec in edge.projection:
            macs += forward_macs(spec, tap)
            tap = out_shape(spec, tap)
    bshape: tuple[int, ...] = (1,)
    for spec in graph.label_branch:
        if spec.kind == "concat":
            continue
        macs += forward_macs(spec, bshape)
        bshape = out_shape(spec, bshape)
    return 2 * macs * batch_size


def summary(graph: ModelGraph) -> str:
    """Structured text summary: one line per layer (name, shape, params)."""
    lines = [f"{'layer':<22}{'output shape':<18}{'params':>10}"]
    shape = _branch_input_shape(graph)
    for i, spec in enumerate(graph.layers):
        n = layer_params(spec, shape)
        shape = out_shape(spec, shape)
        name = f"{i}:{spec.kind}"
        lines.append(f"{name:<22}{str(shape):<18}{n:>10}")
    for edge in graph.skips:
        tap_params = 0
        tap = layer_shapes(graph)[edge.src - 1] if edge.src > 0 else _branch_input_shape(graph)
        for spec in edge.projection:
            tap_params += layer_params(spec, tap)
            tap = out_shape(spec, tap)
        kind = "projection" if edge.projection else "identity"
        lines.append(f"skip {edge.src}->{edge.dst} ({kind}){'':<4}{tap_params:>10}")
    lines.append(f"total params: {param_count(graph)}")
    return "\n".join(lines)


def to_dict(graph: ModelGraph) -> dict:
    return {
        "layers": [spec_to_dict(s) for s in graph.layers],
        "input_shape": list(graph.input_shape),
        "skips": [
            {
                "src": e.src,
                "dst": e.dst,
                "projection": [spec_to_dict(s) for s in e.projection],
            }
            for e in graph.skips
        ],
        "boundaries": list(graph.boundaries),
        "label_branch": [spec_to_dict(s) for s in graph.label_branch],
    }


def from_dict(d: dict) -> ModelGraph:
    return ModelGraph(
        layers=tuple(spec_from_dict(s) for s in d["layers"]),
        input_shape=tuple(d["input_shape"]),
        skips=tuple(
            SkipEdge(
                src=e["src"],
                dst=e["dst"],
                projection=tuple(spec_from_dict(s) for s in e["projection"]),
            )
            for e in d["skips"]
        ),
        boundaries=tuple(d["boundaries"]),
        label_branch=tuple(spec_from_dict(s) for s in d["label_branch"]),
    )


def dumps(graph: ModelGraph) -> str:
    return json.dumps(to_dict(graph), sort_keys=True)


def loads(text: str) -> ModelGraph:
    return from_dict(json.loads(text))
