"""Target backbones and their partition into client/server partial models.

Both backbones stack an input conv block and nine two-conv building
blocks with base widths 16/32/64 (doubling at blocks 4 and 7, which also
downsample by stride 2), finished by global average pooling and a dense
output layer. The residual variant adds an identity skip around every
building block, with a strided 1x1 projection where shapes change; the
plain variant is the same stack without skips.

The split level counts building blocks held by the client: the client's
partial model is the input conv block plus the first `level` building
blocks. In the U-shaped configuration the client additionally owns the
head (average pooling and the dense output layer).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .graph import ModelGraph, SkipEdge
from .layers import avgpool, batchnorm, conv, dense, relu

ARCHS = ("resnet20", "plainnet20")

MIN_LEVEL = 4
MAX_LEVEL_VANILLA = 9
MAX_LEVEL_U = 7

_HEAD_LAYERS = 2  # avgpool + dense


@dataclass(frozen=True)
class SplitAssignment:
    """A backbone and its partition at a split level.

    `f` is the client's lower part, `g` the server's middle (or upper)
    part and `h` the client's head in U-shaped mode. `cut` and
    `upper_cut` are layer indices into `whole`.
    """

    whole: ModelGraph
    f: ModelGraph
    g: ModelGraph
    h: ModelGraph | None
    level: int
    cut: int
    upper_cut: int | None

    @property
    def u_shaped(self) -> bool:
        return self.h is not None


def _scaled(base: int, width_multiplier: float) -> int:
    return max(1, round(base * width_multiplier))


def build_backbone(
    arch: str,
    width_multiplier: float = 1.0,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (32, 32, 3),
) -> ModelGraph:
    """Construct a 20-layer backbone graph.

    resnet20 carries nine residual skip edges; plainnet20 is the identical
    layer stack with zero skip edges. Filter counts 16/32/64 are scaled by
    the width multiplier and rounded to the nearest integer >= 1.
    """
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if width_multiplier <= 0:
        raise ConfigError("width_multiplier must be positive")

    widths = [_scaled(c, width_multiplier) for c in (16, 32, 64)]
    layers = [conv(widths[0], 3, 1, bias=False), batchnorm(), relu()]
    boundaries = [0]
    skips = []
    c_in = widths[0]
    for block in range(9):
        stage = block // 3
        c_out = widths[stage]
        stride = 2 if block in (3, 6) else 1
        start = len(layers)
        boundaries.append(start)
        layers += [
            conv(c_out, 3, stride, bias=False),
            batchnorm(),
            relu(),
            conv(c_out, 3, 1, bias=False),
            batchnorm(),
            relu(),
        ]
        if arch == "resnet20":
            projection = ()
            if stride != 1 or c_in != c_out:
                projection = (conv(c_out, 1, stride, bias=False), batchnorm())
            # tap the block input, add onto the second batchnorm's output,
            # so the trailing relu activates the sum
            skips.append(SkipEdge(src=start, dst=start + 4, projection=projection))
        c_in = c_out
    boundaries.append(len(layers))
    layers += [avgpool(), dense(num_classes)]

    return ModelGraph(
        layers=tuple(layers),
        input_shape=input_shape,
        skips=tuple(skips),
        boundaries=tuple(boundaries),
    )


def _slice(graph: ModelGraph, start: int, stop: int, input_shape: tuple[int, ...]) -> ModelGraph:
    layers = graph.layers[start:stop]
    skips = tuple(
        SkipEdge(e.src - start, e.dst - start, e.projection)
        for e in graph.skips
        if start <= e.src and e.dst < stop
    )
    boundaries = tuple(b - start for b in graph.boundaries if start <= b < stop)
    return ModelGraph(
        layers=layers,
        input_shape=input_shape,
        skips=skips,
        boundaries=boundaries,
    )


def _check_level(level: int, max_level: int) -> None:
    if not MIN_LEVEL <= level <= max_level:
        raise ConfigError(
            f"split level must be in [{MIN_LEVEL}, {max_level}], got {level}"
        )


def _cut_index(graph: ModelGraph, level: int) -> int:
    # client = input conv block + `level` building blocks
    return graph.boundaries[level + 1]


def _shape_at(graph: ModelGraph, cut: int) -> tuple[int, ...]:
    from .graph import layer_shapes

    return graph.input_shape if cut == 0 else layer_shapes(graph)[cut - 1]


def split_vanilla(model: ModelGraph, level: int) -> SplitAssignment:
    """Partition into client f (first `level` blocks) and server g (rest)."""
    _check_level(level, MAX_LEVEL_VANILLA)
    cut = _cut_index(model, level)
    f = _slice(model, 0, cut, model.input_shape)
    g = _slice(model, cut, len(model.layers), _shape_at(model, cut))
    return SplitAssignment(whole=model, f=f, g=g, h=None, level=level, cut=cut, upper_cut=None)


def split_u(model: ModelGraph, level: int) -> SplitAssignment:
    """U-shaped partition: client also keeps the head (avgpool + dense)."""
    _check_level(level, MAX_LEVEL_U)
    cut = _cut_index(model, level)
    upper = len(model.layers) - _HEAD_LAYERS
    f = _slice(model, 0, cut, model.input_shape)
    g = _slice(model, cut, upper, _shape_at(model, cut))
    h = _slice(model, upper, len(model.layers), _shape_at(model, upper))
    return SplitAssignment(whole=model, f=f, g=g, h=h, level=level, cut=cut, upper_cut=upper)
