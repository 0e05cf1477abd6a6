"""Layer specifications: the backend-independent building blocks of a model.

A LayerSpec is a frozen description of one layer. Shape propagation,
parameter counting and FLOP counting are pure functions of the spec and
the incoming shape, so whole-graph statistics never require a tensor
backend. Image shapes are (H, W, C); vector shapes are (N,).

Counting conventions (used consistently by tests and reports):
  * parameter counts include batch-norm running statistics (4 per channel),
    matching the per-split statistics reported for the backbones;
  * convolutions followed by batch norm carry no bias, all other conv and
    every dense layer does;
  * forward FLOPs are 2 x multiply-accumulates of conv / conv-transpose /
    dense layers; element-wise layers, pooling and embedding lookups count
    as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigError, ShapeError

CONV_KINDS = ("conv", "conv-transpose")

KINDS = (
    "conv",
    "conv-transpose",
    "upsample",
    "batchnorm",
    "relu",
    "leaky-relu",
    "avgpool",
    "flatten",
    "dense",
    "embedding",
    "concat",
    "dropout",
    "sigmoid",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    filters: int = 0
    stride: int = 1
    units: int = 0
    rate: float = 0.0
    num_embeddings: int = 0
    factor: int = 2
    bias: bool = True
    alpha: float = 0.2  # leaky-relu slope

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in CONV_KINDS and self.filters <= 0:
            raise ConfigError(f"{self.kind} needs filters > 0, got {self.filters}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "dense" and self.units <= 0:
            raise ConfigError("dense needs units > 0")
        if self.kind == "embedding" and (self.num_embeddings <= 0 or self.units <= 0):
            raise ConfigError("embedding needs num_embeddings > 0 and units > 0")


# Constructor helpers keep graph-building code readable.

def conv(filters: int, kernel: int = 3, stride: int = 1, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv", kernel=kernel, filters=filters, stride=stride, bias=bias)


def conv_transpose(filters: int, kernel: int = 3, stride: int = 1, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv-transpose", kernel=kernel, filters=filters, stride=stride, bias=bias)


def upsample(factor: int = 2) -> LayerSpec:
    return LayerSpec("upsample", factor=factor)


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def leaky_relu(alpha: float = 0.2) -> LayerSpec:
    return LayerSpec("leaky-relu", alpha=alpha)


def avgpool() -> LayerSpec:
    """Global average pool: (H, W, C) -> (C,)."""
    return LayerSpec("avgpool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", units=units, bias=bias)


def embedding(num_embeddings: int, units: int) -> LayerSpec:
    return LayerSpec("embedding", num_embeddings=num_embeddings, units=units)


def concat() -> LayerSpec:
    return LayerSpec("concat")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape produced by `spec` on input `shape`; raises ShapeError on misuse."""
    kind = spec.kind
    if kind in ("relu", "leaky-relu", "sigmoid", "dropout", "concat"):
        return shape
    if kind == "batchnorm":
        if len(shape) != 3:
            raise ShapeError(f"batchnorm expects an image shape, got {shape}")
        return shape
    if kind in CONV_KINDS:
        if len(shape) != 3:
            raise ShapeError(f"{kind} expects (H, W, C), got {shape}")
        h, w, _ = shape
        if kind == "conv":
            # 'same' padding: ceil division under stride
            return (-(-h // spec.stride), -(-w // spec.stride), spec.filters)
        return (h * spec.stride, w * spec.stride, spec.filters)
    if kind == "upsample":
        h, w, c = shape
        return (h * spec.factor, w * spec.factor, c)
    if kind == "avgpool":
        if len(shape) != 3:
            raise ShapeError(f"avgpool expects (H, W, C), got {shape}")
        return (shape[2],)
    if kind == "flatten":
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense expects a vector, got {shape}")
        return (spec.units,)
    if kind == "embedding":
        return (spec.units,)
    raise ShapeError(f"cannot infer shape for {kind}")


def param_count(spec: LayerSpec, shape: tuple[int, ...]) -> int:
    """Number of stateful scalars held by the layer (incl. BN statistics)."""
    kind = spec.kind
    if kind in CONV_KINDS:
        c_in = shape[2]
        n = spec.kernel * spec.kernel * c_in * spec.filters
        return n + (spec.filters if spec.bias else 0)
    if kind == "batchnorm":
        return 4 * shape[2]
    if kind == "dense":
        return shape[0] * spec.units + (spec.units if spec.bias else 0)
    if kind == "embedding":
        return spec.num_embeddings * spec.units
    return 0


def forward_macs(spec: LayerSpec, shape: tuple[int, ...]) -> int:
    """Multiply-accumulates of one forward pass on a single example."""
    kind = spec.kind
    if kind == "conv":
        h, w, c = out_shape(spec, shape)
        return h * w * c * spec.kernel * spec.kernel * shape[2]
    if kind == "conv-transpose":
        h, w, c_in = shape
        return h * w * c_in * spec.kernel * spec.kernel * spec.filters
    if kind == "dense":
        return shape[0] * spec.units
    return 0


def spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(**d)
