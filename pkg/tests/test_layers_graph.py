"""Layer specs, shape inference, parameter and FLOP counting."""

import pytest
import torch

from splitsim.errors import ConfigError, ShapeError
from splitsim.graph import (
    ModelGraph,
    SkipEdge,
    count_flops,
    dumps,
    loads,
    param_count,
    summary,
)
from splitsim.layers import (
    avgpool,
    batchnorm,
    conv,
    conv_transpose,
    dense,
    dropout,
    flatten,
    relu,
    sigmoid,
    upsample,
)
from splitsim.modules import count_torch_params, load_model, materialize, save_model
from splitsim.rng import stream


def brute_force_conv_flops(h, w, c_in, filters, kernel, stride, batch=1):
    """Independent loop-nest MAC counter for a same-padded convolution."""
    h_out = -(-h // stride)
    w_out = -(-w // stride)
    macs = 0
    for _ in range(h_out):
        for _ in range(w_out):
            for _ in range(filters):
                macs += kernel * kernel * c_in
    return 2 * macs * batch


def test_layer_validation():
    with pytest.raises(ConfigError):
        conv(0)
    with pytest.raises(ConfigError):
        conv(8, 3, 3)
    with pytest.raises(ConfigError):
        dropout(1.0)
    with pytest.raises(ConfigError):
        dense(0)


def test_shape_inference_chain():
    g = ModelGraph(
        layers=(conv(16, 3, 2), batchnorm(), relu(), avgpool(), dense(10)),
        input_shape=(32, 32, 3),
    )
    assert g.output_shape == (10,)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ModelGraph(layers=(dense(4),), input_shape=(8, 8, 3))
    with pytest.raises(ShapeError):
        # projection output does not match the skip destination
        ModelGraph(
            layers=(conv(8, 3, 2), batchnorm()),
            input_shape=(8, 8, 3),
            skips=(SkipEdge(0, 1, ()),),
        )


def test_conv_flops_match_loop_nest_oracle():
    g = ModelGraph(layers=(conv(16, 3, 1),), input_shape=(32, 32, 3))
    assert count_flops(g, 1) == brute_force_conv_flops(32, 32, 3, 16, 3, 1)
    g2 = ModelGraph(layers=(conv(8, 3, 2),), input_shape=(16, 16, 4))
    assert count_flops(g2, 1) == brute_force_conv_flops(16, 16, 4, 8, 3, 2)


def test_flops_linear_in_batch():
    g = ModelGraph(layers=(conv(16, 3, 1),), input_shape=(32, 32, 3))
    assert count_flops(g, 128) == 128 * count_flops(g, 1)


def test_flops_elementwise_layers_free():
    base = ModelGraph(layers=(conv(8, 3, 1),), input_shape=(8, 8, 3))
    wrapped = ModelGraph(
        layers=(conv(8, 3, 1), batchnorm(), relu(), sigmoid(), dropout(0.1)),
        input_shape=(8, 8, 3),
    )
    assert count_flops(base, 1) == count_flops(wrapped, 1)


def test_flops_rejects_bad_batch():
    g = ModelGraph(layers=(conv(8, 3, 1),), input_shape=(8, 8, 3))
    with pytest.raises(ShapeError):
        count_flops(g, 0)


def test_param_count_matches_torch():
    g = ModelGraph(
        layers=(
            conv(8, 3, 2, bias=False), batchnorm(), relu(),
            conv_transpose(4, 3, 1), relu(), upsample(),
            flatten(), dropout(0.4), dense(7), sigmoid(),
        ),
        input_shape=(8, 8, 3),
    )
    module = materialize(g, stream(0, "init"))
    assert param_count(g) == count_torch_params(module)


def test_graph_json_roundtrip(small_backbone):
    again = loads(dumps(small_backbone))
    assert again == small_backbone


def test_summary_contains_layers_and_total(backbone):
    text = summary(backbone)
    assert "total params: 274042" in text
    assert "conv" in text and "dense" in text


def test_save_load_bit_exact(tmp_path, small_split):
    module = materialize(small_split.f, stream(3, "init"))
    path = tmp_path / "f.pt"
    save_model(module, path)
    again = load_model(path)
    for a, b in zip(module.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
    x = torch.rand(2, 3, 16, 16, generator=stream(3, "x"))
    module.eval()
    again.eval()
    with torch.no_grad():
        assert torch.equal(module(x), again(x))


def test_deterministic_init(small_backbone):
    a = materialize(small_backbone, stream(9, "init"))
    b = materialize(small_backbone, stream(9, "init"))
    assert all(
        torch.equal(p, q)
        for p, q in zip(a.state_dict().values(), b.state_dict().values())
    )
    c = materialize(small_backbone, stream(10, "init"))
    assert any(
        not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters())
    )
