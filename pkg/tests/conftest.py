import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from splitsim.backbones import build_backbone, split_u, split_vanilla
from splitsim.data import PartitionPlan, load_and_partition
from splitsim.graph import ModelGraph
from splitsim.layers import avgpool, conv, dense, relu
from splitsim.modules import materialize, materialize_split
from splitsim.rng import stream


@pytest.fixture(scope="session")
def backbone():
    return build_backbone("resnet20", 1.0, 10)


@pytest.fixture(scope="session")
def small_backbone():
    return build_backbone("resnet20", 0.5, 10, input_shape=(16, 16, 3))


@pytest.fixture(scope="session")
def small_split(small_backbone):
    return split_vanilla(small_backbone, 7)


@pytest.fixture(scope="session")
def small_u_split(small_backbone):
    return split_u(small_backbone, 7)


@pytest.fixture(scope="session")
def tiny_data():
    return load_and_partition("synthetic-tiny", PartitionPlan(seed=0), synthetic_size=512)


def toy_vanilla_graphs():
    """A 2-conv toy CNN split: f = first conv, g = second conv + head."""
    f = ModelGraph(layers=(conv(4, 3, 1), relu()), input_shape=(8, 8, 3), boundaries=(0,))
    g = ModelGraph(
        layers=(conv(6, 3, 2), relu(), avgpool(), dense(10)),
        input_shape=(8, 8, 4),
        boundaries=(0,),
    )
    return f, g


def toy_u_graphs():
    f = ModelGraph(layers=(conv(4, 3, 1), relu()), input_shape=(8, 8, 3), boundaries=(0,))
    g = ModelGraph(layers=(conv(6, 3, 2), relu()), input_shape=(8, 8, 4), boundaries=(0,))
    h = ModelGraph(layers=(avgpool(), dense(10)), input_shape=(4, 4, 6))
    return f, g, h


def toy_batch(seed=0, n=8, classes=5):
    x = torch.rand(n, 3, 8, 8, generator=stream(seed, "toy:x"))
    y = torch.randint(0, classes, (n,), generator=stream(seed, "toy:y"))
    return x, y


def max_rel_err(params_a, params_b) -> float:
    worst = 0.0
    for a, b in zip(params_a, params_b):
        denom = b.abs().max().item() or 1.0
        worst = max(worst, (a - b).abs().max().item() / denom)
    return worst


def all_equal(tensors_a, tensors_b) -> bool:
    tensors_a, tensors_b = list(tensors_a), list(tensors_b)
    return len(tensors_a) == len(tensors_b) and all(
        torch.equal(a, b) for a, b in zip(tensors_a, tensors_b)
    )
