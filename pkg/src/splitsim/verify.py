"""Self-contained invariant checks behind the `verify` CLI verb.

Each check exercises one structural guarantee with small models and the
built-in synthetic dataset, prints one line, and needs no test runner or
downloads. The pytest suite covers the same ground (and far more); this
is the quick field check.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import SdarAttack, flip_labels
from .backbones import build_backbone, split_u, split_vanilla
from .config import ExperimentConfig
from .data import PartitionPlan, batch_stream, load_and_partition
from .defenses import distance_correlation
from .graph import ModelGraph, count_flops, param_count
from .layers import avgpool, conv, dense, relu
from .modules import materialize, materialize_split
from .protocol import (
    ClientState,
    ServerState,
    make_optimizer,
    run_training,
    u_step,
    vanilla_step,
)
from .rng import stream


def _toy_graphs():
    f = ModelGraph(
        layers=(conv(4, 3, 1), relu()),
        input_shape=(8, 8, 3),
        boundaries=(0,),
    )
    g = ModelGraph(
        layers=(conv(6, 3, 2), relu(), avgpool(), dense(5)),
        input_shape=(8, 8, 4),
        boundaries=(0,),
    )
    return f, g


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = b.abs().max().item() or 1.0
    return (a - b).abs().max().item() / denom


def check_parameter_partition() -> tuple[bool, str]:
    g = build_backbone("resnet20", 1.0, 10)
    split4 = split_vanilla(g, 4)
    split7 = split_vanilla(g, 7)
    ok = (
        param_count(split4.f) == 29424
        and param_count(split4.g) == 244618
        and param_count(split7.f) == 124912
        and param_count(split7.g) == 149130
        and param_count(split4.f) + param_count(split4.g) == param_count(g)
    )
    return ok, "level-4/7 client/server counts match the reference table"


def check_recomposition() -> tuple[bool, str]:
    g = build_backbone("resnet20", 0.5, 10, (16, 16, 3))
    split = split_u(g, 5)
    f_m, g_m, h_m = materialize_split(split, stream(0, "sl:init"))
    whole = materialize(g, stream(0, "sl:init"))
    for m in (f_m, g_m, h_m, whole):
        m.eval()
    x = torch.rand(4, 3, 16, 16, generator=stream(0, "x"))
    with torch.no_grad():
        diff = (whole(x) - h_m(g_m(f_m(x)))).abs().max().item()
    return diff < 1e-5, f"max |H(x) - h(g(f(x)))| = {diff:.2e}"


def _toy_equivalence(u_shaped: bool) -> float:
    f_graph, g_graph = _toy_graphs()
    fg = stream(11, "f")
    f1, f2 = materialize(f_graph, stream(11, "f")), materialize(f_graph, stream(11, "f"))
    g1, g2 = materialize(g_graph, stream(11, "g")), materialize(g_graph, stream(11, "g"))
    x = torch.rand(8, 3, 8, 8, generator=stream(11, "x"))
    y = torch.randint(0, 5, (8,), generator=stream(11, "y"))
    if u_shaped:
        head_graph = ModelGraph(layers=(avgpool(), dense(5)), input_shape=(4, 4, 6))
        body_graph = ModelGraph(layers=(conv(6, 3, 2), relu()), input_shape=(8, 8, 4))
        g1 = materialize(body_graph, stream(11, "g"))
        g2 = materialize(body_graph, stream(11, "g"))
        h1 = materialize(head_graph, stream(11, "h"))
        h2 = materialize(head_graph, stream(11, "h"))
        client, server = ClientState(f1, h1), ServerState(g1)
        u_step(client, server, (x, y))
        mono_params = list(f2.parameters()) + list(g2.parameters()) + list(h2.parameters())
        opt = make_optimizer(mono_params)
        out = h2(g2(f2(x)))
        split_params = list(f1.parameters()) + list(g1.parameters()) + list(h1.parameters())
    else:
        client, server = ClientState(f1), ServerState(g1)
        vanilla_step(client, server, (x, y))
        mono_params = list(f2.parameters()) + list(g2.parameters())
        opt = make_optimizer(mono_params)
        out = g2(f2(x))
        split_params = list(f1.parameters()) + list(g1.parameters())
    loss = F.cross_entropy(out, y)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return max(_rel_err(a, b) for a, b in zip(split_params, mono_params))


def check_gradient_equivalence() -> tuple[bool, str]:
    err_v = _toy_equivalence(False)
    err_u = _toy_equivalence(True)
    ok = err_v < 1e-6 and err_u < 1e-6
    return ok, f"relative update error vanilla={err_v:.2e} u={err_u:.2e}"


def check_distance_correlation() -> tuple[bool, str]:
    gen = stream(3, "dcor")
    a = torch.randn(256, 16, generator=gen)
    self_corr = distance_correlation(a, a).item()
    q, _ = torch.linalg.qr(torch.randn(16, 16, generator=gen, dtype=torch.float64))
    b = a.double() @ q + 3.0
    invariant = distance_correlation(a, b.float()).item()
    c = torch.randn(256, 16, generator=gen)
    indep = distance_correlation(a, c).item()
    ok = abs(self_corr - 1) < 1e-6 and abs(invariant - 1) < 1e-6 and indep < 0.25
    return ok, f"self={self_corr:.8f} rigid={invariant:.8f} indep={indep:.3f}"


def check_flip_statistics() -> tuple[bool, str]:
    n, p, classes = 100_000, 0.2, 10
    labels = torch.arange(n) % classes
    flipped = flip_labels(labels, p, stream(5, "flip"), classes)
    changed = (flipped != labels).float().mean().item()
    expect = p * (classes - 1) / classes
    sigma = math.sqrt(expect * (1 - expect) / n)
    ok = abs(changed - expect) < 3 * sigma
    return ok, f"changed fraction {changed:.4f} vs {expect:.4f} (3 sigma {3*sigma:.4f})"


def check_flops() -> tuple[bool, str]:
    g = ModelGraph(layers=(conv(16, 3, 1),), input_shape=(32, 32, 3))
    analytic = count_flops(g, 1)
    loops = 2 * 32 * 32 * 16 * 3 * 3 * 3  # per-output-element loop nest
    ok = analytic == loops and count_flops(g, 128) == 128 * analytic
    return ok, f"analytic {analytic} == loop-nest {loops}"


def check_passivity() -> tuple[bool, str]:
    config = ExperimentConfig.from_dict({
        "dataset": "synthetic-tiny", "width": 0.5, "level": 4,
        "iterations": 30, "batch_size": 8, "synthetic_size": 512,
        "disc_width": 0.25, "attack": "sdar",
    })
    states = []
    for with_attack in (False, True):
        plan = PartitionPlan(seed=0)
        private, aux = load_and_partition(
            "synthetic-tiny", plan, synthetic_size=config.synthetic_size
        )
        from .harness import build_attack, build_split

        split = build_split(config)
        f_m, g_m, _ = materialize_split(split, stream(0, "sl:init"),
                                        stream(0, "sl:drop:c0"))
        client, server = ClientState(f_m), ServerState(g_m)
        attack = build_attack(config, split, [aux], 0) if with_attack else None
        run_training(
            client, server,
            batch_stream(private, 8, stream(0, "sl:data:c0")),
            config.iterations, attack,
        )
        states.append((
            [p.detach().clone() for p in f_m.parameters()],
            [p.detach().clone() for p in g_m.parameters()],
            [b.detach().clone() for b in g_m.buffers()],
        ))
    identical = all(
        torch.equal(a, b)
        for group_a, group_b in zip(states[0], states[1])
        for a, b in zip(group_a, group_b)
    )
    return identical, "theta_f, theta_g bit-identical with and without sdar hook"


def check_config_roundtrip() -> tuple[bool, str]:
    config = ExperimentConfig.from_dict({
        "dataset": "synthetic-tiny", "attack": "sdar", "seeds": [1, 2],
        "defense": {"kind": "decorrelation", "alpha": 0.4},
    })
    again = ExperimentConfig.loads(config.dumps())
    return again == config, "parse(serialize(config)) == config"


CHECKS = [
    ("parameter partition", check_parameter_partition),
    ("split recomposition", check_recomposition),
    ("protocol gradient equivalence", check_gradient_equivalence),
    ("distance correlation", check_distance_correlation),
    ("label flip statistics", check_flip_statistics),
    ("flop counting", check_flops),
    ("attack passivity", check_passivity),
    ("config round-trip", check_config_roundtrip),
]


def run_checks(emit=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        emit(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
