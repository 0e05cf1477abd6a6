"""Protocol state machines: equivalence, message discipline, determinism."""

import dataclasses

import pytest
import torch
import torch.nn.functional as F

from conftest import all_equal, max_rel_err, toy_batch, toy_u_graphs, toy_vanilla_graphs
from splitsim.data import batch_stream
from splitsim.errors import ConfigError, NumericsError
from splitsim.modules import materialize, materialize_split
from splitsim.protocol import (
    TAG_GRAD_SPLIT,
    TAG_GRAD_T,
    TAG_LABELS,
    TAG_SMASHED,
    TAG_UP,
    ClientState,
    ServerState,
    make_optimizer,
    multi_client_schedule,
    run_training,
    u_step,
    vanilla_step,
)
from splitsim.rng import stream
from splitsim.tensorfile import TranscriptWriter, read_transcript


def _toy_parties(seed=0, u_shaped=False):
    if u_shaped:
        f_g, g_g, h_g = toy_u_graphs()
        f = materialize(f_g, stream(seed, "f"))
        g = materialize(g_g, stream(seed, "g"))
        h = materialize(h_g, stream(seed, "h"))
        return ClientState(f, h), ServerState(g)
    f_g, g_g = toy_vanilla_graphs()
    f = materialize(f_g, stream(seed, "f"))
    g = materialize(g_g, stream(seed, "g"))
    return ClientState(f), ServerState(g)


def _monolithic_step(seed, batch, u_shaped=False):
    x, y = batch
    if u_shaped:
        f_g, g_g, h_g = toy_u_graphs()
        mods = [materialize(f_g, stream(seed, "f")),
                materialize(g_g, stream(seed, "g")),
                materialize(h_g, stream(seed, "h"))]
    else:
        f_g, g_g = toy_vanilla_graphs()
        mods = [materialize(f_g, stream(seed, "f")),
                materialize(g_g, stream(seed, "g"))]
    params = [p for m in mods for p in m.parameters()]
    opt = make_optimizer(params)
    out = x
    for m in mods:
        out = m(out)
    loss = F.cross_entropy(out, y)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return mods


@pytest.mark.parametrize("u_shaped", [False, True])
def test_one_step_equals_monolithic(u_shaped):
    batch = toy_batch()
    client, server = _toy_parties(0, u_shaped)
    if u_shaped:
        u_step(client, server, batch)
        split_mods = [client.f, server.g, client.h]
    else:
        vanilla_step(client, server, batch)
        split_mods = [client.f, server.g]
    mono = _monolithic_step(0, batch, u_shaped)
    split_params = [p for m in split_mods for p in m.parameters()]
    mono_params = [p for m in mono for p in m.parameters()]
    assert max_rel_err(split_params, mono_params) < 1e-6
    split_bufs = [b for m in split_mods for b in m.buffers()]
    mono_bufs = [b for m in mono for b in m.buffers()]
    assert all_equal(split_bufs, mono_bufs)


def test_zero_learning_rate_freezes_parameters():
    client, server = _toy_parties()
    client.set_lr(0.0)
    for group in server.optimizer.param_groups:
        group["lr"] = 0.0
    before = [p.detach().clone() for p in list(client.f.parameters()) + list(server.g.parameters())]
    vanilla_step(client, server, toy_batch())
    after = list(client.f.parameters()) + list(server.g.parameters())
    assert all_equal(before, after)


def test_vanilla_message_discipline():
    client, server = _toy_parties()
    transcript, _, _ = vanilla_step(client, server, toy_batch())
    assert [m.tag for m in transcript.messages] == [TAG_SMASHED, TAG_LABELS, TAG_GRAD_SPLIT]


def test_u_message_discipline_no_labels():
    client, server = _toy_parties(u_shaped=True)
    transcript, _, _ = u_step(client, server, toy_batch())
    assert [m.tag for m in transcript.messages] == \
        [TAG_SMASHED, TAG_UP, TAG_GRAD_T, TAG_GRAD_SPLIT]
    assert not transcript.has(TAG_LABELS)


def test_u_step_with_frozen_head_leaves_it_unchanged():
    client, server = _toy_parties(u_shaped=True)
    for p in client.h.parameters():
        p.requires_grad_(False)
    before_h = [p.detach().clone() for p in client.h.parameters()]
    before_f = [p.detach().clone() for p in client.f.parameters()]
    u_step(client, server, toy_batch())
    assert all_equal(before_h, client.h.parameters())
    assert not all_equal(before_f, client.f.parameters())  # f still trains


def test_non_finite_loss_raises_with_iteration():
    client, server = _toy_parties()
    with torch.no_grad():
        next(server.g.parameters()).fill_(float("inf"))
    with pytest.raises(NumericsError) as err:
        vanilla_step(client, server, toy_batch(), iteration=17)
    assert err.value.iteration == 17


def test_zero_iterations_empty_trace(tiny_data):
    private, _ = tiny_data
    client, server = _toy_parties()
    trace = run_training(
        client, server, batch_stream(private, 8, stream(0, "d")), 0
    )
    assert trace.records == []


def _run_tiny(seed, iterations=6):
    from splitsim.backbones import build_backbone, split_vanilla
    from splitsim.data import PartitionPlan, load_and_partition

    private, _ = load_and_partition(
        "synthetic-tiny", PartitionPlan(seed=seed), synthetic_size=256
    )
    backbone = build_backbone("resnet20", 0.5, 10, (16, 16, 3))
    split = split_vanilla(backbone, 4)
    f_m, g_m, _ = materialize_split(split, stream(seed, "sl:init"))
    client, server = ClientState(f_m), ServerState(g_m)
    trace = run_training(
        client, server, batch_stream(private, 8, stream(seed, "sl:data")), iterations
    )
    return trace, client, server


def test_same_seed_gives_bit_identical_traces():
    trace_a, client_a, server_a = _run_tiny(5)
    trace_b, client_b, server_b = _run_tiny(5)
    assert [dataclasses.asdict(r) for r in trace_a.records] == \
        [dataclasses.asdict(r) for r in trace_b.records]
    assert all_equal(client_a.f.parameters(), client_b.f.parameters())
    assert all_equal(server_a.g.parameters(), server_b.g.parameters())


def test_multi_client_round_robin(tiny_data):
    private, _ = tiny_data
    clients = []
    streams = []
    for i in range(2):
        client, _ = _toy_parties(i)
        clients.append(client)
        streams.append(batch_stream(private, 8, stream(i, "d")))
    _, server = _toy_parties(9)
    trace = multi_client_schedule(clients, server, streams, 10)
    served = [r.client_index for r in trace.records]
    assert served == [0, 1] * 5


def test_single_client_is_k1_schedule(tiny_data):
    private, _ = tiny_data
    client_a, server_a = _toy_parties(3)
    trace_a = run_training(
        client_a, server_a, batch_stream(private, 8, stream(3, "d")), 5
    )
    client_b, server_b = _toy_parties(3)
    trace_b = multi_client_schedule(
        [client_b], server_b, [batch_stream(private, 8, stream(3, "d"))], 5
    )
    assert [r.loss for r in trace_a.records] == [r.loss for r in trace_b.records]
    assert all_equal(client_a.f.parameters(), client_b.f.parameters())


def test_empty_shard_rejected(tiny_data):
    private, _ = tiny_data
    import numpy as np

    from splitsim.data import DataSubset

    empty = DataSubset(private.handle, np.empty(0, dtype=np.int64))
    with pytest.raises(ConfigError):
        batch_stream(empty, 8, stream(0, "d"))


def test_transcript_persistence_roundtrip(tmp_path, tiny_data):
    private, _ = tiny_data
    client, server = _toy_parties()
    path = tmp_path / "transcript.bin"
    with TranscriptWriter(path) as writer:
        run_training(
            client, server, batch_stream(private, 8, stream(0, "d")), 3,
            transcript_writer=writer,
        )
    records = list(read_transcript(path))
    tags = [tag for _, tag, _ in records]
    assert tags == [TAG_SMASHED, TAG_LABELS, TAG_GRAD_SPLIT] * 3
    iterations = sorted({i for i, _, _ in records})
    assert iterations == [0, 1, 2]
