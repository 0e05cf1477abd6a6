"""Harness orchestration: sessions, multi-client runs, grids, reports."""

import json
import math

import numpy as np
import pytest
import torch

from splitsim.config import ExperimentConfig
from splitsim.harness import (
    build_attack,
    build_split,
    checkpoint_iterations,
    run_experiment,
    run_single,
    save_grid,
)


def _config(**over):
    base = {
        "dataset": "synthetic-tiny", "width": 0.5, "level": 4,
        "iterations": 6, "batch_size": 8, "synthetic_size": 512,
        "disc_width": 0.25, "seeds": [0],
    }
    base.update(over)
    return ExperimentConfig.from_dict(base)


def test_checkpoint_iterations_scaled():
    assert checkpoint_iterations(20000) == [1000, 5000, 10000, 20000]
    assert checkpoint_iterations(400) == [20, 100, 200, 400]
    assert checkpoint_iterations(0) == []


def test_build_split_applies_dropout_to_client_blocks_only():
    config = _config(defense={"kind": "dropout", "rate": 0.25}, level=5)
    split = build_split(config)
    assert sum(1 for l in split.f.layers if l.kind == "dropout") == 5
    assert not any(l.kind == "dropout" for l in split.g.layers)


def test_multi_client_heterogeneous_run(tmp_path):
    config = _config(clients=2, heterogeneous=True, attack="sdar", iterations=8)
    summary = run_single(config, 0, tmp_path / "run")
    assert summary["iterations"] == 8
    from splitsim.metrics import read_metrics

    records = read_metrics(tmp_path / "run" / "metrics.csv")
    assert [r.client for r in records] == [0, 1] * 4
    assert all(not math.isnan(r.attack_mse) for r in records)


def test_unsplit_attack_runs_via_harness(tmp_path):
    config = _config(attack="unsplit", iterations=3,
                     unsplit_rounds=2, unsplit_inner_steps=4)
    summary = run_single(config, 0, tmp_path / "run")
    assert math.isfinite(summary["final_attack_mse"])
    assert len(summary["unsplit_objectives"]) == 2
    assert (tmp_path / "run" / "grids" / "final.png").exists()


def test_fsha_attack_runs_via_harness(tmp_path):
    config = _config(attack="fsha", active=True, iterations=5)
    summary = run_single(config, 0, tmp_path / "run")
    assert math.isfinite(summary["final_attack_mse"])


def test_save_grid_writes_two_row_png(tmp_path):
    from PIL import Image

    originals = torch.rand(12, 3, 16, 16)
    recons = torch.rand(12, 3, 16, 16)
    path = tmp_path / "grid.png"
    save_grid(path, originals, recons)
    with Image.open(path) as im:
        assert im.size == (10 * 16, 2 * 16)  # 10-image probe slice, two rows
        assert im.mode == "RGB"


def test_grids_written_at_checkpoints(tmp_path):
    config = _config(attack="sdar", iterations=8)
    run_single(config, 0, tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run" / "grids").glob("*.png"))
    assert names == ["iter000001.png", "iter000002.png", "iter000004.png",
                     "iter000008.png"]


def test_aggregate_statistics_across_seeds(tmp_path):
    config = _config(attack="sdar", iterations=5, seeds=[0, 1, 2])
    exp_dir = run_experiment(config, tmp_path)
    agg = json.loads((exp_dir / "aggregate.json").read_text())
    stat = agg["final_attack_mse"]
    values = [s["final_attack_mse"] for s in agg["per_seed"]]
    assert stat["mean"] == pytest.approx(float(np.mean(values)))
    assert stat["std"] == pytest.approx(float(np.std(values)))
    assert stat["min"] == min(values) and stat["max"] == max(values)
    assert len(values) == 3


def test_defended_run_with_decorrelation(tmp_path):
    config = _config(
        attack="sdar", iterations=6,
        defense={"kind": "decorrelation", "alpha": 0.8},
    )
    summary = run_single(config, 0, tmp_path / "run")
    assert math.isfinite(summary["final_attack_mse"])


def test_weight_penalty_run(tmp_path):
    config = _config(
        attack="sdar", iterations=4,
        defense={"kind": "weight_penalty", "penalty": "l1", "factor": 0.01},
    )
    summary = run_single(config, 0, tmp_path / "run")
    assert math.isfinite(summary["final_train_loss"])


def test_restart_policy_reinitializes_on_divergence(small_u_split, tiny_data):
    from splitsim.attacks import MAX_RESTARTS, AttackState

    _, aux = tiny_data
    state = AttackState(small_u_split, aux, 0, mode="u", lambda1=0.02,
                        lambda2=1e-5, flip_p=0.2, disc_width=0.25)
    # healthy history, then a sustained explosion of the reconstruction loss
    for _ in range(400):
        assert not state.note_reconstruction_loss(0.01)
    fired = False
    for _ in range(250):
        if state.note_reconstruction_loss(1.0):
            fired = True
            break
    assert fired
    before = [p.detach().clone() for p in state.simulator.parameters()]
    state.reinitialize()
    assert state.restarts == 1
    after = list(state.simulator.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, after))
    # non-finite loss asks for an immediate restart while budget remains
    assert state.note_reconstruction_loss(float("nan"))
    state.restarts = MAX_RESTARTS
    assert not state.note_reconstruction_loss(float("nan"))
