"""Experiment orchestration: seeded runs, persistence, reports, checks.

A run directory is content-addressed by the config hash; each seed gets
a subdirectory with byte-stable metrics records, reconstruction grids at
scaled checkpoints, a timing sidecar and a summary. Reports aggregate
across seeds (mean curve with min/max shading) and across runs (table by
attack and split level).
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from .attacks import NaiveSdaAttack, PcatAttack, SdarAttack
from .backbones import SplitAssignment, build_backbone, split_u, split_vanilla
from .config import ExperimentConfig
from .data import (
    REGISTRY,
    DataSubset,
    batch_stream,
    heterogeneous_split,
    load_and_partition,
)
from .defenses import with_dropout
from .errors import ConfigError
from .fsha import FSHA_MODEL_LR, FshaAttack
from .graph import ModelGraph
from .metrics import MetricsRecord, cost_report, write_metrics
from .modules import materialize_split
from .protocol import (
    ClientState,
    ServerState,
    TrainingTrace,
    Transcript,
    Message,
    TAG_GRAD_SPLIT,
    TAG_GRAD_T,
    TAG_LABELS,
    TAG_SMASHED,
    TAG_UP,
    multi_client_schedule,
    score_attack_outputs,
)
from .rng import stream
from .tensorfile import TranscriptWriter, read_transcript
from .unsplit import UnsplitAttack
from .rng import derive_seed

CHECKPOINT_FRACTIONS = (0.05, 0.25, 0.5, 1.0)
SUMMARY_WINDOW = 100  # final metrics average the last 100 iterations
GRID_COLUMNS = 10


def checkpoint_iterations(total: int) -> list[int]:
    if total <= 0:
        return []
    return sorted({max(1, round(total * f)) for f in CHECKPOINT_FRACTIONS})


def build_split(config: ExperimentConfig) -> SplitAssignment:
    shape, num_classes = REGISTRY[config.dataset]
    whole = build_backbone(config.arch, config.width, num_classes, shape)
    if config.defense.kind == "dropout" and config.defense.rate > 0:
        whole = with_dropout(whole, config.defense.rate, through_block=config.level)
    if config.mode == "u":
        return split_u(whole, config.level)
    return split_vanilla(whole, config.level)


def build_attack(config: ExperimentConfig, split: SplitAssignment,
                 aux: list[DataSubset], seed: int):
    _, num_classes = REGISTRY[config.dataset]
    lam1, lam2, flip_p = config.resolved_hyperparams()
    common = dict(
        mode=config.mode, num_classes=num_classes,
        same_arch=config.sim_same_arch, lr=config.lr,
        disc_width=config.disc_width, defense=config.defense,
    )
    if config.attack == "none":
        return None
    if config.attack == "naive_sda":
        return NaiveSdaAttack(split, aux, seed, **common)
    if config.attack == "pcat":
        return PcatAttack(split, aux, seed, **common)
    if config.attack == "sdar":
        return SdarAttack(
            split, aux, seed, conditional=config.effective_conditional,
            lambda1=lam1, lambda2=lam2, flip_p=flip_p if config.mode == "u" else 0.0,
            **common,
        )
    if config.attack == "unsplit":
        sim_graph = split.f if config.sim_same_arch else ModelGraph(
            layers=split.f.layers, input_shape=split.f.input_shape,
            boundaries=split.f.boundaries,
        )
        return UnsplitAttack(
            sim_graph, seed, rounds=config.unsplit_rounds,
            inner_steps=config.unsplit_inner_steps,
        )
    if config.attack == "fsha":
        return FshaAttack(
            split, aux[0], seed, num_classes=num_classes,
            same_arch=config.sim_same_arch, disc_width=config.disc_width,
        )
    raise ConfigError(f"unknown attack {config.attack!r}")


def _equal_shards(subset: DataSubset, k: int, seed: int) -> list[DataSubset]:
    gen = np.random.default_rng(derive_seed(seed, "shards"))
    order = subset.indices.copy()
    gen.shuffle(order)
    return [DataSubset(subset.handle, np.sort(part)) for part in np.array_split(order, k)]


def save_grid(path, originals: torch.Tensor, recons: torch.Tensor) -> None:
    """Two-row 8-bit RGB grid: originals on top, reconstructions below."""
    from PIL import Image

    n = min(GRID_COLUMNS, originals.shape[0])

    def row(batch):
        imgs = (batch[:n].clamp(0, 1) * 255).to(torch.uint8)
        cells = [imgs[i].permute(1, 2, 0).numpy() for i in range(n)]
        return np.concatenate(cells, axis=1)

    grid = np.concatenate([row(originals), row(recons)], axis=0)
    if grid.shape[2] == 1:
        grid = np.repeat(grid, 3, axis=2)
    Image.fromarray(grid, mode="RGB").save(path)


def _trace_to_records(trace: TrainingTrace) -> list[MetricsRecord]:
    records = []
    for r in trace.records:
        kwargs = {k: v for k, v in r.attack.items()
                  if k in MetricsRecord.__dataclass_fields__}
        records.append(MetricsRecord(
            iteration=r.iteration, client=r.client_index,
            train_loss=r.loss, train_acc=r.accuracy, **kwargs,
        ))
    return records


def _tail_mean(values: list[float], window: int = SUMMARY_WINDOW) -> float:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return math.nan
    return float(np.mean(vals[-window:]))


def summarize_trace(trace: TrainingTrace) -> dict:
    records = trace.records
    return {
        "iterations": len(records),
        "final_train_loss": _tail_mean([r.loss for r in records]),
        "final_train_acc": _tail_mean([r.accuracy for r in records]),
        "final_attack_mse": _tail_mean(
            [r.attack.get("attack_mse", math.nan) for r in records]
        ),
        "final_label_acc": _tail_mean(
            [r.attack.get("label_acc", math.nan) for r in records]
        ),
        "final_aux_mse": _tail_mean(
            [r.attack.get("aux_mse", math.nan) for r in records]
        ),
        "restarts": sum(1 for r in records if r.attack.get("restarted")),
    }


def run_single(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    """Execute one seeded trial and persist its artifacts."""
    run_dir.mkdir(parents=True, exist_ok=True)
    _, num_classes = REGISTRY[config.dataset]
    plan_kwargs = dict(
        cache_dir=None, private_cap=config.private_size,
        aux_cap=config.aux_size, synthetic_size=config.synthetic_size,
    )
    from .data import PartitionPlan

    plan = PartitionPlan(config.aux_ratio, config.removed_classes, seed)
    private, aux = load_and_partition(config.dataset, plan, **plan_kwargs)

    split = build_split(config)
    k = config.clients
    if k > 1:
        shards = (heterogeneous_split(private, k) if config.heterogeneous
                  else _equal_shards(private, k, seed))
        aux_shards = (heterogeneous_split(aux, k) if config.heterogeneous
                      else [aux] * k)
    else:
        shards, aux_shards = [private], [aux]

    clients = []
    streams = []
    server = None
    for i, shard in enumerate(shards):
        tag = f"sl:init:c{i}" if i else "sl:init"
        f_mod, g_mod, h_mod = materialize_split(
            split, stream(seed, tag), stream(seed, f"sl:drop:c{i}")
        )
        if server is None:
            server = ServerState(g_mod, lr=config.lr)
        client_lr = FSHA_MODEL_LR if config.attack == "fsha" else config.lr
        clients.append(ClientState(f_mod, h_mod, lr=client_lr, defense=config.defense))
        streams.append(batch_stream(
            shard, config.effective_batch_size, stream(seed, f"sl:data:c{i}")
        ))

    attack = build_attack(config, split, aux_shards, seed)

    checkpoints = set(checkpoint_iterations(config.iterations))
    grids_dir = run_dir / "grids"
    wall_times: list[float] = []
    last = {"t": time.perf_counter(), "batch": None}

    def sink(iteration: int, batch, outputs: dict):
        now = time.perf_counter()
        wall_times.append(now - last["t"])
        last["t"] = now
        last["batch"] = batch
        if iteration + 1 in checkpoints and outputs.get("x_hat") is not None:
            grids_dir.mkdir(exist_ok=True)
            save_grid(
                grids_dir / f"iter{iteration + 1:06d}.png",
                batch[0], outputs["x_hat"],
            )

    writer = None
    if config.save_transcript:
        writer = TranscriptWriter(run_dir / "transcript.bin")
    try:
        trace = multi_client_schedule(
            clients, server, streams, config.iterations, attack,
            u_shaped=config.mode == "u", transcript_writer=writer, sink=sink,
        )
    finally:
        if writer is not None:
            writer.close()

    summary = summarize_trace(trace)
    if attack is not None and hasattr(attack, "finalize"):
        outputs = attack.finalize()
        if outputs and last["batch"] is not None:
            scored = score_attack_outputs(dict(outputs), last["batch"])
            summary["final_attack_mse"] = scored.get("attack_mse", math.nan)
            if attack.variant == "unsplit" and attack.result is not None:
                summary["unsplit_objectives"] = attack.result.objectives
                if outputs.get("x_hat") is not None:
                    grids_dir.mkdir(exist_ok=True)
                    save_grid(grids_dir / "final.png",
                              last["batch"][0], outputs["x_hat"])

    write_metrics(run_dir / "metrics.csv", _trace_to_records(trace))

    graphs = [split.f, split.g] + ([split.h] if split.h is not None else [])
    if attack is not None and hasattr(attack, "states"):
        state = attack.state_for(0)
        graphs += [state.models.simulator, state.models.decoder]
        if state.lambda1 > 0:
            graphs.append(state.models.d1)
        if state.lambda2 > 0:
            graphs.append(state.models.d2)
        if state.models.head_simulator is not None:
            graphs.append(state.models.head_simulator)
    cost = cost_report(wall_times, graphs, config.effective_batch_size)
    with open(run_dir / "timing.json", "w") as fh:
        json.dump({
            "wall_mean_s": cost.wall_mean,
            "wall_std_s": cost.wall_std,
            "flops_per_iteration": cost.flops_per_iteration,
        }, fh, indent=2)

    summary["seed"] = seed
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def run_experiment(config: ExperimentConfig, out_root) -> Path:
    """Run every seed of a config; returns the experiment directory."""
    config.validate()
    exp_dir = Path(out_root) / config.run_name()
    exp_dir.mkdir(parents=True, exist_ok=True)
    (exp_dir / "config.json").write_text(config.dumps())
    per_seed = []
    for seed in config.seeds:
        per_seed.append(run_single(config, seed, exp_dir / f"seed{seed}"))
    keys = ("final_attack_mse", "final_label_acc", "final_train_acc",
            "final_train_loss", "final_aux_mse")
    aggregate = {"seeds": list(config.seeds), "per_seed": per_seed}
    for key in keys:
        values = [s[key] for s in per_seed if not math.isnan(s.get(key, math.nan))]
        if values:
            aggregate[key] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "min": float(np.min(values)),
                "max": float(np.max(values)),
            }
    with open(exp_dir / "aggregate.json", "w") as fh:
        json.dump(aggregate, fh, indent=2)
    return exp_dir


# ---------------------------------------------------------------------------
# Reporting

def _iter_runs(results_root: Path):
    for config_path in sorted(results_root.rglob("config.json")):
        run_dir = config_path.parent
        try:
            config = ExperimentConfig.loads(config_path.read_text())
        except ConfigError:
            continue
        yield run_dir, config


def _seed_series(run_dir: Path, key: str) -> list[list[tuple[int, float]]]:
    from .metrics import read_metrics

    series = []
    for seed_dir in sorted(run_dir.glob("seed*")):
        path = seed_dir / "metrics.csv"
        if not path.exists():
            continue
        records = read_metrics(path)
        pts = [(r.iteration, getattr(r, key)) for r in records
               if not math.isnan(getattr(r, key))]
        if pts:
            series.append(pts)
    return series


def emit_report(results_root, out_dir=None) -> list[Path]:
    """Curves with min/max shading, image grids, and a comparison table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results_root = Path(results_root)
    out = Path(out_dir) if out_dir else results_root / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    runs = list(_iter_runs(results_root))
    if not runs:
        raise ConfigError(f"no completed runs under {results_root}")

    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted = False
    for run_dir, config in runs:
        series = _seed_series(run_dir, "attack_mse")
        if not series:
            continue
        n = min(len(s) for s in series)
        iters = [p[0] for p in series[0][:n]]
        stack = np.array([[p[1] for p in s[:n]] for s in series])
        label = f"{config.attack} ({config.mode} s={config.level})"
        ax.plot(iters, stack.mean(axis=0), label=label)
        ax.fill_between(iters, stack.min(axis=0), stack.max(axis=0), alpha=0.25)
        plotted = True
    if plotted:
        ax.set_xlabel("iteration")
        ax.set_ylabel("attack MSE")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
        fig.tight_layout()
        curve_path = out / "attack_mse_curves.png"
        fig.savefig(curve_path, dpi=120)
        written.append(curve_path)
    plt.close(fig)

    # comparison table: rows = attack, columns = split level
    cells: dict[tuple[str, str], dict[int, str]] = {}
    levels = set()
    for run_dir, config in runs:
        agg_path = run_dir / "aggregate.json"
        if not agg_path.exists():
            continue
        agg = json.loads(agg_path.read_text())
        stat = agg.get("final_attack_mse")
        if not stat:
            continue
        key = (config.attack, config.mode)
        cells.setdefault(key, {})[config.level] = (
            f"{stat['mean']:.4f} ({stat['std']:.4f})"
        )
        levels.add(config.level)
        best_seed = min(
            agg["per_seed"],
            key=lambda s: s.get("final_attack_mse", math.inf),
        )["seed"]
        grid_dir = run_dir / f"seed{best_seed}" / "grids"
        if grid_dir.exists():
            grids = sorted(grid_dir.glob("*.png"))
            if grids:
                dest = out / f"{config.run_name()}-best.png"
                dest.write_bytes(grids[-1].read_bytes())
                written.append(dest)

    if cells:
        level_list = sorted(levels)
        lines = ["| attack (mode) | " + " | ".join(f"level {l}" for l in level_list) + " |",
                 "|---" * (len(level_list) + 1) + "|"]
        for (attack, mode), by_level in sorted(cells.items()):
            row = [f"{attack} ({mode})"]
            row += [by_level.get(l, "-") for l in level_list]
            lines.append("| " + " | ".join(row) + " |")
        table_path = out / "comparison.md"
        table_path.write_text("\n".join(lines) + "\n")
        written.append(table_path)
    return written


# ---------------------------------------------------------------------------
# Offline replay over a persisted transcript

def replay_attack(transcript_path, config: ExperimentConfig, seed: int) -> TrainingTrace:
    """Re-run a passive attack offline from a persisted transcript.

    The server's own model evolution is reconstructed deterministically
    from the recorded messages (its updates depend only on what it
    received and its init stream), so any passive attack can be replayed
    without the client. Ground-truth features are not in the transcript;
    replayed metrics are attacker-side only.
    """
    import torch.nn.functional as F

    split = build_split(config)
    _, g_mod, _ = materialize_split(split, stream(seed, "sl:init"),
                                    stream(seed, "sl:drop:c0"))
    server = ServerState(g_mod, lr=config.lr)
    plan_kwargs = dict(
        cache_dir=None, private_cap=config.private_size,
        aux_cap=config.aux_size, synthetic_size=config.synthetic_size,
    )
    from .data import PartitionPlan

    plan = PartitionPlan(config.aux_ratio, config.removed_classes, seed)
    _, aux = load_and_partition(config.dataset, plan, **plan_kwargs)
    attack = build_attack(config, split, [aux], seed)
    if attack is None or getattr(attack, "passive", True) is False:
        raise ConfigError("replay supports passive attacks only")

    trace = TrainingTrace()
    grouped: dict[int, list[Message]] = {}
    for iteration, tag, arr in read_transcript(transcript_path):
        grouped.setdefault(iteration, []).append(
            Message(tag, torch.from_numpy(arr))
        )
    for iteration in sorted(grouped):
        transcript = Transcript(iteration, 0, grouped[iteration])
        server.g.train()
        z = transcript.smashed.detach().requires_grad_(True)
        if config.mode == "u":
            z_t = server.g(z)
            surrogate = (z_t * transcript.get(TAG_GRAD_T)).sum()
            server.optimizer.zero_grad(set_to_none=True)
            surrogate.backward()
            server.optimizer.step()
        else:
            out = server.g(z)
            task = config.defense.task_weight * F.cross_entropy(out, transcript.labels)
            server.optimizer.zero_grad(set_to_none=True)
            task.backward()
            server.optimizer.step()
        outputs = attack.observe(iteration, 0, transcript, server)
        record_attack = {k: v for k, v in outputs.items()
                         if not isinstance(v, torch.Tensor)}
        from .protocol import IterationRecord

        trace.records.append(IterationRecord(
            iteration, 0, math.nan, math.nan, record_attack
        ))
    return trace
