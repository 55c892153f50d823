"""Federated round orchestration: local training, aggregation, evaluation.

One round = every client trains locally, the server collects flattened
parameters, applies the configured aggregation rule, hands row i back to
client i, and the pooled val/test forecasts are scored in original units.

Reproducibility contract: every client draws from its own PRNG stream
seeded by (global seed, node id), and all clients start from one shared
initial model, so results do not depend on how clients are scheduled
across workers. Optimizer state never leaves its client; only parameters
are aggregated.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .data import TrafficDataset, WindowedSplit, chronological_split, make_windows
from .errors import ConfigError, TrainingDiverged
from .graph import ROW_NORMALIZED, SYM_NORMALIZED, SensorGraph, build_operator
from .metrics import MetricReport, evaluate, evaluate_per_horizon
from .model import AdamState, GruArch, GruSeq2Seq, init_params, predict, save_checkpoint, train_epochs

MODE_FEDERATED = "federated"
MODE_CENTRALIZED = "centralized"
MODE_LOCAL = "local"
MODES = (MODE_FEDERATED, MODE_CENTRALIZED, MODE_LOCAL)

EVAL_SPLITS = ("val", "test")


@dataclass(frozen=True)
class FedConfig:
    """Resolved simulation settings (everything that affects the outcome)."""

    arch: GruArch = GruArch()
    rounds: int = 5
    local_epochs: int = 3
    batch_size: int = 128
    lr: float = 1e-3
    aggregator: agg.AggregatorConfig = field(default_factory=agg.AggregatorConfig)
    seed: int = 0
    mode: str = MODE_FEDERATED
    worker_count: int = 1
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    stride: int = 1
    grad_clip: float | None = None
    precision: str = "float64"
    time_of_day: bool = False
    checkpoint_every: int = 0  # 0 = final round only (when a directory is given)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {self.worker_count}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "arch": {
                "input_dim": self.arch.input_dim,
                "hidden_dim": self.arch.hidden_dim,
                "num_layers": self.arch.num_layers,
                "horizon_in": self.arch.horizon_in,
                "horizon_out": self.arch.horizon_out,
            },
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "aggregator": {
                "kind": self.aggregator.kind,
                "hops": self.aggregator.hops,
                "alpha": self.aggregator.alpha,
            },
            "seed": self.seed,
            "mode": self.mode,
            "worker_count": self.worker_count,
            "splits": list(self.splits),
            "stride": self.stride,
            "grad_clip": self.grad_clip,
            "precision": self.precision,
            "time_of_day": self.time_of_day,
            "checkpoint_every": self.checkpoint_every,
        }


def config_hash(config: FedConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ClientState:
    node_id: int
    model: GruSeq2Seq
    opt: AdamState
    splits: dict[str, WindowedSplit]
    rng: np.random.Generator


@dataclass
class RoundReport:
    round: int
    metrics: dict[str, MetricReport]
    per_horizon_rmse: dict[str, list[float]]
    seconds: float
    aggregator: str
    config_hash: str

    def record(self, kind: str = "round") -> dict:
        rec = {
            "record": kind,
            "round": self.round,
            "config_hash": self.config_hash,
            "aggregator": self.aggregator,
            "seconds": round(self.seconds, 3),
        }
        for split, report in self.metrics.items():
            rec[split] = report.as_dict()
            rec[f"{split}_rmse_per_step"] = self.per_horizon_rmse[split]
        return rec


def build_splits(config: FedConfig, dataset: TrafficDataset) -> dict[str, WindowedSplit]:
    """Chronological split plus windowing, shared by every mode."""
    arch = config.arch
    ranges = chronological_split(dataset, config.splits, min_len=arch.horizon_in + arch.horizon_out)
    names = ("train", "val", "test")
    splits = {
        name: make_windows(
            dataset, rng, m=arch.horizon_in, horizon=arch.horizon_out,
            stride=config.stride, split_name=name, time_of_day=config.time_of_day,
        )
        for name, rng in zip(names, ranges)
    }
    got_dim = splits["train"].inputs.shape[2]
    if got_dim != arch.input_dim:
        raise ConfigError(
            f"windows carry {got_dim} feature(s) but arch.input_dim={arch.input_dim}; "
            f"set input_dim=2 when time_of_day is enabled"
        )
    return splits


def _init_clients(config: FedConfig, splits: dict[str, WindowedSplit], n_nodes: int) -> list[ClientState]:
    base = init_params(config.arch, config.seed, dtype=config.dtype)
    clients = []
    for node in range(n_nodes):
        clients.append(ClientState(
            node_id=node,
            model=base.copy(),
            opt=AdamState.init(base, lr=config.lr),
            splits={name: ws.for_node(node) for name, ws in splits.items()},
            rng=np.random.default_rng([config.seed, node]),
        ))
    return clients


def _train_one(client: ClientState, config: FedConfig) -> None:
    try:
        model, opt, _ = train_epochs(
            client.model, client.opt, client.splits["train"],
            epochs=config.local_epochs, batch_size=config.batch_size,
            seed=client.rng, grad_clip=config.grad_clip,
        )
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"client {client.node_id}: {exc}") from exc
    client.model = model
    client.opt = opt


def _train_task(node_id, model, opt, rng, split, config):
    """Worker-process body; local training is GIL-bound, so real parallelism
    needs processes. Each client's arithmetic is identical wherever it runs."""
    try:
        model, opt, _ = train_epochs(
            model, opt, split, epochs=config.local_epochs,
            batch_size=config.batch_size, seed=rng, grad_clip=config.grad_clip,
        )
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"client {node_id}: {exc}") from exc
    return node_id, model, opt, rng


def _train_all(clients: list[ClientState], config: FedConfig, pool) -> None:
    if pool is None:
        for client in clients:
            _train_one(client, config)
        return
    futures = [
        pool.submit(_train_task, c.node_id, c.model, c.opt, c.rng,
                    c.splits["train"], config)
        for c in clients
    ]
    by_id = {c.node_id: c for c in clients}
    for fut in futures:
        node_id, model, opt, rng = fut.result()
        client = by_id[node_id]
        client.model = model
        client.opt = opt
        client.rng = rng


def _make_pool(config: FedConfig):
    if config.worker_count == 1:
        return None
    # spawn avoids inheriting BLAS/threading state through fork
    ctx = multiprocessing.get_context("spawn")
    return ProcessPoolExecutor(max_workers=config.worker_count, mp_context=ctx)


def _pooled_eval(pairs, dataset: TrafficDataset, batch_size: int):
    """pairs = [(model, WindowedSplit), ...]; returns (MetricReport, rmse per step)."""
    preds = []
    targets = []
    masks = []
    for model, split in pairs:
        if split.n_sequences == 0:
            continue
        p = predict(model, split.inputs, batch_size=batch_size)
        preds.append(p[:, :, :1])
        targets.append(split.targets[:, :, :1])
        masks.append(split.target_mask[:, :, :1])
    preds = dataset.denormalize(np.concatenate(preds).astype(np.float64))
    targets = dataset.denormalize(np.concatenate(targets).astype(np.float64))
    masks = np.concatenate(masks)
    report = evaluate(preds, targets, masks)
    per_step = [r.rmse for r in evaluate_per_horizon(preds, targets, masks)]
    return report, per_step


def _evaluate_round(
    clients: list[ClientState] | None,
    model: GruSeq2Seq | None,
    splits: dict[str, WindowedSplit],
    dataset: TrafficDataset,
    config: FedConfig,
    round_idx: int,
    seconds: float,
    chash: str,
) -> RoundReport:
    metrics = {}
    horizon = {}
    for name in EVAL_SPLITS:
        if clients is not None:
            pairs = [(c.model, c.splits[name]) for c in clients]
        else:
            pairs = [(model, splits[name])]
        report, per_step = _pooled_eval(pairs, dataset, config.batch_size * 4)
        metrics[name] = report
        horizon[name] = per_step
    agg_name = config.aggregator.kind if config.mode == MODE_FEDERATED else "none"
    return RoundReport(round=round_idx, metrics=metrics, per_horizon_rmse=horizon,
                       seconds=seconds, aggregator=agg_name, config_hash=chash)


def _write_log(reports: list[RoundReport], log_path) -> None:
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.record("round"), sort_keys=True) + "\n")
        fh.write(json.dumps(reports[-1].record("final"), sort_keys=True) + "\n")


def _checkpoint_clients(clients: list[ClientState], directory, config: FedConfig, round_idx: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for client in clients:
        save_checkpoint(directory / f"client_{client.node_id:04d}.npz", client.model, client.opt)
    meta = {"mode": config.mode, "config_hash": config_hash(config),
            "round": round_idx, "n_clients": len(clients)}
    (directory / "run.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def run(
    config: FedConfig,
    graph: SensorGraph | None,
    dataset: TrafficDataset,
    log_path=None,
    checkpoint_dir=None,
    param_dump_dir=None,
) -> list[RoundReport]:
    """Federated or local-only simulation; returns one report per round.

    The last report is the headline (final-round) result; the JSON-lines
    log additionally repeats it as a final record. param_dump_dir, when
    set, writes the collected parameter matrix before and after every
    aggregation for debugging.
    """
    if config.mode == MODE_CENTRALIZED:
        raise ConfigError("use run_centralized for centralized mode")
    needs_graph = config.mode == MODE_FEDERATED and config.aggregator.kind != agg.FEDAVG
    if needs_graph and graph is None:
        raise ConfigError(f"aggregator {config.aggregator.kind!r} requires a graph")
    if graph is not None and graph.n_nodes != dataset.n_nodes:
        raise ConfigError(
            f"graph has {graph.n_nodes} nodes but dataset has {dataset.n_nodes}"
        )

    splits = build_splits(config, dataset)
    clients = _init_clients(config, splits, dataset.n_nodes)
    layout = agg.layout_for_arch(config.arch)
    row_op = build_operator(graph, ROW_NORMALIZED) if graph is not None else None
    sym_op = build_operator(graph, SYM_NORMALIZED) if graph is not None else None
    chash = config_hash(config)

    reports: list[RoundReport] = []
    pool = _make_pool(config)
    try:
        reports = _round_loop(config, clients, splits, dataset, layout, row_op, sym_op,
                              chash, pool, checkpoint_dir, param_dump_dir)
    finally:
        if pool is not None:
            pool.shutdown()
    if log_path is not None:
        _write_log(reports, log_path)
    return reports


def _round_loop(config, clients, splits, dataset, layout, row_op, sym_op, chash,
                pool, checkpoint_dir, param_dump_dir) -> list[RoundReport]:
    reports: list[RoundReport] = []
    for round_idx in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        _train_all(clients, config, pool)
        if config.mode == MODE_FEDERATED:
            matrix = agg.collect([c.model for c in clients], layout)
            aggregated = agg.apply_aggregator(config.aggregator, matrix, row_op, sym_op)
            if param_dump_dir is not None:
                dump_dir = Path(param_dump_dir)
                dump_dir.mkdir(parents=True, exist_ok=True)
                agg.dump_param_matrix(matrix, dump_dir / f"round_{round_idx:03d}_collected.csv")
                agg.dump_param_matrix(aggregated, dump_dir / f"round_{round_idx:03d}_aggregated.csv")
            new_models = agg.distribute(aggregated, [c.model for c in clients])
            for client, model in zip(clients, new_models):
                client.model = model
        seconds = time.perf_counter() - t0
        reports.append(_evaluate_round(clients, None, splits, dataset, config,
                                       round_idx, seconds, chash))
        if checkpoint_dir is not None and (
            (config.checkpoint_every and round_idx % config.checkpoint_every == 0)
            or round_idx == config.rounds
        ):
            _checkpoint_clients(clients, checkpoint_dir, config, round_idx)
    return reports


def run_centralized(
    config: FedConfig,
    dataset: TrafficDataset,
    log_path=None,
    checkpoint_dir=None,
) -> list[RoundReport]:
    """One model over the union of all nodes' windows, rounds * epochs total.

    Uses client stream 0 conventions, so with a single-node dataset it
    matches a local-only run bit for bit.
    """
    splits = build_splits(config, dataset)
    model = init_params(config.arch, config.seed, dtype=config.dtype)
    opt = AdamState.init(model, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0])
    chash = config_hash(config)

    reports: list[RoundReport] = []
    for round_idx in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        try:
            model, opt, _ = train_epochs(
                model, opt, splits["train"], epochs=config.local_epochs,
                batch_size=config.batch_size, seed=rng, grad_clip=config.grad_clip,
            )
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"centralized model: {exc}") from exc
        seconds = time.perf_counter() - t0
        reports.append(_evaluate_round(None, model, splits, dataset, config,
                                       round_idx, seconds, chash))
        if checkpoint_dir is not None and (
            (config.checkpoint_every and round_idx % config.checkpoint_every == 0)
            or round_idx == config.rounds
        ):
            directory = Path(checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(directory / "model.npz", model, opt)
            meta = {"mode": config.mode, "config_hash": chash,
                    "round": round_idx, "n_clients": 1}
            (directory / "run.json").write_text(json.dumps(meta, sort_keys=True) + "\n",
                                                encoding="utf-8")
    if log_path is not None:
        _write_log(reports, log_path)
    return reports


def evaluate_checkpoints(
    config: FedConfig,
    dataset: TrafficDataset,
    checkpoint_dir,
    split_name: str = "test",
) -> tuple[MetricReport, list[float]]:
    """Recompute pooled metrics for one split from saved models."""
    from .model import load_checkpoint  # local import keeps module load light

    if split_name not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {split_name!r}")
    directory = Path(checkpoint_dir)
    splits = build_splits(config, dataset)
    split = splits[split_name]
    if config.mode == MODE_CENTRALIZED:
        model, _ = load_checkpoint(directory / "model.npz")
        _check_arch(model, config)
        pairs = [(model, split)]
    else:
        pairs = []
        for node in range(dataset.n_nodes):
            model, _ = load_checkpoint(directory / f"client_{node:04d}.npz")
            _check_arch(model, config)
            pairs.append((model, split.for_node(node)))
    return _pooled_eval(pairs, dataset, config.batch_size * 4)


def _check_arch(model: GruSeq2Seq, config: FedConfig) -> None:
    from .errors import LayoutError

    if model.arch != config.arch:
        raise LayoutError(
            f"checkpoint arch {model.arch} does not match configured arch {config.arch}"
        )
