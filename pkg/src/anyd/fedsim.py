"""Synchronous federated training simulator.

One node per city. The region-embedding table never leaves a node: each
node keeps a single private row (its local table), trains it alongside the
shared parameters, and transmits only the shared set. Aggregation is FedAvg
(weighted parameter mean) or FedDyn (client linear-correction state plus a
proximal term, and a server correction of the mean).

Clients inside a round may run on separate threads; every batch seed is
derived from (seed, round, node, local step), so parallel and sequential
executions produce bit-identical aggregates.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, sgd_step
from .evalkit import ade, predict_waypoints
from .losses import batch_forward, total_loss
from .model_io import shared_to_bytes
from .planner import ModelParams, init_model
from .seeding import derive_seed
from .trainer import TrainConfig

ALGORITHMS = ("fedavg", "feddyn")
WEIGHTINGS = ("uniform", "by_sample_count")


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 1500
    local_iterations: int = 5
    algorithm: str = "fedavg"
    alpha_dyn: float = 0.01
    client_weighting: str = "by_sample_count"
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_iterations < 0:
            raise ValueError("rounds and local_iterations must be nonnegative")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.client_weighting not in WEIGHTINGS:
            raise ValueError(f"client_weighting must be one of {WEIGHTINGS}")
        if self.alpha_dyn < 0:
            raise ValueError("alpha_dyn must be nonnegative")

    @property
    def total_iterations(self) -> int:
        return self.rounds * self.local_iterations


@dataclass
class NodeState:
    node_id: int
    city: str
    region_id: int              # row in the global table this node owns
    records: list
    model: ModelParams          # local working model; table has one row
    h_state: dict[str, np.ndarray] | None = None

    @property
    def private_row(self) -> np.ndarray:
        return self.model.table.embedding.value[0]


@dataclass
class ServerState:
    """Shared parameters (never any embedding row), FedDyn correction
    state, and the round counter."""

    shared: dict[str, np.ndarray]
    h: dict[str, np.ndarray] | None = None
    round_idx: int = 0


def client_step_seed(seed: int, round_idx: int, node_id: int, local_t: int) -> int:
    """Per-round per-node seed with a substream per local iteration."""
    return derive_seed(derive_seed(seed, "fed-round", round_idx, node_id), local_t)


def make_nodes(records, init: ModelParams) -> list[NodeState]:
    """One node per region present in the records, each holding a local
    model whose table is reduced to that region's private row."""
    by_region: dict[int, list] = {}
    for r in records:
        by_region.setdefault(r.region_id, []).append(r)
    if not by_region:
        raise ValueError("no records to distribute")
    source = init.named_parameters()
    nodes = []
    for node_id, region in enumerate(sorted(by_region)):
        if region >= init.table.regions:
            raise ValueError(f"region id {region} outside the table")
        city = init.table.region_names[region]
        local_cfg = dataclasses.replace(init.config, regions=1)
        local = init_model(local_cfg, seed=0, region_names=[city])
        for name, p in local.named_parameters().items():
            if p is local.table.embedding:
                p.value[...] = init.table.embedding.value[region:region + 1]
            else:
                p.value[...] = source[name].value
            p.grad[...] = 0.0
        nodes.append(NodeState(node_id=node_id, city=city, region_id=region,
                               records=by_region[region], model=local))
    return nodes


def _zero_states(shared_names, reference: ModelParams) -> dict[str, np.ndarray]:
    named = reference.named_parameters()
    return {name: np.zeros_like(named[name].value) for name in shared_names}


def client_local_update(node: NodeState, server_shared: dict[str, np.ndarray],
                        cfg: FedConfig, train_cfg: TrainConfig,
                        round_idx: int) -> tuple[dict[str, np.ndarray], float]:
    """Run the node's local SGD iterations from the broadcast parameters.

    Returns the updated shared parameters (never the private row) and the
    mean local loss. The region-contrastive term is off in federation.
    FedDyn adds -h_k + alpha*(theta - theta_server) to the shared gradients
    and updates h_k afterwards.
    """
    if not node.records:
        raise ValueError(f"node {node.node_id}: empty local dataset")
    named = node.model.named_parameters()
    for name, value in server_shared.items():
        named[name].value[...] = value
        named[name].grad[...] = 0.0
    feddyn = cfg.algorithm == "feddyn"
    shared_params = [named[name] for name in server_shared]
    if feddyn:
        theta_server = {name: value.copy()
                        for name, value in server_shared.items()}
        if node.h_state is None:
            node.h_state = {name: np.zeros_like(value)
                            for name, value in server_shared.items()}
    trainable = node.model.parameters()
    losses = []
    for t in range(cfg.local_iterations):
        step = round_idx * cfg.local_iterations + t
        rng = np.random.default_rng(
            client_step_seed(cfg.seed, round_idx, node.node_id, t))
        idx = rng.integers(0, len(node.records), size=train_cfg.batch_size)
        chosen = [node.records[j] for j in idx]
        batch = batch_forward(chosen, node.model,
                              lookup_idx=np.zeros(len(chosen), dtype=np.int64))
        loss, parts = total_loss(batch, train_cfg.loss_weights,
                                 include_geo=False)
        if not np.isfinite(loss.value):
            raise NumericError(
                f"node {node.node_id} round {round_idx}: loss is not finite")
        loss.backward()
        if feddyn:
            for p in shared_params:
                p.grad += -node.h_state[p.name] \
                    + cfg.alpha_dyn * (p.value - theta_server[p.name])
        sgd_step(trainable, train_cfg.sgd, step)
        losses.append(parts["total"])
    if feddyn:
        for p in shared_params:
            node.h_state[p.name] = node.h_state[p.name] \
                - cfg.alpha_dyn * (p.value - theta_server[p.name])
    updated = {name: named[name].value.copy() for name in server_shared}
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return updated, mean_loss


def fedavg_aggregate(client_params: list[dict[str, np.ndarray]],
                     weights) -> dict[str, np.ndarray]:
    """Coordinatewise weighted mean; weights must sum to 1."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(client_params):
        raise ValueError("one weight per client required")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("client weights must sum to 1")
    names = list(client_params[0])
    out = {}
    for name in names:
        shape = client_params[0][name].shape
        for params in client_params[1:]:
            if params[name].shape != shape:
                raise ValueError(f"client shape mismatch for {name!r}")
        acc = np.zeros(shape)
        for w, params in zip(weights, client_params):
            acc += w * params[name]
        out[name] = acc
    return out


def feddyn_server_update(client_params: list[dict[str, np.ndarray]],
                         theta_prev: dict[str, np.ndarray],
                         h_prev: dict[str, np.ndarray],
                         cfg: FedConfig
                         ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """h <- h - alpha * mean(theta_k - theta_prev);
    theta <- mean(theta_k) - h / alpha. Assumes full participation."""
    if cfg.alpha_dyn <= 0:
        raise ValueError("alpha_dyn must be > 0 for the FedDyn server update")
    k = len(client_params)
    theta = {}
    h = {}
    for name in theta_prev:
        mean = np.zeros_like(theta_prev[name])
        for params in client_params:
            mean += params[name]
        mean /= k
        h[name] = h_prev[name] - cfg.alpha_dyn * (mean - theta_prev[name])
        theta[name] = mean - h[name] / cfg.alpha_dyn
    return theta, h


def run_federated(nodes: list[NodeState], cfg: FedConfig,
                  train_cfg: TrainConfig, init: ModelParams,
                  validation=None, threads: int = 1,
                  message_log: list[bytes] | None = None
                  ) -> tuple[ModelParams, list[tuple]]:
    """Rounds of broadcast -> parallel client updates -> aggregate.

    Returns the merged final model (server parameters plus each node's
    private row written back into the full table; the merge is the
    simulator's privileged view, not a transmitted message) and one trace
    row per round: (round, per-node losses, balanced validation ADE).
    """
    if not nodes:
        raise ValueError("at least one node is required")
    shared_names = [p.name for p in init.shared_parameters()]
    named_init = init.named_parameters()
    state = ServerState(
        shared={name: named_init[name].value.copy() for name in shared_names},
        h=_zero_states(shared_names, init)
        if cfg.algorithm == "feddyn" else None)
    if cfg.client_weighting == "by_sample_count":
        counts = np.array([len(n.records) for n in nodes], dtype=np.float64)
        weights = counts / counts.sum()
    else:
        weights = np.full(len(nodes), 1.0 / len(nodes))

    val_by_region: dict[int, list] = {}
    if validation is not None:
        for r in validation:
            # node-local models hold a single-row table; remap the lookup
            val_by_region.setdefault(r.region_id, []).append(
                dataclasses.replace(r, region_id=0))

    trace = []
    for round_idx in range(cfg.rounds):
        state.round_idx = round_idx
        if message_log is not None:
            message_log.append(shared_to_bytes(state.shared, init.config))

        def run_client(node: NodeState):
            try:
                return client_local_update(node, state.shared, cfg, train_cfg,
                                           round_idx)
            except NumericError as exc:
                raise NumericError(
                    f"round {round_idx} node {node.node_id}: {exc}") from exc

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_client, nodes))
        else:
            results = [run_client(node) for node in nodes]
        client_params = [r[0] for r in results]
        losses = tuple(r[1] for r in results)
        if message_log is not None:
            for params in client_params:
                message_log.append(shared_to_bytes(params, init.config))
        if cfg.algorithm == "feddyn":
            state.shared, state.h = feddyn_server_update(
                client_params, state.shared, state.h, cfg)
        else:
            state.shared = fedavg_aggregate(client_params, weights)

        val_ade = None
        if val_by_region:
            per_node = []
            for node in nodes:
                records = val_by_region.get(node.region_id)
                if not records:
                    continue
                named = node.model.named_parameters()
                for name in shared_names:
                    named[name].value[...] = state.shared[name]
                preds = predict_waypoints(records, node.model)
                per_node.append(float(np.mean(
                    [ade(p, r.waypoints) for p, r in zip(preds, records)])))
            if per_node:
                val_ade = float(np.mean(per_node))
        trace.append((round_idx, losses, val_ade))

    merged = init.copy()
    named = merged.named_parameters()
    for name in shared_names:
        named[name].value[...] = state.shared[name]
    for node in nodes:
        merged.table.embedding.value[node.region_id] = node.private_row
    return merged, trace


def write_round_trace(trace, nodes, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round"] + [f"loss_{n.city}" for n in nodes]
                        + ["val_balanced_ade"])
        for round_idx, losses, val in trace:
            row = [round_idx] + [repr(float(v)) for v in losses]
            row.append("" if val is None else repr(float(val)))
            writer.writerow(row)


def write_message_log(frames: list[bytes], path) -> None:
    """Length-prefixed binary frames, one per inter-node message."""
    import struct

    with open(path, "wb") as fh:
        for frame in frames:
            fh.write(struct.pack("<Q", len(frame)))
            fh.write(frame)


def read_message_log(path) -> list[bytes]:
    import struct
    from pathlib import Path

    blob = Path(path).read_bytes()
    frames = []
    pos = 0
    while pos < len(blob):
        (length,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        frames.append(blob[pos:pos + length])
        pos += length
    return frames
