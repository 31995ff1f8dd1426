"""Centralized training loop and the semi-supervised pipeline.

Batches are sampled uniformly with replacement from the pooled dataset;
class and region imbalance is left to the contrastive terms. Every batch
draw descends from a per-step derived seed so schedules can be replayed
(the federated simulator relies on this for its equivalence reduction).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, replace
import numpy as np

from .autodiff import NumericError, SgdConfig, sgd_step
from .evalkit import predict_waypoints
from .losses import LossWeights, batch_forward, total_loss
from .planner import ModelParams, NUM_WAYPOINTS
from .seeding import derive_seed

TRACE_HEADER = ("iteration", "lr", "L", "L_BC", "L_cmd", "L_geo")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 48
    iterations: int = 7500
    lr0: float = 0.1
    decay: float = 0.997
    weight_decay: float = 1e-3
    loss_weights: LossWeights = LossWeights()
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be positive, iterations >= 0")
        if self.lr0 <= 0 or not (0 < self.decay <= 1) or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(learning_rate=self.lr0, decay_per_step=self.decay,
                         weight_decay=self.weight_decay)


@dataclass(frozen=True)
class SslConfig:
    ensemble_size: int = 3
    variance_threshold: float | None = None   # None = 80th percentile rule
    ssl_lr0: float = 1e-3
    ssl_iterations: int = 500

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        if self.ssl_lr0 <= 0 or self.ssl_iterations < 0:
            raise ValueError("invalid SSL settings")


@dataclass
class PseudoLabel:
    record_id: str
    waypoints: np.ndarray     # ensemble-mean prediction, [5, 2]
    confidence: float         # mean across-coordinate ensemble variance

    def __post_init__(self):
        if self.confidence < 0:
            raise ValueError("confidence must be nonnegative")


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    return cfg.lr0 * cfg.decay ** step


def train_centralized(records, cfg: TrainConfig, init: ModelParams,
                      include_geo: bool = True, step_seed_fn=None
                      ) -> tuple[ModelParams, list[tuple]]:
    """Iterations of sample -> forward -> total loss -> SGD.

    Returns the trained copy of ``init`` plus one trace row per iteration:
    (iteration, lr, total, bc, cmd, geo).
    """
    records = list(records)
    if not records:
        raise ValueError("training data must be nonempty")
    if step_seed_fn is None:
        step_seed_fn = lambda i: derive_seed(cfg.seed, "step", i)  # noqa: E731
    model = init.copy()
    params = model.parameters()
    trace = []
    for i in range(cfg.iterations):
        rng = np.random.default_rng(step_seed_fn(i))
        idx = rng.integers(0, len(records), size=cfg.batch_size)
        batch = batch_forward([records[j] for j in idx], model)
        loss, parts = total_loss(batch, cfg.loss_weights, include_geo)
        if not np.isfinite(loss.value):
            raise NumericError(f"iteration {i}: loss is not finite")
        loss.backward()
        sgd_step(params, cfg.sgd, i)
        trace.append((i, lr_at(i, cfg), parts["total"], parts["bc"],
                      parts["cmd"], parts["geo"]))
    return model, trace


def write_loss_trace(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def pseudo_label(models, unlabeled, ssl: SslConfig,
                 batch_size: int = 64) -> list[PseudoLabel]:
    """Ensemble-label unlabeled records and drop low-confidence ones.

    Confidence is the mean over the ten waypoint coordinates of the
    across-model variance; records whose confidence exceeds the threshold
    are dropped. With no explicit threshold, the 80th percentile of the
    computed confidences is used.
    """
    models = list(models)
    if len(models) < 2:
        raise ValueError("pseudo-labeling needs at least two models")
    unlabeled = list(unlabeled)
    if not unlabeled:
        return []
    stacked = np.stack([predict_waypoints(unlabeled, m, batch_size=batch_size)
                        for m in models])            # [m, n, 5, 2]
    means = stacked.mean(axis=0)
    # anchor on the first model so an ensemble in exact agreement scores an
    # exact zero (variance is shift invariant)
    variances = (stacked - stacked[0]).var(axis=0)   # population variance
    confidences = variances.reshape(len(unlabeled), -1).mean(axis=1)
    threshold = ssl.variance_threshold
    if threshold is None:
        threshold = float(np.percentile(confidences, 80.0))
    labels = []
    for record, mean, conf in zip(unlabeled, means, confidences):
        if conf > threshold:
            continue
        labels.append(PseudoLabel(record_id=record.id,
                                  waypoints=mean.reshape(NUM_WAYPOINTS, 2),
                                  confidence=float(conf)))
    return labels


def train_ssl(labeled, unlabeled, pseudo, cfg: TrainConfig, ssl: SslConfig,
              init: ModelParams) -> ModelParams:
    """Fine-tune on labeled data plus pseudo-labeled records (their labels
    treated as ground truth) at the SSL learning rate."""
    by_id = {r.id: r for r in unlabeled}
    pseudo_records = []
    for label in pseudo:
        base = by_id.get(label.record_id)
        if base is None:
            raise ValueError(f"pseudo-label for unknown record "
                             f"{label.record_id!r}")
        pseudo_records.append(dataclasses.replace(
            base, waypoints=np.array(label.waypoints, dtype=np.float64)))
    combined = list(labeled) + pseudo_records
    tuned = replace(cfg, lr0=ssl.ssl_lr0, iterations=ssl.ssl_iterations)
    model, _ = train_centralized(combined, tuned, init)
    return model
