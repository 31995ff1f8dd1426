"""Behavior-cloning and contrastive objectives.

Three terms:
  - behavior cloning: mean absolute error between the ground-truth-command
    branch and the label, other branches untouched;
  - command contrast: per sample, softmax over negative L2 distances from
    every branch's prediction to the label, scored on the true branch; the
    negatives are the same sample's other branches, never other samples;
  - region contrast: per anchor, log-ratio of summed positive similarities
    (same city) over all similarities, on the head-weight vectors. Anchors
    with no same-city partner in the batch are skipped and excluded from
    the normalization.

Similarity is negative Euclidean distance with temperature tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .planner import Command, ModelParams, WAYPOINT_VALUES, forward_batch


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1e-3
    lambda_g: float = 1e-4
    tau: float = 1.0
    # reserved weight kept for config compatibility; multiplies nothing
    lambda_d: float = 1e-4

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BatchOutputs:
    """Everything the loss terms need about one forward batch."""

    predictions: Tensor      # [b, 3, 5, 2], all branches
    head_weights: Tensor     # [b, H]
    targets: np.ndarray      # [b, 5, 2]
    commands: np.ndarray     # [b] ints
    regions: np.ndarray      # [b] ints

    def __post_init__(self):
        if len(self.commands) == 0:
            raise ValueError("batch must be nonempty")

    @property
    def batch_size(self) -> int:
        return len(self.commands)


def batch_forward(records, model: ModelParams,
                  lookup_idx: np.ndarray | None = None) -> BatchOutputs:
    """Run the model on labeled records and collect loss inputs.

    ``lookup_idx`` overrides the embedding-table row per record (used by
    federated nodes, whose local table holds a single private row)."""
    images = np.stack([r.image for r in records]).astype(np.float64)
    speeds = np.array([r.speed for r in records], dtype=np.float64)
    regions = np.array([r.region_id for r in records], dtype=np.int64)
    commands = np.array([int(r.command) for r in records], dtype=np.int64)
    targets = np.stack([r.waypoints for r in records]).astype(np.float64)
    rows = regions if lookup_idx is None else np.asarray(lookup_idx, np.int64)
    preds, head_weights = forward_batch(images, speeds, rows, model)
    return BatchOutputs(predictions=preds, head_weights=head_weights,
                        targets=targets, commands=commands, regions=regions)


def _command_onehot(batch: BatchOutputs) -> np.ndarray:
    b = batch.batch_size
    onehot = np.zeros((b, len(Command)))
    onehot[np.arange(b), batch.commands] = 1.0
    return onehot


def _flat_predictions(batch: BatchOutputs) -> Tensor:
    return ad.reshape(batch.predictions,
                      (batch.batch_size, len(Command), WAYPOINT_VALUES))


def bc_loss(batch: BatchOutputs) -> Tensor:
    """Mean absolute error on the true-command branch, averaged over the
    batch and the 10 waypoint values."""
    preds = _flat_predictions(batch)
    onehot = _command_onehot(batch)[:, :, None]
    selected = ad.sum_over(ad.mul(preds, onehot), axis=1)
    flat_targets = batch.targets.reshape(batch.batch_size, WAYPOINT_VALUES)
    return ad.mean_over(ad.abs_value(ad.add(selected, -flat_targets)))


def _branch_logits(batch: BatchOutputs, weights: LossWeights) -> Tensor:
    # negative L2 distance from each branch to the label, over temperature
    preds = _flat_predictions(batch)
    flat_targets = batch.targets.reshape(batch.batch_size, 1, WAYPOINT_VALUES)
    dist = ad.l2_norm(ad.add(preds, -flat_targets))
    return ad.mul(dist, -1.0 / weights.tau)


def cmd_contrastive_loss(batch: BatchOutputs, weights: LossWeights) -> Tensor:
    logits = _branch_logits(batch, weights)
    lse = ad.logsumexp(logits, axis=-1)
    picked = ad.sum_over(ad.mul(logits, _command_onehot(batch)), axis=-1)
    return ad.mean_over(ad.add(lse, ad.neg(picked)))


def geo_contrastive_loss(batch: BatchOutputs, weights: LossWeights) -> Tensor:
    b = batch.batch_size
    if b < 2:
        return Tensor(0.0)
    alpha = batch.head_weights
    heads = alpha.shape[-1]
    left = ad.reshape(alpha, (b, 1, heads))
    right = ad.reshape(alpha, (1, b, heads))
    dist = ad.l2_norm(ad.add(left, ad.neg(right)))
    logits = ad.mul(dist, -1.0 / weights.tau)

    same_city = batch.regions[:, None] == batch.regions[None, :]
    not_self = ~np.eye(b, dtype=bool)
    pos_mask = same_city & not_self
    all_mask = not_self
    pos_counts = pos_mask.sum(axis=1)
    active = pos_counts > 0
    effective = int(active.sum())
    if effective == 0:
        return Tensor(0.0)
    lse_all = ad.masked_logsumexp(logits, all_mask, axis=-1)
    lse_pos = ad.masked_logsumexp(logits, pos_mask, axis=-1)
    anchor_w = np.where(active, 1.0 / np.maximum(pos_counts, 1), 0.0)
    per_anchor = ad.mul(ad.add(lse_all, ad.neg(lse_pos)), anchor_w)
    return ad.mul(ad.sum_over(per_anchor), 1.0 / effective)


def total_loss(batch: BatchOutputs, weights: LossWeights,
               include_geo: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms; the region term is dropped in
    federated mode. Returns the scalar plus a float breakdown."""
    bc = bc_loss(batch)
    cmd = cmd_contrastive_loss(batch, weights)
    total = ad.add(bc, ad.mul(cmd, weights.lambda_c))
    if include_geo:
        geo = geo_contrastive_loss(batch, weights)
        total = ad.add(total, ad.mul(geo, weights.lambda_g))
        geo_value = geo.item()
    else:
        geo_value = 0.0
    parts = {"bc": bc.item(), "cmd": cmd.item(), "geo": geo_value,
             "total": total.item()}
    return total, parts
