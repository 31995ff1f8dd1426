"""Finite-difference verification suite.

Checks every differentiable primitive and the full model with the total
loss against central differences. All inputs are seeded; the suite is the
backing for the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, grad_check
from .losses import LossWeights, batch_forward, total_loss
from .datakit import DrivingRecord
from .planner import Command, ModelConfig, init_model

TOLERANCE = 1e-4

MICRO_CONFIG = ModelConfig(image_h=12, image_w=16, image_ch=3, patch_h=4,
                           patch_w=4, channels=6, speed_dim=3, attn_dim=8,
                           heads=2, regions=2, branch_hidden1=8,
                           branch_hidden2=8)


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum_over(ad.mul(t, weights))


def make_records(config: ModelConfig, count: int, seed: int,
                 regions=None) -> list[DrivingRecord]:
    """Random labeled records shaped for ``config`` (verification inputs)."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        region = regions[i] if regions is not None else int(
            rng.integers(0, config.regions))
        records.append(DrivingRecord(
            id=f"check/{i:03d}",
            image=rng.uniform(0.0, 1.0, (config.image_h, config.image_w,
                                         config.image_ch)),
            speed=float(rng.uniform(0.0, 12.0)),
            command=Command(int(rng.integers(0, 3))),
            region_id=region,
            region_name=f"region{region}",
            waypoints=rng.normal(0.0, 5.0, (5, 2)),
            tags=[],
        ))
    return records


def run_gradient_suite(seed: int = 20240) -> dict[str, float]:
    """Max relative finite-difference error per check."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    a = Parameter("a", rng.standard_normal((4, 5)))
    b = Parameter("b", rng.standard_normal((5, 3)))
    w = rng.standard_normal((4, 3))
    results["matmul"] = grad_check(
        lambda: _weighted_sum(ad.matmul(a, b), w), [a, b])

    x = Parameter("x", rng.standard_normal((3, 6)))
    w = rng.standard_normal((3, 6))
    results["softmax"] = grad_check(
        lambda: _weighted_sum(ad.softmax(x, axis=-1), w), [x])
    results["logsumexp"] = grad_check(
        lambda: _weighted_sum(ad.logsumexp(x, axis=-1), w[:, 0]), [x])

    mask = rng.uniform(size=(3, 6)) > 0.4
    mask[0, :] = False   # one empty row must stay inert
    results["masked_logsumexp"] = grad_check(
        lambda: _weighted_sum(ad.masked_logsumexp(x, mask, axis=-1), w[:, 1]),
        [x])

    gain = Parameter("gain", rng.standard_normal(6))
    bias = Parameter("bias", rng.standard_normal(6))
    results["layer_norm"] = grad_check(
        lambda: _weighted_sum(ad.layer_norm(x, gain, bias), w), [x, gain, bias])

    img = Parameter("img", rng.standard_normal((5, 4, 2)))
    kern = Parameter("kern", rng.standard_normal((3, 3, 2, 3)))
    cbias = Parameter("cbias", rng.standard_normal(3))
    w = rng.standard_normal((5, 4, 3))
    results["conv2d_3x3"] = grad_check(
        lambda: _weighted_sum(ad.conv2d_3x3(img, kern, cbias), w),
        [img, kern, cbias])

    y = Parameter("y", rng.standard_normal((4, 3)))
    w = rng.standard_normal((4,))
    results["l2_norm"] = grad_check(
        lambda: _weighted_sum(ad.l2_norm(y), w), [y])

    table = Parameter("table", rng.standard_normal((4, 3)))
    idx = np.array([1, 3, 1])
    w = rng.standard_normal((3, 3))
    results["take_rows"] = grad_check(
        lambda: _weighted_sum(ad.take_rows(table, idx), w), [table])

    z = Parameter("z", rng.standard_normal((2, 5)))
    w = rng.standard_normal((2, 5))
    results["elementwise"] = grad_check(
        lambda: _weighted_sum(
            ad.relu(ad.add(ad.mul(z, z), ad.abs_value(z))) + ad.mean_over(z), w),
        [z])

    logits = Parameter("logits", rng.standard_normal(5))
    target = 2
    results["softmax_cross_entropy"] = grad_check(
        lambda: ad.add(ad.logsumexp(logits, axis=-1),
                       ad.neg(ad.getitem(logits, target))), [logits])

    model = init_model(MICRO_CONFIG, seed=seed + 1)
    records = make_records(MICRO_CONFIG, 2, seed + 2, regions=[0, 1])
    weights = LossWeights()
    results["full_model_total_loss"] = grad_check(
        lambda: total_loss(batch_forward(records, model), weights,
                           include_geo=True)[0],
        model.parameters())
    return results
