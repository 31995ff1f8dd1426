"""Command-branched waypoint planner and full-model assembly.

The geo-adapted feature grid is fused with a broadcast speed embedding
through a 3x3 convolution, flattened, and pushed through three
fully-connected layers per navigation command. Every branch regresses five
(x, y) waypoints in meters in the ego frame (x lateral-right, y forward),
with no output activation. All branches are always evaluated; the command
selects one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, EncoderParams, embed_speed, encode_image, \
    init_encoder_params
from .geoattn import GeoAttnParams, GeoEmbeddingTable, geo_forward, \
    init_embedding_table, init_geoattn_params

NUM_WAYPOINTS = 5
WAYPOINT_VALUES = NUM_WAYPOINTS * 2


class Command(enum.IntEnum):
    LEFT = 0
    FORWARD = 1
    RIGHT = 2

    @classmethod
    def from_name(cls, name: str) -> "Command":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown command {name!r}") from None

    def to_name(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of the full model."""

    image_h: int = 36
    image_w: int = 64
    image_ch: int = 3
    patch_h: int = 8
    patch_w: int = 8
    channels: int = 32
    speed_dim: int = 16
    attn_dim: int = 126
    heads: int = 3
    regions: int = 2
    branch_hidden1: int = 64
    branch_hidden2: int = 64

    def __post_init__(self):
        if self.attn_dim % self.heads != 0:
            raise ValueError(
                f"attn_dim {self.attn_dim} must be divisible by heads {self.heads}")
        if self.regions < 1:
            raise ValueError("regions must be >= 1")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(image_h=self.image_h, image_w=self.image_w,
                             image_ch=self.image_ch, patch_h=self.patch_h,
                             patch_w=self.patch_w, channels=self.channels,
                             speed_dim=self.speed_dim)

    @property
    def fused_channels(self) -> int:
        # the fusion conv maps C + speed_dim back to C
        return self.channels

    @property
    def flat_dim(self) -> int:
        enc = self.encoder
        return enc.grid_h * enc.grid_w * self.fused_channels

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "image_h", "image_w", "image_ch", "patch_h", "patch_w", "channels",
            "speed_dim", "attn_dim", "heads", "regions",
            "branch_hidden1", "branch_hidden2")}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class BranchParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    w3: Parameter
    b3: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class PlannerParams:
    fusion_kernel: Parameter  # [3, 3, C + speed_dim, C]
    fusion_bias: Parameter    # [C]
    branches: list[BranchParams]  # one per Command

    def parameters(self) -> list[Parameter]:
        out = [self.fusion_kernel, self.fusion_bias]
        for branch in self.branches:
            out.extend(branch.parameters())
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    geo: GeoAttnParams
    table: GeoEmbeddingTable
    planner: PlannerParams

    def parameters(self) -> list[Parameter]:
        return (self.encoder.parameters() + self.geo.parameters()
                + self.planner.parameters() + [self.table.embedding])

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def shared_parameters(self) -> list[Parameter]:
        """Everything except the region-embedding table."""
        return [p for p in self.parameters() if p is not self.table.embedding]

    def copy(self) -> "ModelParams":
        clone = init_model(self.config, seed=0,
                           region_names=list(self.table.region_names))
        source = self.named_parameters()
        for name, p in clone.named_parameters().items():
            p.value[...] = source[name].value
            p.grad[...] = source[name].grad
        clone.table.private_in_federation = self.table.private_in_federation
        return clone


def init_model(config: ModelConfig, seed: int,
               region_names: list[str] | None = None) -> ModelParams:
    """Deterministic model initialization from a single seed."""
    rng = np.random.default_rng(seed)
    enc = init_encoder_params(config.encoder, rng)
    geo = init_geoattn_params(config.channels, config.attn_dim, config.heads, rng)
    if region_names is None:
        region_names = [f"region{i}" for i in range(config.regions)]
    if len(region_names) != config.regions:
        raise ValueError("region_names must match config.regions")
    table = init_embedding_table(config.channels, region_names, rng)
    cin = config.channels + config.speed_dim
    # He gain on every ReLU-fed layer keeps hidden activations near unit
    # scale; with raw-meter targets and plain SGD, starved activations force
    # runaway late-layer weights
    kernel = np.sqrt(2.0) * rng.standard_normal(
        (3, 3, cin, config.fused_channels)) / np.sqrt(9 * cin)
    branches = []
    sizes = [(config.flat_dim, config.branch_hidden1),
             (config.branch_hidden1, config.branch_hidden2),
             (config.branch_hidden2, WAYPOINT_VALUES)]
    gains = (2.5, 2.5, 1.0)
    for cmd in Command:
        tag = f"planner.branch_{cmd.to_name()}"
        ws = [gain * rng.standard_normal(s) / np.sqrt(s[0])
              for gain, s in zip(gains, sizes)]
        branches.append(BranchParams(
            w1=Parameter(f"{tag}.w1", ws[0]),
            b1=Parameter(f"{tag}.b1", np.zeros(sizes[0][1])),
            w2=Parameter(f"{tag}.w2", ws[1]),
            b2=Parameter(f"{tag}.b2", np.zeros(sizes[1][1])),
            w3=Parameter(f"{tag}.w3", ws[2]),
            b3=Parameter(f"{tag}.b3", np.zeros(WAYPOINT_VALUES)),
        ))
    planner = PlannerParams(
        fusion_kernel=Parameter("planner.fusion_kernel", kernel),
        fusion_bias=Parameter("planner.fusion_bias",
                              np.zeros(config.fused_channels)),
        branches=branches,
    )
    return ModelParams(config=config, encoder=enc, geo=geo, table=table,
                       planner=planner)


def fuse(adapted, speed_feature, params: PlannerParams) -> Tensor:
    """Broadcast the speed feature across the grid, concat on channels,
    then 3x3 conv + ReLU."""
    f = adapted if isinstance(adapted, Tensor) else Tensor(adapted)
    s = speed_feature if isinstance(speed_feature, Tensor) else Tensor(speed_feature)
    single = f.ndim == 3
    if single:
        f = ad.reshape(f, (1,) + f.shape)
        s = ad.reshape(s, (1,) + s.shape)
    b, gh, gw, _ = f.shape
    sd = s.shape[-1]
    tiled = ad.broadcast_to(ad.reshape(s, (b, 1, 1, sd)), (b, gh, gw, sd))
    stacked = ad.concat([f, tiled], axis=-1)
    out = ad.relu(ad.conv2d_3x3(stacked, params.fusion_kernel,
                                params.fusion_bias))
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


def _run_branch(flat: Tensor, branch: BranchParams) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(flat, branch.w1), branch.b1))
    h = ad.relu(ad.add(ad.matmul(h, branch.w2), branch.b2))
    return ad.add(ad.matmul(h, branch.w3), branch.b3)


def forward_batch(images: np.ndarray, speeds: np.ndarray,
                  region_idx: np.ndarray, model: ModelParams
                  ) -> tuple[Tensor, Tensor]:
    """All-branch forward for a batch.

    Returns (predictions [b, 3, 5, 2], head_weights [b, H]) on the tape.
    """
    cfg = model.config
    b = images.shape[0]
    grid = encode_image(images, cfg.encoder, model.encoder)
    geo_out = geo_forward(grid, np.asarray(region_idx, dtype=np.int64),
                          model.table, model.geo)
    speed_feat = embed_speed(np.asarray(speeds, dtype=np.float64),
                             cfg.encoder, model.encoder)
    fused = fuse(geo_out.adapted, speed_feat, model.planner)
    flat = ad.reshape(fused, (b, cfg.flat_dim))
    outs = [ad.reshape(_run_branch(flat, branch), (b, 1, NUM_WAYPOINTS, 2))
            for branch in model.planner.branches]
    preds = ad.concat(outs, axis=1)
    return preds, geo_out.head_weights


def forward_all_branches(image: np.ndarray, speed: float, g: np.ndarray,
                         model: ModelParams
                         ) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    """Single-observation forward.

    ``g`` is a one-hot region vector. Returns three [5, 2] waypoint arrays
    (one per command, in Command order) and the head-weight vector.
    """
    vec = np.asarray(g, dtype=np.float64)
    ones = np.flatnonzero(vec == 1.0)
    if vec.ndim != 1 or len(ones) != 1 or not np.all((vec == 0.0) | (vec == 1.0)):
        raise ValueError("region indicator must be exactly one-hot")
    preds, head_weights = forward_batch(
        np.asarray(image, dtype=np.float64)[None, ...],
        np.array([speed], dtype=np.float64),
        np.array([ones[0]], dtype=np.int64), model)
    branch_values = tuple(preds.value[0, i].copy() for i in range(len(Command)))
    return branch_values, head_weights.value[0].copy()


def select_command(all_branches, command: Command):
    """Return branch ``command``'s prediction unchanged."""
    idx = int(command)
    if idx < 0 or idx >= len(all_branches):
        raise ValueError(f"invalid command index {idx}")
    return all_branches[idx]
