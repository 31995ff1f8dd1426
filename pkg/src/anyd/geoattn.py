"""Region-conditional multi-head channel attention.

The module looks up a per-region embedding row, turns the pooled feature
channels and the embedding into two token sequences (each prefixed by a
shared region token), runs multi-head cross attention from the region
sequence into the image sequence, reduces every head to one scalar per
token, and finally re-weights the feature channels with a head-weight
mixture. The post-attention value of the region token position supplies the
per-head mixture weights, which downstream losses also consume.

Layout decisions baked in here:
  - each of the C channel scalars becomes a width-d token through a shared
    1->d linear map plus a learned per-channel position row;
  - spatial pooling of the feature grid is a mean;
  - the region token parameter is shared by both sequences, while the
    pre-attention layer norms are not;
  - attention logits are scaled by sqrt(d), not sqrt(d/heads);
  - head weights are used raw, with no normalization across heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


@dataclass
class GeoEmbeddingTable:
    """Trainable [regions x channels] embedding matrix with region names."""

    embedding: Parameter
    region_names: list[str]
    private_in_federation: bool = True

    def __post_init__(self):
        if self.embedding.ndim != 2 or self.embedding.shape[0] < 1:
            raise ShapeError("embedding table must be [regions, channels]")
        if len(self.region_names) != self.embedding.shape[0]:
            raise ValueError("one region name per table row required")

    @property
    def regions(self) -> int:
        return self.embedding.shape[0]

    @property
    def channels(self) -> int:
        return self.embedding.shape[1]


@dataclass
class GeoAttnParams:
    region_token: Parameter   # [d]
    lift_img_w: Parameter     # [1, d]
    lift_img_b: Parameter     # [d]
    pos_img: Parameter        # [C, d]
    lift_reg_w: Parameter     # [1, d]
    lift_reg_b: Parameter     # [d]
    pos_reg: Parameter        # [C, d]
    w_q: Parameter            # [d, d]
    w_k: Parameter            # [d, d]
    w_v: Parameter            # [d, d]
    ln1_img_gain: Parameter   # [d]
    ln1_img_bias: Parameter   # [d]
    ln1_reg_gain: Parameter   # [d]
    ln1_reg_bias: Parameter   # [d]
    ln2_gain: Parameter       # [d]
    ln2_bias: Parameter       # [d]
    head_w1: Parameter        # [H, d/H, m]
    head_b1: Parameter        # [H, m]
    head_w2: Parameter        # [H, m, 1]
    head_b2: Parameter        # [H, 1]

    @property
    def dim(self) -> int:
        return self.region_token.shape[0]

    @property
    def heads(self) -> int:
        return self.head_w1.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def parameters(self) -> list[Parameter]:
        return [self.region_token, self.lift_img_w, self.lift_img_b, self.pos_img,
                self.lift_reg_w, self.lift_reg_b, self.pos_reg,
                self.w_q, self.w_k, self.w_v,
                self.ln1_img_gain, self.ln1_img_bias,
                self.ln1_reg_gain, self.ln1_reg_bias,
                self.ln2_gain, self.ln2_bias,
                self.head_w1, self.head_b1, self.head_w2, self.head_b2]


@dataclass
class GeoModuleOutput:
    adapted: Tensor         # F_g, same shape as the incoming feature grid
    head_weights: Tensor    # [H] or [b, H], unnormalized
    channel_weights: Tensor  # [H, C] or [b, H, C]


def init_geoattn_params(channels: int, dim: int, heads: int,
                        rng: np.random.Generator, mlp_hidden: int | None = None,
                        prefix: str = "geo") -> GeoAttnParams:
    if dim % heads != 0:
        raise ValueError(f"attention dim {dim} must be divisible by heads {heads}")
    head_dim = dim // heads
    hidden = dim if mlp_hidden is None else mlp_hidden

    def w(name, shape, fan_in):
        return Parameter(f"{prefix}.{name}",
                         rng.standard_normal(shape) / math.sqrt(fan_in))

    return GeoAttnParams(
        region_token=Parameter(f"{prefix}.region_token",
                               0.02 * rng.standard_normal(dim)),
        lift_img_w=w("lift_img_w", (1, dim), 1),
        lift_img_b=Parameter(f"{prefix}.lift_img_b", np.zeros(dim)),
        pos_img=Parameter(f"{prefix}.pos_img",
                          0.02 * rng.standard_normal((channels, dim))),
        lift_reg_w=w("lift_reg_w", (1, dim), 1),
        lift_reg_b=Parameter(f"{prefix}.lift_reg_b", np.zeros(dim)),
        pos_reg=Parameter(f"{prefix}.pos_reg",
                          0.02 * rng.standard_normal((channels, dim))),
        w_q=w("w_q", (dim, dim), dim),
        w_k=w("w_k", (dim, dim), dim),
        w_v=w("w_v", (dim, dim), dim),
        ln1_img_gain=Parameter(f"{prefix}.ln1_img_gain", np.ones(dim)),
        ln1_img_bias=Parameter(f"{prefix}.ln1_img_bias", np.zeros(dim)),
        ln1_reg_gain=Parameter(f"{prefix}.ln1_reg_gain", np.ones(dim)),
        ln1_reg_bias=Parameter(f"{prefix}.ln1_reg_bias", np.zeros(dim)),
        ln2_gain=Parameter(f"{prefix}.ln2_gain", np.ones(dim)),
        ln2_bias=Parameter(f"{prefix}.ln2_bias", np.zeros(dim)),
        head_w1=w("head_w1", (heads, head_dim, hidden), head_dim),
        head_b1=Parameter(f"{prefix}.head_b1", np.zeros((heads, hidden))),
        head_w2=w("head_w2", (heads, hidden, 1), hidden),
        head_b2=Parameter(f"{prefix}.head_b2",
                          np.full((heads, 1), 1.0 / math.sqrt(heads))),
    )


def init_embedding_table(channels: int, region_names: list[str],
                         rng: np.random.Generator,
                         name: str = "geo.embedding") -> GeoEmbeddingTable:
    rows = rng.standard_normal((len(region_names), channels))
    return GeoEmbeddingTable(Parameter(name, rows), list(region_names))


def region_embed_lookup(g, table: GeoEmbeddingTable) -> Tensor:
    """Select the embedding row for a one-hot region vector.

    Gradient flows only to the selected row.
    """
    vec = np.asarray(g, dtype=np.float64)
    if vec.shape != (table.regions,):
        raise ShapeError(f"one-hot region must have shape ({table.regions},)")
    ones = np.flatnonzero(vec == 1.0)
    if len(ones) != 1 or not np.all((vec == 0.0) | (vec == 1.0)):
        raise ValueError("region indicator must be exactly one-hot")
    row = ad.take_rows(table.embedding, np.array([ones[0]]))
    return ad.reshape(row, (table.channels,))


def lookup_rows(table: GeoEmbeddingTable, region_idx: np.ndarray) -> Tensor:
    """Batched embedding lookup by integer region index."""
    idx = np.asarray(region_idx, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= table.regions:
        raise ValueError("region index out of range")
    return ad.take_rows(table.embedding, idx)


def _lift_tokens(values: Tensor, lift_w: Parameter, lift_b: Parameter,
                 pos: Parameter) -> Tensor:
    # [b, C] scalars -> [b, C, d] tokens via shared 1->d map + position rows.
    b, c = values.shape
    col = ad.reshape(values, (b, c, 1))
    lifted = ad.add(ad.matmul(col, lift_w), lift_b)
    return ad.add(lifted, pos)


def build_tokens(feature_grid, embedding, params: GeoAttnParams
                 ) -> tuple[Tensor, Tensor]:
    """Token sequences [(C+1), d] (or batched) for image and region paths.

    The image sequence lifts the spatial mean of each feature channel; the
    region sequence lifts each embedding coordinate. The shared region token
    sits at index 0 of both.
    """
    f = feature_grid if isinstance(feature_grid, Tensor) else Tensor(feature_grid)
    e = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    single = f.ndim == 3
    if single:
        f = ad.reshape(f, (1,) + f.shape)
        e = ad.reshape(e, (1,) + e.shape)
    if f.ndim != 4 or e.ndim != 2 or f.shape[-1] != e.shape[-1]:
        raise ShapeError(
            f"feature grid {f.shape} and embedding {e.shape} disagree")
    b = f.shape[0]
    d = params.dim
    pooled = ad.mean_over(f, axis=(1, 2))
    img_tokens = _lift_tokens(pooled, params.lift_img_w, params.lift_img_b,
                              params.pos_img)
    reg_tokens = _lift_tokens(e, params.lift_reg_w, params.lift_reg_b,
                              params.pos_reg)
    token = ad.broadcast_to(ad.reshape(params.region_token, (1, 1, d)), (b, 1, d))
    z_img = ad.concat([token, img_tokens], axis=1)
    z_reg = ad.concat([token, reg_tokens], axis=1)
    if single:
        z_img = ad.reshape(z_img, z_img.shape[1:])
        z_reg = ad.reshape(z_reg, z_reg.shape[1:])
    return z_img, z_reg


def _split_heads(z: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, _ = z.shape
    z = ad.reshape(z, (b, t, heads, head_dim))
    return ad.transpose(z, (0, 2, 1, 3))


def cross_attention_heads(z_img, z_reg, params: GeoAttnParams) -> Tensor:
    """Per-head token features [(H), (C+1), d/H] (or batched).

    Queries come from the normalized region sequence, keys/values from the
    normalized image sequence; attention logits are scaled by sqrt(d); the
    matching head slice of the raw image sequence is added back as the
    residual.
    """
    zi = z_img if isinstance(z_img, Tensor) else Tensor(z_img)
    zg = z_reg if isinstance(z_reg, Tensor) else Tensor(z_reg)
    single = zi.ndim == 2
    if single:
        zi = ad.reshape(zi, (1,) + zi.shape)
        zg = ad.reshape(zg, (1,) + zg.shape)
    if zi.shape != zg.shape or zi.shape[-1] != params.dim:
        raise ShapeError(f"token sequences disagree: {zi.shape} vs {zg.shape}")
    h, dh = params.heads, params.head_dim
    ln_img = ad.layer_norm(zi, params.ln1_img_gain, params.ln1_img_bias)
    ln_reg = ad.layer_norm(zg, params.ln1_reg_gain, params.ln1_reg_bias)
    q = _split_heads(ad.matmul(ln_reg, params.w_q), h, dh)
    k = _split_heads(ad.matmul(ln_img, params.w_k), h, dh)
    v = _split_heads(ad.matmul(ln_img, params.w_v), h, dh)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    1.0 / math.sqrt(params.dim))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, v)
    out = ad.add(mixed, _split_heads(zi, h, dh))
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


def head_reduce(z_heads, params: GeoAttnParams) -> tuple[Tensor, Tensor]:
    """Reduce per-head token features to scalars: z_hat [(H), (C+1)], plus
    the head weights read off the region-token position (index 0).

    Each token contributes its feature mean (the pooled residual) plus a
    per-head MLP mapping the layer-normed features to one scalar. The shared
    [d] affine of the norm is consumed as per-head slices.
    """
    z = z_heads if isinstance(z_heads, Tensor) else Tensor(z_heads)
    single = z.ndim == 3
    if single:
        z = ad.reshape(z, (1,) + z.shape)
    h, dh = params.heads, params.head_dim
    if z.shape[1] != h or z.shape[-1] != dh:
        raise ShapeError(f"per-head features expected [*, {h}, tokens, {dh}]")
    pooled = ad.mean_over(z, axis=-1)
    gain = ad.reshape(params.ln2_gain, (h, 1, dh))
    bias = ad.reshape(params.ln2_bias, (h, 1, dh))
    normed = ad.layer_norm(z, gain, bias)
    b1 = ad.reshape(params.head_b1, (h, 1, params.head_b1.shape[1]))
    b2 = ad.reshape(params.head_b2, (h, 1, 1))
    hidden = ad.relu(ad.add(ad.matmul(normed, params.head_w1), b1))
    mlp = ad.add(ad.matmul(hidden, params.head_w2), b2)
    z_hat = ad.add(pooled, ad.reshape(mlp, pooled.shape))
    head_weights = ad.getitem(z_hat, (slice(None), slice(None), 0))
    if single:
        z_hat = ad.reshape(z_hat, z_hat.shape[1:])
        head_weights = ad.reshape(head_weights, head_weights.shape[1:])
    return z_hat, head_weights


def reweight_channels(feature_grid, z_hat, head_weights) -> Tensor:
    """Scale channel j of the grid by sum_h weight_h * z_hat[h, j+1]."""
    f = feature_grid if isinstance(feature_grid, Tensor) else Tensor(feature_grid)
    zh = z_hat if isinstance(z_hat, Tensor) else Tensor(z_hat)
    hw = head_weights if isinstance(head_weights, Tensor) else Tensor(head_weights)
    single = f.ndim == 3
    if single:
        f = ad.reshape(f, (1,) + f.shape)
        zh = ad.reshape(zh, (1,) + zh.shape)
        hw = ad.reshape(hw, (1,) + hw.shape)
    b, h, tokens = zh.shape
    channels = f.shape[-1]
    if tokens != channels + 1:
        raise ShapeError(f"z_hat tokens {tokens} must equal channels+1")
    per_channel = ad.getitem(zh, (slice(None), slice(None), slice(1, None)))
    mix = ad.sum_over(ad.mul(ad.reshape(hw, (b, h, 1)), per_channel), axis=1)
    out = ad.mul(f, ad.reshape(mix, (b, 1, 1, channels)))
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


def geo_forward(feature_grid, g, table: GeoEmbeddingTable,
                params: GeoAttnParams) -> GeoModuleOutput:
    """Full pass: lookup -> tokens -> cross attention -> reduce -> re-weight.

    ``g`` is a one-hot region vector for a single grid, or an integer index
    array for a batched grid.
    """
    f = feature_grid if isinstance(feature_grid, Tensor) else Tensor(feature_grid)
    if f.ndim == 3:
        e = region_embed_lookup(g, table)
    else:
        e = lookup_rows(table, g)
    z_img, z_reg = build_tokens(f, e, params)
    z_heads = cross_attention_heads(z_img, z_reg, params)
    z_hat, head_weights = head_reduce(z_heads, params)
    adapted = reweight_channels(f, z_hat, head_weights)
    if f.ndim == 3:
        channel_weights = ad.getitem(z_hat, (slice(None), slice(1, None)))
    else:
        channel_weights = ad.getitem(
            z_hat, (slice(None), slice(None), slice(1, None)))
    return GeoModuleOutput(adapted=adapted, head_weights=head_weights,
                           channel_weights=channel_weights)
