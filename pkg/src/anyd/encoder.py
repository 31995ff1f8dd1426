"""Reference image/speed encoder.

Maps an RGB raster to a spatial feature grid F of shape
[grid_h, grid_w, channels] by patchifying, projecting each patch through a
shared linear map with ReLU, and adding a learned position embedding. The
speed scalar gets its own small linear+ReLU embedding.

Inputs whose spatial dims are not exact multiples of the patch size are
center-cropped to the largest patch-aligned region, e.g. 36x64 with patch 8
crops to 32x64 and yields a 4x8 grid, and 225x400 with patch 28x30 crops to
224x390 and yields the 8x13 grid used at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 36
    image_w: int = 64
    image_ch: int = 3
    patch_h: int = 8
    patch_w: int = 8
    channels: int = 32
    speed_dim: int = 16

    def __post_init__(self):
        for name in ("image_h", "image_w", "image_ch", "patch_h", "patch_w",
                     "channels", "speed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive int")
        if self.patch_h > self.image_h or self.patch_w > self.image_w:
            raise ValueError("patch size exceeds image size")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_h

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_w

    @property
    def crop_h(self) -> int:
        return self.grid_h * self.patch_h

    @property
    def crop_w(self) -> int:
        return self.grid_w * self.patch_w

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.image_ch


@dataclass
class EncoderParams:
    patch_projection: Parameter  # [patch_dim, channels]
    patch_bias: Parameter        # [channels]
    position_embedding: Parameter  # [grid_h, grid_w, channels]
    speed_w: Parameter           # [1, speed_dim]
    speed_b: Parameter           # [speed_dim]

    def parameters(self) -> list[Parameter]:
        return [self.patch_projection, self.patch_bias, self.position_embedding,
                self.speed_w, self.speed_b]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        prefix: str = "encoder") -> EncoderParams:
    # gain > sqrt(2): pixel values live in [0, 1], so plain He under-excites
    # the grid and starves the planner layers downstream
    proj = 3.0 * rng.standard_normal((cfg.patch_dim, cfg.channels)) \
        / np.sqrt(cfg.patch_dim)
    pos = 0.02 * rng.standard_normal((cfg.grid_h, cfg.grid_w, cfg.channels))
    speed_w = 0.1 * rng.standard_normal((1, cfg.speed_dim))
    return EncoderParams(
        patch_projection=Parameter(f"{prefix}.patch_projection", proj),
        patch_bias=Parameter(f"{prefix}.patch_bias", np.zeros(cfg.channels)),
        position_embedding=Parameter(f"{prefix}.position_embedding", pos),
        speed_w=Parameter(f"{prefix}.speed_w", speed_w),
        speed_b=Parameter(f"{prefix}.speed_b", np.zeros(cfg.speed_dim)),
    )


def _check_image(value: np.ndarray, cfg: EncoderConfig) -> None:
    if value.shape[-3] != cfg.image_h or value.shape[-2] != cfg.image_w \
            or value.shape[-1] != cfg.image_ch:
        raise ShapeError(
            f"image shape {value.shape[-3:]} does not match config "
            f"({cfg.image_h}, {cfg.image_w}, {cfg.image_ch})")
    if value.min() < -1e-9 or value.max() > 1.0 + 1e-9:
        raise ValueError("image values must lie in [0, 1]")


def encode_image(img, cfg: EncoderConfig, params: EncoderParams) -> Tensor:
    """Encode one image [h, w, ch] or a batch [b, h, w, ch] to feature grids.

    F = ReLU(patchify(img) @ W + b) + position_embedding.
    """
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.ndim == 3:
        batched = encode_image(ad.reshape(x, (1,) + x.shape), cfg, params)
        return ad.reshape(batched, batched.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"image must be 3-d or 4-d, got shape {x.shape}")
    _check_image(x.value, cfg)
    b = x.shape[0]
    gh, gw, ph, pw = cfg.grid_h, cfg.grid_w, cfg.patch_h, cfg.patch_w
    off_h = (cfg.image_h - cfg.crop_h) // 2
    off_w = (cfg.image_w - cfg.crop_w) // 2
    if off_h or off_w or cfg.crop_h != cfg.image_h or cfg.crop_w != cfg.image_w:
        x = ad.getitem(x, (slice(None), slice(off_h, off_h + cfg.crop_h),
                           slice(off_w, off_w + cfg.crop_w), slice(None)))
    patches = ad.reshape(x, (b, gh, ph, gw, pw, cfg.image_ch))
    patches = ad.transpose(patches, (0, 1, 3, 2, 4, 5))
    patches = ad.reshape(patches, (b, gh * gw, cfg.patch_dim))
    projected = ad.add(ad.matmul(patches, params.patch_projection), params.patch_bias)
    activated = ad.relu(projected)
    grid = ad.reshape(activated, (b, gh, gw, cfg.channels))
    return ad.add(grid, params.position_embedding)


def embed_speed(speed, cfg: EncoderConfig, params: EncoderParams) -> Tensor:
    """Embed speed in m/s (scalar or [b]) as ReLU(v @ W + b).

    Speeds are fed raw, without normalization.
    """
    arr = np.asarray(speed, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("speed must be nonnegative")
    scalar = arr.ndim == 0
    col = Tensor(arr.reshape(-1, 1))
    out = ad.relu(ad.add(ad.matmul(col, params.speed_w), params.speed_b))
    if scalar:
        return ad.reshape(out, (cfg.speed_dim,))
    return out
