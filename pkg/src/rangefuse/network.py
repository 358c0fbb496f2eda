"""End-to-end range-point fusion network.

Points (N x 5 features) and their range-image projection are encoded
jointly; four stages refine pixel features with Conv-SE-NeXt blocks while
exchanging information with the point branch through the point <-> pixel
mappings; a fusion head combines every stage into per-point logits.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .blocks import BLOCK_TYPES, make_block
from .errors import ConfigError, DimensionError
from .preproc import PixelClusterIndex, SensorConfig, cluster_mean, map_pixels_to_points, map_points_to_pixels
from .tensor import Conv2d, ConvNormAct, Linear, LinearNormAct, Module, Tensor
from .tensor import functional as F


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    sensor: SensorConfig = field(default_factory=SensorConfig.desk)
    in_channels: int = 5
    point_mlp_widths: tuple[int, ...] = (64, 128, 256, 256)
    pixel_embed_width: int = 16
    stem_widths: tuple[int, ...] = (64, 64)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    stage_dilations: tuple[int, ...] = (1, 1, 1, 1)
    stage_widths: tuple[int, ...] = (128, 128, 128, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    num_stages: int = 4
    dw_kernel: int = 3
    se_ratio: int = 4
    block_type: str = "convsenext"
    fusion_width: int = 128
    head_pixel_widths: tuple[int, ...] = (384, 256)
    head_point_widths: tuple[int, ...] = (256, 256)
    head_width: int = 64
    point_refine_sigmoid: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("point_mlp_widths", "stem_widths", "stage_strides", "stage_dilations",
                     "stage_widths", "blocks_per_stage", "head_pixel_widths", "head_point_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("stage_strides", "stage_dilations", "stage_widths", "blocks_per_stage"):
            if len(getattr(self, name)) != self.num_stages:
                raise ConfigError(f"{name} needs {self.num_stages} entries, got {getattr(self, name)}")
        total = self.total_stride
        if self.sensor.height % total or self.sensor.width % total:
            raise ConfigError(
                f"range image {self.sensor.height}x{self.sensor.width} not divisible by total stride {total}"
            )
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"unknown block type {self.block_type!r}")
        if min(self.blocks_per_stage, default=1) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    def cumulative_strides(self) -> list[int]:
        return [int(v) for v in np.cumprod(self.stage_strides)]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["sensor"] = dataclasses.asdict(self.sensor)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["sensor"] = SensorConfig(**data["sensor"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def full(cls, num_classes: int = 16, kernel: int = 3) -> "ModelConfig":
        """Full-size settings on the 32 x 480 grid (kernel 7 for the 64-beam setup)."""
        return cls(num_classes=num_classes, sensor=SensorConfig.beams32(), dw_kernel=kernel)

    @classmethod
    def tiny(cls, num_classes: int = 4, sensor: Optional[SensorConfig] = None, **overrides) -> "ModelConfig":
        """Narrow widths for gradient checks and quick tests."""
        base = dict(
            num_classes=num_classes,
            sensor=sensor or SensorConfig(8, 16, np.radians(10.0), np.radians(30.0)),
            point_mlp_widths=(8, 8, 16, 16),
            pixel_embed_width=4,
            stem_widths=(8, 8),
            stage_widths=(8, 8, 8, 8),
            fusion_width=8,
            head_pixel_widths=(8,),
            head_point_widths=(8,),
            head_width=8,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ModelOutput:
    logits: Tensor
    aux_logits: list[Tensor]
    attention: list[np.ndarray] = field(default_factory=list)


def _mlp(widths: Sequence[int], rng, dtype) -> list[Module]:
    return [LinearNormAct(a, b, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]


def _convs(widths: Sequence[int], rng, dtype) -> list[Module]:
    return [ConvNormAct(a, b, 3, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]


def _run(layers: Sequence[Module], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


class FeaturesEncoder(Module):
    """Per-point MLP on [P ; P - cluster mean] and a MAX-pooled pixel embedding."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        widths = (2 * cfg.in_channels,) + cfg.point_mlp_widths
        self.point_mlp = _mlp(widths[:-1], rng, dtype)
        self.point_out = Linear(widths[-2], widths[-1], rng=rng, dtype=dtype)
        self.pixel_mlp = LinearNormAct(widths[-1], cfg.pixel_embed_width, rng=rng, dtype=dtype)

    def forward(self, feats: Tensor, index: PixelClusterIndex) -> tuple[Tensor, Tensor]:
        _, mean = cluster_mean(feats, index)
        p = F.concat([feats, F.sub(feats, mean)], axis=1)
        pt = self.point_out(_run(self.point_mlp, p))
        pixels, occupied = index.occupied()
        pooled = F.max_over_set(pt, occupied, pixels.size)
        emb = self.pixel_mlp(pooled)
        # place occupied rows into the full grid; empty pixels stay zero
        grid = F.scatter_reduce(emb, pixels, index.num_pixels, "mean")
        c = emb.shape[1]
        image = F.transpose(F.reshape(grid, (index.num_images, index.height, index.width, c)), (0, 3, 1, 2))
        return pt, image


class PixelStem(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        point_width, embed = cfg.point_mlp_widths[-1], cfg.pixel_embed_width
        self.reduce = Conv2d(point_width, embed, 1, bias=True, rng=rng, dtype=dtype)
        self.convs = _convs((2 * embed,) + cfg.stem_widths + (embed,), rng, dtype)

    def forward(self, embed_image: Tensor, pt: Tensor, index: PixelClusterIndex) -> Tensor:
        mapped = self.reduce(map_points_to_pixels(pt, index, 1))
        return _run(self.convs, F.concat([embed_image, mapped], axis=1))


class PointStem(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        width = cfg.point_mlp_widths[-1]
        self.layer = LinearNormAct(width + cfg.pixel_embed_width, width, rng=rng, dtype=dtype)

    def forward(self, pt: Tensor, embed_image: Tensor, index: PixelClusterIndex) -> Tensor:
        return self.layer(F.concat([pt, map_pixels_to_points(embed_image, index, 1)], axis=1))


class FusionStage(Module):
    """One backbone stage: block(s), point->pixel fusion with attention, and
    pixel->point refinement."""

    def __init__(self, cfg: ModelConfig, n: int, px_in: int, pt_in: int, rng, dtype):
        super().__init__()
        width = cfg.stage_widths[n]
        self.stride, self.prev_scale = cfg.stage_strides[n], ([1] + cfg.cumulative_strides())[n]
        self.blocks = [
            make_block(cfg.block_type, px_in if i == 0 else width, width, cfg.dw_kernel,
                       self.stride if i == 0 else 1, cfg.stage_dilations[n], cfg.se_ratio, rng, dtype)
            for i in range(cfg.blocks_per_stage[n])
        ]
        self.fuse = ConvNormAct(width + pt_in, width, 3, rng=rng, dtype=dtype)
        self.attention = Conv2d(width, width, 1, bias=True, rng=rng, dtype=dtype)
        self.refine_sigmoid = cfg.point_refine_sigmoid
        if self.refine_sigmoid:
            self.refine = Linear(width + pt_in, width, rng=rng, dtype=dtype)
        else:
            self.refine = LinearNormAct(width + pt_in, width, rng=rng, dtype=dtype)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, px: Tensor, pt: Tensor, index: PixelClusterIndex) -> tuple[Tensor, Tensor]:
        scale = self.prev_scale * self.stride
        px_tilde = _run(self.blocks, px)
        h, w = px_tilde.shape[2:]
        if (h, w) != (index.height // scale, index.width // scale):
            raise DimensionError(f"stage map {h}x{w} disagrees with cumulative stride {scale}")
        px_bar = map_points_to_pixels(pt, index, self.prev_scale)
        fused = self.fuse(F.concat([px_tilde, F.bilinear_resize(px_bar, h, w)], axis=1))
        attn = F.sigmoid(self.attention(fused))
        self.last_attention = attn.data
        px_out = F.add(px_tilde, F.mul(attn, fused))
        refined = self.refine(F.concat([map_pixels_to_points(px_tilde, index, scale), pt], axis=1))
        pt_out = F.sigmoid(refined) if self.refine_sigmoid else refined
        return px_out, pt_out


class FusionHead(Module):
    def __init__(self, cfg: ModelConfig, px_widths: Sequence[int], pt_widths: Sequence[int], rng, dtype):
        super().__init__()
        self.pixel = _convs((sum(px_widths),) + cfg.head_pixel_widths + (cfg.fusion_width,), rng, dtype)
        self.point = _mlp((sum(pt_widths),) + cfg.head_point_widths + (cfg.fusion_width,), rng, dtype)
        self.logit = LinearNormAct(cfg.fusion_width, cfg.head_width, rng=rng, dtype=dtype)
        self.classifier = Linear(cfg.head_width, cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, pxs: Sequence[Tensor], pts: Sequence[Tensor], index: PixelClusterIndex) -> Tensor:
        h, w = index.height, index.width
        px_f = _run(self.pixel, F.concat([F.bilinear_resize(p, h, w) for p in pxs], axis=1))
        pt_f = _run(self.point, F.concat(list(pts), axis=1))
        fused = self.logit(F.add(map_pixels_to_points(px_f, index, 1), pt_f))
        return self.classifier(fused)


class RangeFusionNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        self.encoder = FeaturesEncoder(cfg, rng, dtype)
        self.pixel_stem = PixelStem(cfg, rng, dtype)
        self.point_stem = PointStem(cfg, rng, dtype)
        px_w = [cfg.pixel_embed_width] + list(cfg.stage_widths)
        pt_w = [cfg.point_mlp_widths[-1]] + list(cfg.stage_widths)
        self.stages = [FusionStage(cfg, n, px_w[n], pt_w[n], rng, dtype) for n in range(cfg.num_stages)]
        self.aux_heads = [Conv2d(w, cfg.num_classes, 1, bias=True, rng=rng, dtype=dtype) for w in cfg.stage_widths]
        self.head = FusionHead(cfg, px_w, pt_w, rng, dtype)

    def forward(self, features, index: PixelClusterIndex) -> ModelOutput:
        cfg = self.cfg
        if (index.height, index.width) != (cfg.sensor.height, cfg.sensor.width):
            raise DimensionError(
                f"index grid {index.height}x{index.width} does not match the model's "
                f"{cfg.sensor.height}x{cfg.sensor.width}"
            )
        feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features), dtype=cfg.dtype)
        if feats.ndim != 2 or feats.shape[1] != cfg.in_channels or feats.shape[0] != index.num_points:
            raise DimensionError(f"expected {index.num_points} x {cfg.in_channels} features, got {feats.shape}")
        pt0, embed = self.encoder(feats, index)
        px = self.pixel_stem(embed, pt0, index)
        pt = self.point_stem(pt0, embed, index)
        pxs, pts, aux, attn = [px], [pt], [], []
        for stage, aux_head in zip(self.stages, self.aux_heads):
            px, pt = stage(px, pt, index)
            pxs.append(px)
            pts.append(pt)
            attn.append(stage.last_attention)
            aux.append(F.bilinear_resize(aux_head(px), index.height, index.width))
        return ModelOutput(self.head(pxs, pts, index), aux, attn)


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))
