"""Spherical range projection and the point <-> pixel cluster index."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError
from ..tensor.functional import Segments
from .scan import RawScan, SensorConfig

MIN_DEPTH = 1e-3


@dataclass
class ProjectedScan:
    """Per-point projection of the retained points.

    ``kept`` indexes the retained rows of the source scan; ``dropped`` lists
    the near-origin points that were removed.
    """

    depth: np.ndarray
    u: np.ndarray
    v: np.ndarray
    u_px: np.ndarray
    v_px: np.ndarray
    pixel_index: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray
    height: int
    width: int

    def __len__(self) -> int:
        return self.depth.shape[0]


def depth_of(xyz: np.ndarray) -> np.ndarray:
    x, y, z = (xyz[:, i].astype(np.float64) for i in range(3))
    return np.sqrt(x * x + y * y + z * z)


def image_coords(x, y, z, d, cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (u, v) image coordinates for float64 coordinates with d > 0."""
    u = 0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width
    v = (1.0 - (np.arcsin(z / d) + cfg.fov_up) / cfg.fov) * cfg.height
    return u, v


def pixel_coords(u: np.ndarray, v: np.ndarray, cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    u_px = np.clip(np.floor(u), 0, cfg.width - 1).astype(np.int64)
    v_px = np.clip(np.floor(v), 0, cfg.height - 1).astype(np.int64)
    return u_px, v_px


def project(scan: RawScan, cfg: SensorConfig, min_depth: float = MIN_DEPTH) -> ProjectedScan:
    """Map every point with depth >= ``min_depth`` onto the range image."""
    d_all = depth_of(scan.points)
    keep = d_all >= min_depth
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise DataError("every point lies within the minimum depth of the origin")
    pts = scan.points[kept].astype(np.float64)
    d = d_all[kept]
    u, v = image_coords(pts[:, 0], pts[:, 1], pts[:, 2], d, cfg)
    u_px, v_px = pixel_coords(u, v, cfg)
    return ProjectedScan(
        depth=d, u=u, v=v, u_px=u_px, v_px=v_px,
        pixel_index=v_px * cfg.width + u_px,
        kept=kept, dropped=np.flatnonzero(~keep),
        height=cfg.height, width=cfg.width,
    )


@dataclass
class PixelClusterIndex:
    """Bidirectional point <-> pixel mapping for one or more stacked scans.

    Pixel ids are ``image * H * W + v_px * W + u_px``. ``point_ids`` lists the
    members of pixel ``p`` in ``point_ids[offsets[p]:offsets[p + 1]]`` in
    ascending point order.
    """

    height: int
    width: int
    num_images: int
    pixel_index: np.ndarray
    v_px: np.ndarray
    u_px: np.ndarray
    image_id: np.ndarray
    offsets: np.ndarray
    point_ids: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_points(self) -> int:
        return self.pixel_index.shape[0]

    @property
    def num_pixels(self) -> int:
        return self.num_images * self.height * self.width

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def occupancy(self) -> np.ndarray:
        """Per-pixel point count K as a (num_images, H, W) image."""
        return self.counts.reshape(self.num_images, self.height, self.width)

    def cluster(self, pixel: int) -> np.ndarray:
        return self.point_ids[self.offsets[pixel]:self.offsets[pixel + 1]]

    def check_stride(self, stride: int) -> tuple[int, int]:
        if stride < 1 or self.height % stride or self.width % stride:
            raise ConfigError(f"stride {stride} does not divide the {self.height}x{self.width} image")
        return self.height // stride, self.width // stride

    def strided_index(self, stride: int) -> np.ndarray:
        """Pixel id of every point on the image downsampled by ``stride``."""
        h, w = self.check_stride(stride)
        return self.image_id * (h * w) + (self.v_px // stride) * w + self.u_px // stride

    def segments(self, stride: int = 1) -> Segments:
        key = ("seg", stride)
        if key not in self._cache:
            h, w = self.check_stride(stride)
            if stride == 1:
                seg = Segments.presorted(self.pixel_index, self.num_pixels, self.point_ids)
            else:
                seg = Segments(self.strided_index(stride), self.num_images * h * w)
            self._cache[key] = seg
        return self._cache[key]

    def occupied(self) -> tuple[np.ndarray, Segments]:
        """Occupied pixel ids and segments mapping points to their compact
        occupied-pixel rank."""
        key = ("occupied",)
        if key not in self._cache:
            pixels = np.flatnonzero(self.counts)
            rank = np.searchsorted(pixels, self.pixel_index)
            self._cache[key] = (pixels, Segments(rank, pixels.size))
        return self._cache[key]


def _group_by_pixel(pixel_index: np.ndarray, num_pixels: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(pixel_index, minlength=num_pixels)
    offsets = np.zeros(num_pixels + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, np.argsort(pixel_index, kind="stable").astype(np.int64)


def build_cluster_index(proj: ProjectedScan, cfg: SensorConfig) -> PixelClusterIndex:
    """Group retained points by pixel, keeping input order inside each pixel."""
    pix = np.asarray(proj.pixel_index, dtype=np.int64)
    if pix.size and (pix.min() < 0 or pix.max() >= cfg.num_pixels):
        raise DataError("pixel index outside the range image")
    offsets, point_ids = _group_by_pixel(pix, cfg.num_pixels)
    return PixelClusterIndex(
        height=cfg.height, width=cfg.width, num_images=1,
        pixel_index=pix, v_px=np.asarray(proj.v_px, dtype=np.int64), u_px=np.asarray(proj.u_px, dtype=np.int64),
        image_id=np.zeros(pix.size, dtype=np.int64), offsets=offsets, point_ids=point_ids,
    )


def collate(indices: Sequence[PixelClusterIndex]) -> PixelClusterIndex:
    """Stack single-image indices into one batch; points are concatenated in
    input order."""
    if not indices:
        raise DataError("cannot collate an empty batch")
    h, w = indices[0].height, indices[0].width
    if any(ix.height != h or ix.width != w for ix in indices):
        raise ConfigError("all scans in a batch must share the range-image size")
    v_px = np.concatenate([ix.v_px for ix in indices])
    u_px = np.concatenate([ix.u_px for ix in indices])
    # re-base image ids so that stacked multi-image inputs stay contiguous
    bases = np.cumsum([0] + [ix.num_images for ix in indices[:-1]])
    image_id = np.concatenate([ix.image_id + base for ix, base in zip(indices, bases)])
    num_images = int(sum(ix.num_images for ix in indices))
    pix = image_id * (h * w) + v_px * w + u_px
    offsets, point_ids = _group_by_pixel(pix, num_images * h * w)
    return PixelClusterIndex(h, w, num_images, pix, v_px, u_px, image_id, offsets, point_ids)
