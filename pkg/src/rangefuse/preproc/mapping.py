"""Differentiable point <-> pixel feature mappings (M and its inverse)."""

from __future__ import annotations

from ..errors import DimensionError
from ..tensor import Tensor
from ..tensor import functional as F
from .projection import PixelClusterIndex


def _check_rows(features: Tensor, index: PixelClusterIndex) -> None:
    if features.ndim != 2 or features.shape[0] != index.num_points:
        raise DimensionError(f"expected {index.num_points} x C point features, got {features.shape}")


def cluster_mean(features: Tensor, index: PixelClusterIndex) -> tuple[Tensor, Tensor]:
    """Per-pixel mean of the member points and its broadcast back to points.

    Returns ``(pixel_means, per_point)`` with shapes (num_pixels, C) and (N, C).
    """
    _check_rows(features, index)
    seg = index.segments(1)
    means = F.scatter_reduce(features, seg, index.num_pixels, "mean")
    return means, F.gather(means, seg)


def map_points_to_pixels(
    features: Tensor, index: PixelClusterIndex, stride: int = 1, reduce: str = "mean"
) -> Tensor:
    """Scatter point features (N x C) into a B x C x H/s x W/s image; empty pixels are 0."""
    _check_rows(features, index)
    h, w = index.check_stride(stride)
    seg = index.segments(stride)
    flat = F.scatter_reduce(features, seg, index.num_images * h * w, reduce)
    c = features.shape[1]
    return F.transpose(F.reshape(flat, (index.num_images, h, w, c)), (0, 3, 1, 2))


def map_pixels_to_points(feature_map: Tensor, index: PixelClusterIndex, stride: int = 1) -> Tensor:
    """Nearest-pixel lookup of every point at its strided coordinate."""
    h, w = index.check_stride(stride)
    if feature_map.ndim != 4 or feature_map.shape[0] != index.num_images or feature_map.shape[2:] != (h, w):
        raise DimensionError(
            f"expected a {index.num_images} x C x {h} x {w} map, got {feature_map.shape}"
        )
    c = feature_map.shape[1]
    rows = F.reshape(F.transpose(feature_map, (0, 2, 3, 1)), (index.num_images * h * w, c))
    return F.gather(rows, index.segments(stride))
