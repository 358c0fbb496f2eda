"""Pre-processing workflows: a classical staged one and a fused chunk-parallel one.

Both share the same floating-point expressions (numpy elementwise kernels
give identical results on any chunking), so their outputs are bitwise
equal. The fused workflow replaces the comparison sort used for clustering
with a counting scheme (count, prefix-sum, place) run once over the mapped
points, so the grouping does not depend on how the points were chunked.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
import numba
import numpy as np

from ..errors import ConfigError, DataError
from .projection import (
    MIN_DEPTH,
    PixelClusterIndex,
    ProjectedScan,
    build_cluster_index,
    project,
)
from .scan import RawScan, SensorConfig

MODES = ("fused", "staged")

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        if workers not in _pools:
            _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="preproc")
        return _pools[workers]


@numba.njit(cache=True, nogil=True)
def _group(pix, num_pixels):
    """Counting sort of point ids by pixel: count, prefix-sum, place."""
    offsets = np.zeros(num_pixels + 1, dtype=np.int64)
    for i in range(pix.shape[0]):
        offsets[pix[i] + 1] += 1
    for p in range(num_pixels):
        offsets[p + 1] += offsets[p]
    cursor = offsets[:-1].copy()
    point_ids = np.empty(pix.shape[0], dtype=np.int64)
    for i in range(pix.shape[0]):
        p = pix[i]
        point_ids[cursor[p]] = i
        cursor[p] += 1
    return offsets, point_ids


def input_features(points: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """The 5-channel (x, y, z, intensity, depth) float32 input."""
    out = np.empty((points.shape[0], 5), dtype=np.float32)
    out[:, :4] = points
    out[:, 4] = depth
    return out


@numba.njit(cache=True, nogil=True)
def _depth(x, y, z):
    return np.sqrt(x * x + y * y + z * z)


@numba.njit(cache=True, nogil=True)
def _count_kept(points, min_depth):
    count = 0
    for i in range(points.shape[0]):
        if _depth(np.float64(points[i, 0]), np.float64(points[i, 1]), np.float64(points[i, 2])) >= min_depth:
            count += 1
    return count


@numba.njit(cache=True, nogil=True)
def _depth_pass(points, start, min_depth, depth, xyz, features, kept, dropped):
    """Depth, retention split and feature rows, written into preallocated slices."""
    nk = 0
    nd = 0
    for i in range(points.shape[0]):
        x = np.float64(points[i, 0])
        y = np.float64(points[i, 1])
        z = np.float64(points[i, 2])
        d = _depth(x, y, z)
        if d >= min_depth:
            depth[nk] = d
            xyz[0, nk] = x
            xyz[1, nk] = y
            xyz[2, nk] = z
            for c in range(4):
                features[nk, c] = points[i, c]
            features[nk, 4] = np.float32(d)
            kept[nk] = start + i
            nk += 1
        else:
            dropped[nd] = start + i
            nd += 1


@numba.njit(cache=True, nogil=True)
def _pixel_pass(azimuth, elevation, height, width, fov_up, fov, u, v, u_px, v_px, pix):
    for i in range(azimuth.shape[0]):
        # same operation order as projection.image_coords / pixel_coords
        u[i] = 0.5 * (1.0 - azimuth[i] / np.pi) * width
        v[i] = (1.0 - (elevation[i] + fov_up) / fov) * height
        u_px[i] = np.int64(min(max(np.floor(u[i]), 0.0), width - 1.0))
        v_px[i] = np.int64(min(max(np.floor(v[i]), 0.0), height - 1.0))
        pix[i] = v_px[i] * width + u_px[i]


def _staged(scan: RawScan, cfg: SensorConfig, min_depth: float):
    proj = project(scan, cfg, min_depth)
    index = build_cluster_index(proj, cfg)
    return proj, index, input_features(scan.points[proj.kept], proj.depth)


def _fused(scan: RawScan, cfg: SensorConfig, min_depth: float, workers: int):
    n = len(scan)
    bounds = np.linspace(0, n, workers + 1).astype(np.int64)
    spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    pool = _pool(workers)
    pts = scan.points

    kept_counts = list(pool.map(lambda ab: _count_kept(pts[ab[0]:ab[1]], min_depth), spans))
    total = int(np.sum(kept_counts))
    if total == 0:
        raise DataError("every point lies within the minimum depth of the origin")
    k_starts = np.concatenate(([0], np.cumsum(kept_counts)))

    depth = np.empty(total)
    xyz = np.empty((3, total))
    features = np.empty((total, 5), dtype=np.float32)
    kept = np.empty(total, dtype=np.int64)
    dropped = np.empty(n - total, dtype=np.int64)
    azimuth = np.empty(total)
    elevation = np.empty(total)
    u, v = np.empty(total), np.empty(total)
    u_px, v_px, pix = (np.empty(total, dtype=np.int64) for _ in range(3))

    def run(c):
        (a, b), k0, k1 = spans[c], k_starts[c], k_starts[c + 1]
        ks = slice(k0, k1)
        _depth_pass(pts[a:b], a, min_depth, depth[ks], xyz[:, ks], features[ks], kept[ks], dropped[a - k0:b - k1])
        # transcendental functions stay in numpy so both workflows agree bitwise
        np.arctan2(xyz[1, ks], xyz[0, ks], out=azimuth[ks])
        np.divide(xyz[2, ks], depth[ks], out=elevation[ks])
        np.arcsin(elevation[ks], out=elevation[ks])
        _pixel_pass(azimuth[ks], elevation[ks], cfg.height, cfg.width, cfg.fov_up, cfg.fov,
                    u[ks], v[ks], u_px[ks], v_px[ks], pix[ks])

    list(pool.map(run, range(len(spans))))
    offsets, point_ids = _group(pix, cfg.num_pixels)
    proj = ProjectedScan(
        depth=depth, u=u, v=v, u_px=u_px, v_px=v_px, pixel_index=pix, kept=kept, dropped=dropped,
        height=cfg.height, width=cfg.width,
    )
    index = PixelClusterIndex(
        height=cfg.height, width=cfg.width, num_images=1, pixel_index=pix, v_px=v_px, u_px=u_px,
        image_id=np.zeros(total, dtype=np.int64), offsets=offsets, point_ids=point_ids,
    )
    return proj, index, features


def preprocess_pipeline(
    scan: RawScan,
    cfg: SensorConfig,
    mode: str = "fused",
    workers: int = 1,
    min_depth: float = MIN_DEPTH,
) -> tuple[ProjectedScan, PixelClusterIndex, np.ndarray]:
    """Project, cluster and build the N x 5 input features of one scan."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if mode == "staged":
        return _staged(scan, cfg, min_depth)
    if mode == "fused":
        return _fused(scan, cfg, min_depth, workers)
    raise ConfigError(f"unknown pipeline mode {mode!r}; expected one of {MODES}")
