"""Synthetic ray-cast scenes, geometric augmentation, splits and batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, TypeVar, Union

import numpy as np

from .errors import ConfigError, DataError
from .preproc import RawScan, SensorConfig, load_scan, save_scan

T = TypeVar("T")
PathLike = Union[str, os.PathLike]

CLASS_NAMES = ("ground", "box", "cylinder", "wall")
GROUND, BOX, CYLINDER, WALL = range(4)
CLASS_INTENSITY = (0.15, 0.45, 0.7, 0.9)


@dataclass(frozen=True)
class SynthSceneConfig:
    """Scene and sensor settings for one family of synthetic scans.

    Rays are cast through the pixel centers of a ``beams`` x ``azimuth_steps``
    grid spanning the vertical field of view and the full azimuth circle.
    Object counts are inclusive (min, max) ranges drawn per scan.
    """

    seed: int = 0
    beams: int = 16
    azimuth_steps: int = 240
    fov_up: float = math.radians(10.0)
    fov_down: float = math.radians(30.0)
    sensor_height: float = 1.7
    max_range: float = 50.0
    ground: bool = True
    boxes: tuple[int, int] = (3, 6)
    cylinders: tuple[int, int] = (3, 6)
    walls: tuple[int, int] = (1, 3)
    noise: float = 0.02
    intensity_noise: float = 0.05

    def __post_init__(self):
        if self.beams < 1 or self.azimuth_steps < 1:
            raise ConfigError("beams and azimuth steps must be positive")
        if self.fov_up + self.fov_down <= 0:
            raise ConfigError("vertical field of view must be positive")
        if self.noise < 0 or self.intensity_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.sensor_height <= 0 or self.max_range <= 0:
            raise ConfigError("sensor height and max range must be positive")
        for name in ("boxes", "cylinders", "walls"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} count range {lo}..{hi} is invalid")
            object.__setattr__(self, name, (int(lo), int(hi)))

    def check_sensor(self, sensor: SensorConfig) -> None:
        if self.beams > sensor.height or self.azimuth_steps > sensor.width:
            raise ConfigError(
                f"{self.beams}x{self.azimuth_steps} rays exceed the {sensor.height}x{sensor.width} range image"
            )

    def sensor(self) -> SensorConfig:
        return SensorConfig(self.beams, self.azimuth_steps, self.fov_up, self.fov_down)

    def replace(self, **changes) -> "SynthSceneConfig":
        return replace(self, **changes)


@dataclass
class Scene:
    """Primitives standing on ``z = floor_z``; the ground plane itself is
    only hit when ``ground`` is set.

    boxes: rows (cx, cy, half_x, half_y, height, yaw, class id); walls are
    long thin boxes. cylinders: rows (cx, cy, radius, height).
    """

    floor_z: float
    ground: bool = True
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    cylinders: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    @property
    def empty(self) -> bool:
        return not self.ground and not len(self.boxes) and not len(self.cylinders)


@dataclass
class SynthRender:
    scan: RawScan
    scene: Scene
    directions: np.ndarray  # N x 3 unit rays, float64
    ranges: np.ndarray  # N noisy ranges, float64


def ray_directions(cfg: SynthSceneConfig) -> np.ndarray:
    """Unit rays through the grid's pixel centers, row-major from the top beam."""
    v = (np.arange(cfg.beams) + 0.5) / cfg.beams
    u = (np.arange(cfg.azimuth_steps) + 0.5) / cfg.azimuth_steps
    elevation = (1.0 - v) * (cfg.fov_up + cfg.fov_down) - cfg.fov_up
    azimuth = np.pi * (1.0 - 2.0 * u)
    el, az = np.meshgrid(elevation, azimuth, indexing="ij")
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


def _ring(rng, n, lo, hi):
    r = rng.uniform(lo, hi, n)
    a = rng.uniform(-np.pi, np.pi, n)
    return r * np.cos(a), r * np.sin(a)


def build_scene(cfg: SynthSceneConfig, rng: np.random.Generator) -> Scene:
    nb = rng.integers(cfg.boxes[0], cfg.boxes[1] + 1)
    nc = rng.integers(cfg.cylinders[0], cfg.cylinders[1] + 1)
    nw = rng.integers(cfg.walls[0], cfg.walls[1] + 1)
    bx, by = _ring(rng, nb, 4.0, 25.0)
    boxes = np.column_stack([
        bx, by, rng.uniform(0.5, 2.0, nb), rng.uniform(0.5, 2.0, nb),
        rng.uniform(1.0, 3.0, nb), rng.uniform(-np.pi, np.pi, nb), np.full(nb, BOX),
    ])
    wx, wy = _ring(rng, nw, 15.0, 35.0)
    walls = np.column_stack([
        wx, wy, rng.uniform(5.0, 15.0, nw), np.full(nw, 0.15),
        rng.uniform(3.0, 6.0, nw), np.arctan2(wy, wx) + np.pi / 2, np.full(nw, WALL),
    ])
    cx, cy = _ring(rng, nc, 4.0, 25.0)
    cylinders = np.column_stack([cx, cy, rng.uniform(0.3, 1.0, nc), rng.uniform(1.0, 4.0, nc)])
    return Scene(-cfg.sensor_height, cfg.ground, np.concatenate([boxes, walls]).reshape(-1, 7), cylinders.reshape(-1, 4))


def _hit_box(d: np.ndarray, box: np.ndarray, floor_z: float) -> np.ndarray:
    """Slab test in the box frame; rays start at the origin."""
    cx, cy, hx, hy, height, yaw = box[:6]
    c, s = math.cos(yaw), math.sin(yaw)
    # origin and directions expressed in the box frame
    o = np.array([-(c * cx + s * cy), -(-s * cx + c * cy), 0.0])
    dl = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    lo = np.array([-hx, -hy, floor_z])
    hi = np.array([hx, hy, floor_z + height])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / dl
        t2 = (hi - o) / dl
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    return np.where((t_far >= t_near) & (t_near > 0), t_near, np.inf)


def _hit_cylinder(d: np.ndarray, cyl: np.ndarray, floor_z: float) -> np.ndarray:
    cx, cy, r, height = cyl
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - r * r
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t_side = (-b - np.sqrt(disc)) / (2 * a)
    z = t_side * d[:, 2]
    side = np.where((disc >= 0) & (t_side > 0) & (z >= floor_z) & (z <= floor_z + height), t_side, np.inf)
    # top cap
    top = floor_z + height
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = top / d[:, 2]
    px, py = t_cap * d[:, 0] - cx, t_cap * d[:, 1] - cy
    cap = np.where((t_cap > 0) & (px * px + py * py <= r * r), t_cap, np.inf)
    return np.minimum(side, cap)


def cast(scene: Scene, directions: np.ndarray, max_range: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and class per ray; misses get inf and class -1."""
    d = np.asarray(directions, dtype=np.float64)
    n = d.shape[0]
    best = np.full(n, np.inf)
    cls = np.full(n, -1, dtype=np.int64)
    floor = scene.floor_z

    def offer(t, c):
        closer = t < best
        best[closer] = t[closer]
        cls[closer] = c

    if scene.ground:
        with np.errstate(divide="ignore"):
            t = np.where(d[:, 2] < 0, floor / d[:, 2], np.inf)
        offer(t, GROUND)
    for box in scene.boxes:
        offer(_hit_box(d, box, floor), int(box[6]))
    for cyl in scene.cylinders:
        offer(_hit_cylinder(d, cyl, floor), CYLINDER)
    miss = best > max_range
    best[miss] = np.inf
    cls[miss] = -1
    return best, cls


def synth_render(cfg: SynthSceneConfig) -> SynthRender:
    """Generate one labeled scan plus the geometry and rays behind it."""
    rng = np.random.default_rng(cfg.seed)
    scene = build_scene(cfg, rng)
    if scene.empty:
        raise DataError("scene has no geometry")
    dirs = ray_directions(cfg)
    t, cls = cast(scene, dirs, cfg.max_range)
    hit = np.flatnonzero(np.isfinite(t))
    if hit.size == 0:
        raise DataError("no ray hits the scene geometry")
    dirs, t, cls = dirs[hit], t[hit], cls[hit]
    ranges = np.maximum(t + rng.normal(0.0, cfg.noise, t.size), 0.05)
    xyz = dirs * ranges[:, None]
    base = np.asarray(CLASS_INTENSITY)[cls]
    intensity = np.clip(base + rng.normal(0.0, cfg.intensity_noise, t.size), 0.0, 1.0)
    scan = RawScan(np.column_stack([xyz, intensity]).astype(np.float32), cls)
    return SynthRender(scan, scene, dirs, ranges)


def synth_generate(cfg: SynthSceneConfig) -> RawScan:
    return synth_render(cfg).scan


def synth_dataset(cfg: SynthSceneConfig, count: int) -> list[RawScan]:
    """``count`` scans seeded ``cfg.seed``, ``cfg.seed + 1``, ..."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    return [synth_generate(cfg.replace(seed=cfg.seed + i)) for i in range(count)]


# ----------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation: tuple[float, float] = (-math.pi, math.pi)
    flip_x: float = 0.5
    flip_y: float = 0.5
    scale: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        if self.rotation[0] > self.rotation[1]:
            raise ConfigError("rotation range is reversed")
        if not (0.0 <= self.flip_x <= 1.0 and 0.0 <= self.flip_y <= 1.0):
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if not (0.0 < self.scale[0] <= self.scale[1]):
            raise ConfigError("rescale range must be positive and ordered")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation=(0.0, 0.0), flip_x=0.0, flip_y=0.0, scale=(1.0, 1.0))


def rotate_z(xyz: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    x, y = xyz[:, 0], xyz[:, 1]
    return np.column_stack([c * x - s * y, s * x + c * y, xyz[:, 2]])


def augment(scan: RawScan, cfg: AugmentConfig, rng: np.random.Generator) -> RawScan:
    """Rotate about z, flip x and/or y, rescale isotropically.

    Draw order is fixed (angle, flip x, flip y, scale) so a seeded generator
    reproduces the same transform.
    """
    angle = rng.uniform(*cfg.rotation)
    fx = rng.random() < cfg.flip_x
    fy = rng.random() < cfg.flip_y
    scale = rng.uniform(*cfg.scale)
    xyz = rotate_z(scan.xyz.astype(np.float64), angle)
    if fx:
        xyz[:, 0] = -xyz[:, 0]
    if fy:
        xyz[:, 1] = -xyz[:, 1]
    xyz *= scale
    points = np.column_stack([xyz.astype(np.float32), scan.intensity])
    labels = None if scan.labels is None else scan.labels.copy()
    return RawScan(points, labels)


# ----------------------------------------------------------- splits and batches


def dataset_split(items: Sequence[T], fractions: Sequence[float], seed: int = 0) -> list[list[T]]:
    """Shuffle once and cut into consecutive parts sized by ``fractions``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    n = len(items)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.concatenate([[0.0], np.cumsum(fr)]) * n).astype(int)
    bounds[-1] = n
    parts = [[items[i] for i in order[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]
    for f, part in zip(fr, parts):
        if f > 0 and not part:
            raise ConfigError(f"fraction {f} of {n} items gives an empty partition")
    return parts


def batch_iter(items: Sequence[T], batch_size: int, seed: Optional[int] = None) -> Iterator[list[T]]:
    """Consecutive batches (the last may be short); shuffled when ``seed`` is given."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if len(items) == 0:
        raise ConfigError("cannot batch an empty partition")
    order = np.arange(len(items)) if seed is None else np.random.default_rng(seed).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


# ------------------------------------------------------------------ disk layout


def save_dataset(scans: Sequence[RawScan], directory: PathLike) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    return [save_scan(scan, out / f"{i:06d}.bin") for i, scan in enumerate(scans)]


def scan_paths(directory: PathLike) -> list[Path]:
    paths = sorted(Path(directory).glob("*.bin"))
    if not paths:
        raise DataError(f"no .bin scans in {directory}")
    return paths


def load_dataset(directory: PathLike) -> list[RawScan]:
    return [load_scan(p) for p in scan_paths(directory)]
