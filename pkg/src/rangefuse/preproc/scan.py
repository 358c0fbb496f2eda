"""Scan containers, sensor geometry and the KITTI-style binary format."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..errors import ConfigError, DataError, FormatError

IGNORE_ID = 255
PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class SensorConfig:
    """Range-image geometry. Field-of-view angles are in radians, both positive."""

    height: int
    width: int
    fov_up: float
    fov_down: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"range image must be at least 1x1, got {self.height}x{self.width}")
        if self.fov_up + self.fov_down <= 0:
            raise ConfigError("vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def beams32(cls, height: int = 32, width: int = 480) -> "SensorConfig":
        return cls(height, width, math.radians(10.0), math.radians(30.0))

    @classmethod
    def beams64(cls, height: int = 64, width: int = 512) -> "SensorConfig":
        return cls(height, width, math.radians(3.0), math.radians(25.0))

    @classmethod
    def desk(cls, height: int = 16, width: int = 240) -> "SensorConfig":
        return cls(height, width, math.radians(10.0), math.radians(30.0))


@dataclass
class RawScan:
    """N points as float32 rows (x, y, z, intensity) plus optional class ids."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DataError(f"points must be N x 4, got {pts.shape}")
        if pts.shape[0] < 1:
            raise DataError("a scan needs at least one point")
        if not np.all(np.isfinite(pts[:, :3])):
            raise DataError("point coordinates must be finite")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise DataError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
            self.labels = lab

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def label_path_for(path: PathLike) -> Path:
    return Path(path).with_suffix(".label")


def load_scan(path: PathLike, labels: Optional[PathLike] = None) -> RawScan:
    """Read little-endian float32 (x, y, z, intensity) quadruples.

    A companion ``.label`` file (little-endian uint32 per point, class in the
    low 16 bits) is read when present, or from ``labels`` when given.
    """
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 16:
        raise FormatError(f"{path}: {len(raw)} bytes is not a positive multiple of 16")
    points = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    lab_file = Path(labels) if labels is not None else label_path_for(path)
    lab = None
    if lab_file.exists():
        lab = read_labels(lab_file)
        if lab.shape[0] != points.shape[0]:
            raise FormatError(f"{lab_file}: {lab.shape[0]} labels for {points.shape[0]} points")
    try:
        return RawScan(points, lab)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_labels(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: label file length {len(raw)} is not a multiple of 4")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.int64)


def write_labels(labels: np.ndarray, path: PathLike) -> None:
    Path(path).write_bytes(np.asarray(labels).astype("<u4").tobytes())


def save_scan(scan: RawScan, path: PathLike) -> Path:
    """Write the scan (and its labels, if any) next to each other."""
    path = Path(path)
    path.write_bytes(scan.points.astype("<f4").tobytes())
    if scan.labels is not None:
        write_labels(scan.labels, label_path_for(path))
    return path
