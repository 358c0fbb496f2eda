"""Scan I/O, spherical projection, point <-> pixel mapping and pre-processing."""

from .mapping import cluster_mean, map_pixels_to_points, map_points_to_pixels
from .pipeline import MODES, input_features, preprocess_pipeline
from .projection import MIN_DEPTH, PixelClusterIndex, ProjectedScan, build_cluster_index, collate, project
from .scan import IGNORE_ID, RawScan, SensorConfig, label_path_for, load_scan, read_labels, save_scan, write_labels

__all__ = [
    "IGNORE_ID",
    "MIN_DEPTH",
    "MODES",
    "PixelClusterIndex",
    "ProjectedScan",
    "RawScan",
    "SensorConfig",
    "build_cluster_index",
    "cluster_mean",
    "collate",
    "input_features",
    "label_path_for",
    "load_scan",
    "map_pixels_to_points",
    "map_points_to_pixels",
    "preprocess_pipeline",
    "project",
    "read_labels",
    "save_scan",
    "write_labels",
]
