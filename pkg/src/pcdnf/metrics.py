"""Chamfer distance, point-to-surface distance, normal RMSE and error maps."""

from __future__ import annotations

import csv
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .dataset import ShapeSpec, generate_shape, shape_diagonal, surface_distance, write_xyz
from .geometry import PointCloud

REPORT_VERSION = 1
REPORT_COLUMNS = ("shape", "noise_level", "iteration", "CD", "P2S", "RMSE_deg")
CD_FORMULA = "CD = 0.5*mean_a min_b |a-b|^2 + 0.5*mean_b min_a |a-b|^2, both clouds scaled by 1/diag(B)"
DEFAULT_ERROR_CAP = 30.0


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)


def chamfer_distance(A, B) -> float:
    """Symmetric mean squared nearest-neighbor distance, in units of diag(B)."""
    a, b = _points(A), _points(B)
    diag = float(np.linalg.norm(b.max(axis=0) - b.min(axis=0)))
    if diag <= 0:
        diag = 1.0
    a, b = a / diag, b / diag
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * float(np.mean(d_ab ** 2)) + 0.5 * float(np.mean(d_ba ** 2))


def point_to_surface(A, ref: Union[PointCloud, ShapeSpec, str]) -> float:
    """Mean distance from A to a reference surface, in units of the reference diagonal.

    ``ref`` may be an analytic shape (a ShapeSpec or kind name, closed-form
    distances) or a dense reference cloud (nearest-point distances).
    """
    a = _points(A)
    if isinstance(ref, (ShapeSpec, str)):
        kind = ref.kind if isinstance(ref, ShapeSpec) else ref
        return float(np.mean(surface_distance(kind, a))) / shape_diagonal(kind)
    ref_pts = _points(ref)
    diag = float(np.linalg.norm(ref_pts.max(axis=0) - ref_pts.min(axis=0))) or 1.0
    d, _ = cKDTree(ref_pts).query(a)
    return float(np.mean(d)) / diag


def dense_reference(spec: ShapeSpec, factor: int = 10) -> PointCloud:
    """Reference cloud ``factor`` times denser than ``spec``."""
    return generate_shape(ShapeSpec(spec.kind, spec.n_points * factor, spec.seed + 7919))


def angular_errors(estimated, truth) -> np.ndarray:
    """Unoriented per-point angle in degrees."""
    est = np.asarray(estimated, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    # atan2 form of arccos(|cos|): same angle, but no precision loss near 0
    dot = np.abs(np.einsum("ij,ij->i", est, tru))
    cross = np.linalg.norm(np.cross(est, tru), axis=1)
    return np.degrees(np.arctan2(cross, dot))


def normal_rmse(estimated, truth) -> float:
    theta = angular_errors(estimated, truth)
    return float(np.sqrt(np.mean(theta ** 2)))


def error_colors(errors, cap: float = DEFAULT_ERROR_CAP) -> np.ndarray:
    """Linear blue (0) to red (cap) colormap, RGB in [0, 1]."""
    t = np.clip(np.asarray(errors, dtype=np.float64) / cap, 0.0, 1.0)
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=1)


def export_error_map(cloud: PointCloud, errors, path, cap: float = DEFAULT_ERROR_CAP) -> None:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.shape != (len(cloud),):
        raise ValueError(f"expected {len(cloud)} errors, got shape {errors.shape}")
    write_xyz(path, PointCloud(cloud.points), extra=error_colors(errors, cap))


def corresponding_normals(pred: PointCloud, clean: PointCloud) -> np.ndarray:
    """Clean normals matched to pred rows: by index when sizes agree, else nearest point."""
    if len(pred) == len(clean):
        return clean.normals
    _, idx = cKDTree(clean.points).query(pred.points)
    return clean.normals[idx]


def write_report(path, rows: Iterable[Sequence], config_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={REPORT_VERSION}\n")
        fh.write(f"# {CD_FORMULA}\n")
        fh.write("# RMSE_deg: unoriented normal angle error, degrees\n")
        for line in config_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
