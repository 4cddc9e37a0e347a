"""Whole-cloud denoising and normal filtering, optionally iterated."""

from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import PointCloud, estimate_normals_pca, extract_patch
from .network import PCDNF, PatchBatch

logger = logging.getLogger(__name__)

RAW_NORMAL_K = 16


def default_iterations(noise_level: float) -> int:
    return 1 if noise_level <= 0.01 else 2


def _model_dtype(model: PCDNF):
    return next(model.parameters()).dtype


def _run_patches(model: PCDNF, patches, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
    dtype = _model_dtype(model)
    p_out, n_out = [], []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            batch = PatchBatch.from_patches(patches[start:start + batch_size], dtype=dtype)
            out = model(batch)
            p_out.append(out.p_hat.double().numpy())
            n_out.append(out.n_hat.double().numpy())
    n_hat = np.concatenate(n_out)
    # float32 models leave normals a few ulps off unit length
    n_hat /= np.linalg.norm(n_hat, axis=1, keepdims=True)
    return np.concatenate(p_out), n_hat


def _with_raw_normals(cloud: PointCloud) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    normals, _ = estimate_normals_pca(cloud, k=RAW_NORMAL_K)
    return cloud.with_normals(normals)


def denoise_cloud(cloud: PointCloud, model: PCDNF, iterations: int = 1, seed: int = 0,
                  batch_size: int = 256, radius: Optional[float] = None) -> List[PointCloud]:
    """Denoise every point; each iteration's output is the next one's input.

    The patch radius is fixed from the input cloud for all iterations, and
    the filtered normals of one iteration serve as raw normals of the next.
    """
    if len(cloud) == 0:
        raise ValueError("cannot denoise an empty cloud")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    model.eval()
    current = _with_raw_normals(cloud)
    r = radius if radius is not None else model.cfg.radius_frac * cloud.diag
    if r <= 0:
        raise ValueError("patch radius is zero; the cloud has no spatial extent")
    outputs = []
    for it in range(iterations):
        tree = cKDTree(current.points)
        patches = [extract_patch(current, i, r, model.cfg.M, seed, tree=tree) for i in range(len(current))]
        p_hat, n_hat = _run_patches(model, patches, batch_size)
        current = PointCloud(p_hat, n_hat)
        outputs.append(current)
        logger.debug("iteration %d done (%d points)", it + 1, len(current))
    return outputs


def denoise_point(cloud: PointCloud, index: int, model: PCDNF, seed: int = 0,
                  radius: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Denoised position and filtered normal of a single point."""
    if not 0 <= index < len(cloud):
        raise IndexError(f"index {index} out of range for {len(cloud)} points")
    model.eval()
    cloud = _with_raw_normals(cloud)
    r = radius if radius is not None else model.cfg.radius_frac * cloud.diag
    patch = extract_patch(cloud, index, r, model.cfg.M, seed)
    p_hat, n_hat = _run_patches(model, [patch], 1)
    return p_hat[0], n_hat[0]
