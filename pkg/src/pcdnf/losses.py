"""Joint training objective: bilateral point-denoise loss with repulsion,
normal-filter loss and the selector-weighted orthogonality loss.

All terms are written for a batch of patches.  Ground-truth patches of
different sizes are padded to a common row count and carry a row mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from .geometry import PATCH_SIZE, PointCloud

COS_15 = math.cos(math.radians(15.0))


@dataclass
class LossConfig:
    lambda1: float = 100.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    alpha: float = 0.97
    theta_angle_deg: float = 15.0
    sigma_phi: float = 0.5  # in patch-radius units

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) <= 0:
            raise ValueError("loss weights must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.sigma_phi <= 0:
            raise ValueError("sigma_phi must be positive")


@dataclass
class GroundTruthPatch:
    """Clean neighborhood of a denoised point (model units), possibly batched."""

    points: Tensor  # (..., m, 3)
    normals: Tensor  # (..., m, 3)
    center_normal: Tensor  # (..., 3)
    radius: Tensor  # (...,)
    mask: Optional[Tensor] = None  # (..., m)

    def row_mask(self) -> Tensor:
        if self.mask is None:
            return torch.ones(self.points.shape[:-1], dtype=torch.bool)
        return self.mask

    def to(self, dtype) -> "GroundTruthPatch":
        return GroundTruthPatch(self.points.to(dtype), self.normals.to(dtype),
                                self.center_normal.to(dtype), self.radius.to(dtype),
                                self.mask)


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def phi(d: Tensor, sigma: Tensor) -> Tensor:
    return torch.exp(-(d * d) / (sigma * sigma))


def theta(n_i: Tensor, n_j: Tensor, angle_deg: float = 15.0) -> Tensor:
    denom = 1.0 - math.cos(math.radians(angle_deg))
    return torch.exp(-(1.0 - (n_i * n_j).sum(-1)) / denom)


def _first_argmax(x: Tensor, mask: Tensor) -> Tensor:
    return x.detach().masked_fill(~mask, -math.inf).argmax(dim=-1, keepdim=True)


def point_denoise_loss(p_hat, gt: GroundTruthPatch, cfg: LossConfig = LossConfig(), return_fallback: bool = False):
    """Bilateral projection distance plus the (1 - alpha) repulsion term.

    Projections are weighted by a Gaussian of the distance (bandwidth
    ``cfg.sigma_phi * radius``) and by the normal-similarity kernel against
    the normal of the clean point nearest to ``p_hat``.  If all weights
    underflow, the unweighted mean of the projections is used instead.
    """
    p_hat = _t(p_hat, gt.points)
    mask = gt.row_mask()
    m = mask.to(p_hat.dtype)
    diff = p_hat[..., None, :] - gt.points
    dist = diff.norm(dim=-1)
    proj = (diff * gt.normals).sum(-1).abs()
    sigma = cfg.sigma_phi * gt.radius
    weight = phi(dist, sigma[..., None]) * theta(gt.center_normal[..., None, :], gt.normals, cfg.theta_angle_deg) * m
    wsum = weight.sum(-1)
    fallback = wsum < 1e-12
    bilateral = (proj * weight).sum(-1) / torch.where(fallback, torch.ones_like(wsum), wsum)
    plain = (proj * m).sum(-1) / m.sum(-1)
    projection = torch.where(fallback, plain, bilateral)
    repulsion = torch.gather(dist, -1, _first_argmax(dist, mask))[..., 0]
    loss = cfg.alpha * projection + (1.0 - cfg.alpha) * repulsion
    if return_fallback:
        return loss, fallback
    return loss


def normal_filter_loss(n_hat, n_bar) -> Tensor:
    n_hat = _t(n_hat)
    n_bar = _t(n_bar, n_hat)
    d = n_hat - n_bar
    return (d * d).sum(-1)


def orthogonality_loss(p_hat, n_hat, gt: GroundTruthPatch, weights) -> Tensor:
    """Sum over ground-truth rows of ``(w_j |(p_hat - p_j) . n_hat|)^2``."""
    p_hat = _t(p_hat, gt.points)
    n_hat = _t(n_hat, gt.points)
    weights = _t(weights, gt.points)
    proj = ((p_hat[..., None, :] - gt.points) * n_hat[..., None, :]).sum(-1).abs()
    term = (weights * proj) ** 2
    return (term * gt.row_mask().to(term.dtype)).sum(-1)


@dataclass
class LossTerms:
    total: Tensor
    point: Tensor
    normal: Tensor
    ortho: Tensor


def joint_loss(p_hat, n_hat, gt: GroundTruthPatch, weights, cfg: LossConfig = LossConfig()) -> LossTerms:
    lp = point_denoise_loss(p_hat, gt, cfg)
    ln = normal_filter_loss(n_hat, gt.center_normal)
    lo = orthogonality_loss(p_hat, n_hat, gt, weights)
    total = cfg.lambda1 * lp + cfg.lambda2 * ln + cfg.lambda3 * lo
    return LossTerms(total, lp, ln, lo)


# ------------------------------------------------------ ground-truth patches


def build_gt_patches(clean: PointCloud, tree: cKDTree, p_hat: np.ndarray, radius: np.ndarray,
                     cap: int = PATCH_SIZE, orient=None, centers=None) -> GroundTruthPatch:
    """Clean neighborhoods around the (detached) denoised points.

    Each holds up to ``cap`` nearest clean points within ``radius`` of its
    center; when none fall inside, the single nearest clean point is used.
    The center is ``p_hat`` unless ``centers`` is given.  The target normal
    is always that of the clean point nearest ``p_hat``.  ``orient`` (raw
    center normals, optional) flips each patch's normals so the target
    agrees in sign with the input normal.
    """
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=np.float64))
    query = p_hat if centers is None else np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(p_hat),))
    dist, idx = tree.query(query, k=min(cap, len(clean)))
    dist = dist.reshape(len(p_hat), -1)
    idx = idx.reshape(len(p_hat), -1)
    inside = dist < radius[:, None]
    inside[:, 0] = True
    m = int(inside.sum(1).max())
    idx, inside = idx[:, :m], inside[:, :m]
    pts = clean.points[idx]
    nrm = clean.normals[idx].copy()
    if centers is None:
        center_n = clean.normals[idx[:, 0]].copy()
    else:
        center_n = clean.normals[tree.query(p_hat)[1]].copy()
    if orient is not None:
        sign = np.where(np.einsum("ij,ij->i", center_n, np.asarray(orient)) < 0, -1.0, 1.0)
        nrm *= sign[:, None, None]
        center_n *= sign[:, None]
    return GroundTruthPatch(
        points=torch.as_tensor(pts),
        normals=torch.as_tensor(nrm),
        center_normal=torch.as_tensor(center_n),
        radius=torch.as_tensor(radius.copy()),
        mask=torch.as_tensor(inside),
    )


def selector_weights_on_gt(gt: GroundTruthPatch, selected_points: Tensor, selected_weights: Tensor,
                           selected_mask: Tensor) -> Tensor:
    """Carry selector weights from noisy rows onto ground-truth rows.

    Every selected noisy point is matched to its nearest ground-truth row;
    a row's weight is the largest weight mapped onto it, 0 when none is.
    """
    with torch.no_grad():
        d = torch.cdist(selected_points.detach().to(gt.points.dtype), gt.points)
        d = d.masked_fill(~gt.row_mask()[:, None, :], math.inf)
        target = d.argmin(dim=-1)
    w = selected_weights * selected_mask.to(selected_weights.dtype)
    out = torch.zeros(gt.points.shape[:-1], dtype=w.dtype)
    return out.scatter_reduce(-1, target, w, reduce="amax", include_self=True)
