"""Multitask patch network: feature extractor, shape-aware selector,
feature refinement and the coordinate / normal decoder.

Patches are processed in batches of shape ``(B, n, .)`` with a boolean row
mask.  Row 0 of every patch is its center.  Masked rows (patch padding) take
no part in any neighbor graph, in top-K candidacy or in pooling, so a batch
may be truncated to its largest real-row count without changing any output.
"""

from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .geometry import PATCH_SIZE, Patch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
FEATURE_DIM = 128
HEAD_INIT_SCALE = 0.1


@dataclass
class NetConfig:
    M: int = PATCH_SIZE
    K: int = 256
    k1: int = 8
    k2: int = 16
    k3: int = 16
    k4: int = 10
    radius_frac: float = 0.05
    negative_slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("k1", "k2", "k3"):
            if not 1 <= getattr(self, name) <= self.M:
                raise ValueError(f"{name} must be in [1, M={self.M}]")
        if not 1 <= self.K <= self.M:
            raise ValueError(f"K must be in [1, M={self.M}]")
        if self.k4 < 1 or self.radius_frac <= 0:
            raise ValueError("k4 must be >= 1 and radius_frac > 0")

    @classmethod
    def from_dict(cls, values: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class PatchBatch:
    points: Tensor  # (B, n, 3) local frame
    normals: Tensor  # (B, n, 3) raw normals
    mask: Tensor  # (B, n) real rows
    centers: Tensor  # (B, 3) model units
    radius: Tensor  # (B,)

    @classmethod
    def from_patches(cls, patches, dtype=torch.float64, truncate: bool = True) -> "PatchBatch":
        n = max(p.real_count for p in patches) if truncate else max(p.size for p in patches)
        pts = np.stack([p.points[:n] for p in patches])
        nrm = np.stack([p.normals[:n] for p in patches])
        mask = np.stack([np.arange(n) < p.real_count for p in patches])
        return cls(
            points=torch.as_tensor(pts, dtype=dtype),
            normals=torch.as_tensor(nrm, dtype=dtype),
            mask=torch.as_tensor(mask),
            centers=torch.as_tensor(np.stack([p.center for p in patches]), dtype=dtype),
            radius=torch.as_tensor([p.radius for p in patches], dtype=dtype),
        )

    def translated_centers(self, t) -> "PatchBatch":
        t = torch.as_tensor(t, dtype=self.centers.dtype)
        return PatchBatch(self.points, self.normals, self.mask, self.centers + t, self.radius)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class CoarseFeatures:
    point_feats: Tensor  # (B, n, 128)
    normal_feats: Tensor
    global_point: Tensor  # (B, 128)
    global_normal: Tensor


@dataclass
class SelectorOutput:
    scores: Tensor  # (B, n), -inf on masked rows
    selected: Tensor  # (B, K') row indices
    selected_mask: Tensor  # (B, K') False where a padding row had to fill the slot
    degenerate: Tensor  # (B,) fewer than K real rows


@dataclass
class RefinedFeatures:
    point: Tensor  # (B, K', 384)
    normal: Tensor
    aug_point: Tensor  # (B, K', 128)
    aug_normal: Tensor


@dataclass
class ForwardOutput:
    p_hat: Tensor  # (B, 3) model units
    n_hat: Tensor  # (B, 3)
    displacement: Tensor  # (B, 3) local frame, norm <= 1
    scores: Tensor  # (B, n) raw scores, -inf on padding
    selected: Tensor
    selected_mask: Tensor
    normal_fallback: Tensor  # (B,) bool


# ---------------------------------------------------------------- graph ops


def pairwise_sq_dists(x: Tensor) -> Tensor:
    if x.shape[-1] <= 3:
        diff = x[..., :, None, :] - x[..., None, :, :]
        return (diff * diff).sum(-1)
    sq = (x * x).sum(-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * (x @ x.transpose(-1, -2))
    d = d.clamp_min(0.0)
    eye = torch.eye(x.shape[-2], dtype=torch.bool, device=x.device)
    return d.masked_fill(eye, 0.0)


def knn_graph(x: Tensor, mask: Tensor, k: int):
    """k nearest real rows for every row, ties by ascending index.

    When fewer than ``k`` real rows exist the remaining slots repeat the
    nearest one and are reported invalid in the returned mask.
    """
    with torch.no_grad():
        d = pairwise_sq_dists(x.detach())
        d = d.masked_fill(~mask[:, None, :], math.inf)
        d_sorted, order = torch.sort(d, dim=-1, stable=True)
        kk = min(k, d.shape[-1])
        idx, valid = order[..., :kk], torch.isfinite(d_sorted[..., :kk])
        if kk < k:
            fill = idx[..., :1].expand(*idx.shape[:-1], k - kk)
            idx = torch.cat([idx, fill], dim=-1)
            valid = torch.cat([valid, torch.zeros_like(fill, dtype=torch.bool)], dim=-1)
        idx = torch.where(valid, idx, idx[..., :1])
    return idx, valid


def gather_rows(x: Tensor, idx: Tensor) -> Tensor:
    """x: (B, n, C), idx: (B, ...) -> (B, ..., C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


def edgeconv(feats: Tensor, neighbor_idx: Tensor, h: nn.Module) -> Tensor:
    """Max over neighbors of ``h(concat(x_j, x_q - x_j))``.

    Accepts unbatched ``(n, C)`` / ``(n, k)`` inputs as well.
    """
    if feats.dim() == 2:
        return edgeconv(feats[None], neighbor_idx[None], h)[0]
    if _is_linear_leaky(h):
        # W[x; q - x] = (W_own - W_nbr) x + W_nbr q, and leaky-relu is monotone,
        # so the max can be taken on the pre-activations of gathered rows
        lin, act = h[0], h[1]
        c = feats.shape[-1]
        w_own, w_nbr = lin.weight[:, :c], lin.weight[:, c:]
        own = feats @ (w_own - w_nbr).T + lin.bias
        nbr = gather_rows(feats @ w_nbr.T, neighbor_idx).amax(dim=2)
        return act(own + nbr)
    k = neighbor_idx.shape[-1]
    nbrs = gather_rows(feats, neighbor_idx)
    own = feats[:, :, None, :].expand(-1, -1, k, -1)
    return h(torch.cat([own, nbrs - own], dim=-1)).amax(dim=2)


def _is_linear_leaky(h: nn.Module) -> bool:
    return (isinstance(h, nn.Sequential) and len(h) == 2 and isinstance(h[0], nn.Linear)
            and isinstance(h[1], nn.LeakyReLU))


def masked_max(x: Tensor, mask: Tensor, dim: int = 1) -> Tensor:
    fill = torch.finfo(x.dtype).min
    return x.masked_fill(~mask[..., None], fill).amax(dim=dim)


def geometric_priors(points: Tensor, normals: Tensor):
    """Angle between ``p_j - p_i`` and ``n_j`` and ``exp(-|p_j - p_i|^2)``.

    ``points`` are in the center's local frame, so ``p_i`` is the origin.
    The angle is 0 wherever the offset vanishes (the center itself).
    """
    qn = points.norm(dim=-1)
    nn_ = normals.norm(dim=-1)
    denom = qn * nn_
    cos = (points * normals).sum(-1) / torch.where(denom > 0, denom, torch.ones_like(denom))
    ang = torch.where(denom > 0, torch.arccos(cos.clamp(-1.0, 1.0)), torch.zeros_like(cos))
    dist = torch.exp(-(qn * qn))
    return ang[..., None], dist[..., None]


def top_k_rows(scores: Tensor, mask: Tensor, K: int):
    """Indices of the K largest scores among real rows (ties: lower index first).

    Padding rows compete at -inf, so they only appear once the real rows
    are exhausted.
    """
    key = scores.detach().masked_fill(~mask, -math.inf)
    order = torch.sort(key, dim=-1, descending=True, stable=True).indices
    sel = order[..., : min(K, key.shape[-1])]
    return sel, torch.gather(mask, -1, sel)


# ----------------------------------------------------------------- modules


def _mlp(*widths: int, slope: float, last_act: bool = True) -> nn.Sequential:
    layers = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if last_act or i < len(widths) - 2:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class MultiscaleExtractor(nn.Module):
    """Two Euclidean-scale EdgeConvs, MLP, then one EdgeConv in feature space."""

    def __init__(self, k3: int, slope: float, in_dim: int = 3, width: int = FEATURE_DIM):
        super().__init__()
        self.k3 = k3
        self.edge_small = _mlp(2 * in_dim, 64, slope=slope)
        self.edge_large = _mlp(2 * in_dim, 64, slope=slope)
        self.merge = _mlp(128, width, slope=slope)
        self.edge_feature = _mlp(2 * width, width, slope=slope)
        self.out = _mlp(width, width, slope=slope)

    def forward(self, x: Tensor, mask: Tensor, idx_small: Tensor, idx_large: Tensor):
        f1 = self.merge(torch.cat([edgeconv(x, idx_small, self.edge_small),
                                   edgeconv(x, idx_large, self.edge_large)], dim=-1))
        idx_feat, _ = knn_graph(f1, mask, self.k3)
        f = self.out(edgeconv(f1, idx_feat, self.edge_feature))
        return f, masked_max(f, mask)


class ShapeAwareSelector(nn.Module):
    def __init__(self, slope: float, width: int = FEATURE_DIM):
        super().__init__()
        self.fc_ang = _mlp(1, 32, slope=slope)
        self.fc_dist = _mlp(1, 32, slope=slope)
        self.fc_point = _mlp(width, 64, slope=slope)
        self.fc_normal = _mlp(width, 64, slope=slope)
        self.score = _mlp(192, 64, 1, slope=slope, last_act=False)

    def forward(self, ang, dist, f_point, f_normal) -> Tensor:
        z = torch.cat([self.fc_ang(ang), self.fc_dist(dist),
                       self.fc_point(f_point), self.fc_normal(f_normal)], dim=-1)
        return self.score(z)[..., 0]


class DisplacementHead(nn.Module):
    def __init__(self, slope: float):
        super().__init__()
        self.mlp = _mlp(3 * FEATURE_DIM, 256, 128, slope=slope)
        self.fc = nn.Linear(128, 3)

    def forward(self, pooled: Tensor) -> Tensor:
        v = self.fc(self.mlp(pooled))
        return squash_to_unit_ball(v)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, slope: float):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.act = nn.LeakyReLU(slope)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(self.act(self.fc1(x)))


class NormalHead(nn.Module):
    def __init__(self, slope: float, width: int = 256, blocks: int = 3):
        super().__init__()
        self.inp = _mlp(3 * FEATURE_DIM, width, slope=slope)
        self.blocks = nn.Sequential(*[ResidualBlock(width, slope) for _ in range(blocks)])
        self.fc = nn.Linear(width, 3)

    def forward(self, pooled: Tensor, fallback: Tensor):
        v = self.fc(self.blocks(self.inp(pooled)))
        norm = v.norm(dim=-1, keepdim=True)
        tiny = norm[..., 0] < 1e-12
        safe = torch.where(norm < 1e-12, torch.ones_like(norm), norm)
        n = torch.where(tiny[..., None], fallback.to(v.dtype), v / safe)
        return n, tiny


def squash_to_unit_ball(v: Tensor) -> Tensor:
    """Keep the direction of ``v`` and map its norm s to tanh(s)."""
    s = (v * v).sum(-1, keepdim=True).clamp_min(1e-24).sqrt()
    # a few ulps of headroom so rounding in the product never leaves the ball
    cap = 1.0 - 8 * torch.finfo(v.dtype).eps
    return v * (torch.tanh(s).clamp_max(cap) / s)


class PCDNF(nn.Module):
    """Joint denoising / normal filtering network for one batch of patches."""

    def __init__(self, cfg: Optional[NetConfig] = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        slope = self.cfg.negative_slope
        self.point_extractor = MultiscaleExtractor(self.cfg.k3, slope)
        self.normal_extractor = MultiscaleExtractor(self.cfg.k3, slope)
        self.selector = ShapeAwareSelector(slope)
        self.point_augment = _mlp(FEATURE_DIM, FEATURE_DIM, slope=slope)
        self.normal_augment = _mlp(FEATURE_DIM, FEATURE_DIM, slope=slope)
        self.coord_head = DisplacementHead(slope)
        self.normal_head = NormalHead(slope)
        self.debug = False
        self.reset_parameters(self.cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        gain = math.sqrt(2.0 / (1.0 + self.cfg.negative_slope ** 2))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = gain * math.sqrt(3.0 / module.in_features)
                    w = torch.rand(module.weight.shape, generator=gen, dtype=torch.float64)
                    module.weight.copy_((2 * w - 1) * bound)
                    module.bias.zero_()
            # start from the identity displacement and a small normal output
            self.coord_head.fc.weight.zero_()
            self.normal_head.fc.weight.mul_(HEAD_INIT_SCALE)

    def _check(self, name: str, t: Tensor) -> None:
        if self.debug and not torch.all(torch.isfinite(t)):
            raise FloatingPointError(f"non-finite values after {name}")

    # individual stages -------------------------------------------------

    def euclidean_graphs(self, batch: PatchBatch):
        cfg = self.cfg
        kmax = max(cfg.k1, cfg.k2, cfg.k4)
        idx, valid = knn_graph(batch.points, batch.mask, kmax)
        return {k: (idx[..., :k], valid[..., :k]) for k in (cfg.k1, cfg.k2, cfg.k4)}

    def extract_coarse(self, batch: PatchBatch, graphs=None) -> CoarseFeatures:
        graphs = graphs or self.euclidean_graphs(batch)
        i1, i2 = graphs[self.cfg.k1][0], graphs[self.cfg.k2][0]
        fp, gp = self.point_extractor(batch.points, batch.mask, i1, i2)
        fn, gn = self.normal_extractor(batch.normals, batch.mask, i1, i2)
        self._check("extractor", fp)
        self._check("extractor", fn)
        return CoarseFeatures(fp, fn, gp, gn)

    def score_points(self, batch: PatchBatch, coarse: CoarseFeatures) -> SelectorOutput:
        ang, dist = geometric_priors(batch.points, batch.normals)
        raw = self.selector(ang, dist, coarse.point_feats, coarse.normal_feats)
        self._check("selector", raw)
        sel, sel_mask = top_k_rows(raw, batch.mask, self.cfg.K)
        scores = raw.masked_fill(~batch.mask, -math.inf)
        degenerate = batch.mask.sum(-1) < self.cfg.K
        return SelectorOutput(scores, sel, sel_mask, degenerate)

    def augment(self, coarse: CoarseFeatures, sel: SelectorOutput, nbr_idx: Tensor, nbr_valid: Tensor):
        """Score-weighted k4-neighborhood aggregation for the selected rows."""
        k4 = self.cfg.k4
        w = torch.sigmoid(sel.scores.masked_fill(torch.isinf(sel.scores), 0.0))
        idx = torch.gather(nbr_idx, 1, sel.selected[..., None].expand(-1, -1, nbr_idx.shape[-1]))
        valid = torch.gather(nbr_valid, 1, sel.selected[..., None].expand(-1, -1, nbr_valid.shape[-1]))
        wq = gather_rows(w[..., None], idx)[..., 0] * valid.to(w.dtype)
        out = []
        for feats, mlp in ((coarse.point_feats, self.point_augment), (coarse.normal_feats, self.normal_augment)):
            own = gather_rows(feats, sel.selected)
            agg = (wq[..., None] * gather_rows(feats, idx)).sum(dim=2) / k4
            out.append(mlp(own + agg))
        return out[0], out[1]

    @staticmethod
    def fuse(aug_point: Tensor, aug_normal: Tensor, coarse: CoarseFeatures) -> RefinedFeatures:
        K = aug_point.shape[1]
        gp = coarse.global_point[:, None, :].expand(-1, K, -1)
        gn = coarse.global_normal[:, None, :].expand(-1, K, -1)
        return RefinedFeatures(
            point=torch.cat([aug_point, aug_normal, gp], dim=-1),
            normal=torch.cat([aug_normal, aug_point, gn], dim=-1),
            aug_point=aug_point,
            aug_normal=aug_normal,
        )

    def regress_displacement(self, refined_point: Tensor, selected_mask: Tensor) -> Tensor:
        return self.coord_head(masked_max(refined_point, selected_mask))

    def regress_normal(self, refined_normal: Tensor, selected_mask: Tensor, fallback: Tensor):
        return self.normal_head(masked_max(refined_normal, selected_mask), fallback)

    def forward(self, batch: PatchBatch) -> ForwardOutput:
        batch = canonical_normal_signs(batch)
        graphs = self.euclidean_graphs(batch)
        coarse = self.extract_coarse(batch, graphs)
        sel = self.score_points(batch, coarse)
        ap, an = self.augment(coarse, sel, *graphs[self.cfg.k4])
        refined = self.fuse(ap, an, coarse)
        self._check("refinement", refined.point)
        d_hat = self.regress_displacement(refined.point, sel.selected_mask)
        n_hat, fell_back = self.regress_normal(refined.normal, sel.selected_mask, batch.normals[:, 0])
        if torch.any(fell_back):
            logger.warning("%d patches produced a vanishing normal; kept the raw normal", int(fell_back.sum()))
        p_hat = batch.centers + batch.radius[:, None] * d_hat
        self._check("decoder", p_hat)
        self._check("decoder", n_hat)
        return ForwardOutput(p_hat, n_hat, d_hat, sel.scores, sel.selected, sel.selected_mask, fell_back)


def canonical_normal_signs(batch: PatchBatch) -> PatchBatch:
    """Flip raw normals to agree in sign with the center's raw normal.

    Raw normals are unoriented, so only their lines carry information.
    """
    dots = (batch.normals * batch.normals[:, :1]).sum(-1, keepdim=True)
    normals = torch.where(dots < 0, -batch.normals, batch.normals)
    return PatchBatch(batch.points, normals, batch.mask, batch.centers, batch.radius)


def forward_patch(model: PCDNF, patch: Patch):
    """Single-patch convenience: (p_hat, n_hat, scores over all M rows) as numpy."""
    dtype = next(model.parameters()).dtype
    batch = PatchBatch.from_patches([patch], dtype=dtype, truncate=False)
    with torch.no_grad():
        out = model(batch)
    return (out.p_hat[0].double().numpy(), out.n_hat[0].double().numpy(),
            out.scores[0].double().numpy())


# -------------------------------------------------------------- checkpoints


def _fixed_zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path, model: PCDNF, extra: Optional[Dict[str, str]] = None) -> None:
    """Named arrays in an .npz container with a format-version entry.

    Entries carry fixed timestamps so equal weights give equal bytes.
    """
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "net_config": asdict(model.cfg),
            "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    if extra:
        meta["extra"] = extra
    arrays["__format_version__"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(arrays):
            with zf.open(_fixed_zipinfo(name + ".npy"), "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name], order="C"), allow_pickle=False)


def load_checkpoint(path, dtype=torch.float64) -> PCDNF:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__format_version__"].reshape(-1)[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        meta = json.loads(str(data["__meta__"].reshape(-1)[0]))
        model = PCDNF(NetConfig.from_dict(meta["net_config"]))
        state = {}
        for name, shape in meta["shapes"].items():
            arr = data[name]
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: array {name} has shape {arr.shape}, expected {shape}")
            state[name] = torch.as_tensor(arr)
    model.load_state_dict(state)
    return model.to(dtype)
