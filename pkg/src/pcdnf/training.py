"""Patch-sampling training loop with momentum SGD and a geometric lr decay."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from .dataset import NoisySample
from .geometry import extract_patch
from .losses import (GroundTruthPatch, LossConfig, build_gt_patches, joint_loss,
                     selector_weights_on_gt)
from .network import PCDNF, NetConfig, PatchBatch, save_checkpoint

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr_start: float = 1e-4
    lr_end: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 64
    centers_per_cloud: int = 256
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str = ""
    dtype: str = "float32"
    gt_center: str = "denoised"

    def __post_init__(self):
        if self.gt_center not in ("input", "denoised"):
            raise ValueError("gt_center must be 'input' or 'denoised'")
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Geometric interpolation from ``lr_start`` (first epoch) to ``lr_end`` (last)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (cfg.epochs - 1))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    L_point: float
    L_normal: float
    L_ortho: float


@dataclass
class History:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: List[float] = field(default_factory=list)

    def write_csv(self, path, config_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in config_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "loss", "L_point", "L_normal", "L_ortho"])
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.L_point),
                                 repr(r.L_normal), repr(r.L_ortho)])


def _stack_gt(parts: List[GroundTruthPatch]) -> GroundTruthPatch:
    m = max(p.points.shape[1] for p in parts)

    def pad(t, value=0.0):
        extra = m - t.shape[1]
        if extra == 0:
            return t
        shape = (t.shape[0], extra) + tuple(t.shape[2:])
        return torch.cat([t, torch.full(shape, value, dtype=t.dtype)], dim=1)

    return GroundTruthPatch(
        points=torch.cat([pad(p.points) for p in parts]),
        normals=torch.cat([pad(p.normals) for p in parts]),
        center_normal=torch.cat([p.center_normal for p in parts]),
        radius=torch.cat([p.radius for p in parts]),
        mask=torch.cat([pad(p.row_mask(), False) for p in parts]),
    )


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


class Trainer:
    """Holds the model, optimizer and per-sample search structures.

    The parameter update is a single serialized step per batch.
    """

    def __init__(self, model: PCDNF, dataset: Sequence[NoisySample], cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None):
        if not dataset:
            raise ValueError("training needs a nonempty dataset")
        self.model = model.to(cfg.torch_dtype)
        self.dataset = list(dataset)
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        net = model.cfg
        self.radius = [net.radius_frac * s.noisy.diag for s in self.dataset]
        self.noisy_trees = [cKDTree(s.noisy.points) for s in self.dataset]
        self.clean_trees = [cKDTree(s.clean.points) for s in self.dataset]
        for s in self.dataset:
            if s.noisy.normals is None or s.clean.normals is None:
                raise ValueError(f"sample {s.name!r} needs raw noisy normals and clean normals")
        self.optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr_start, momentum=cfg.momentum)

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def batch_loss(self, items: Sequence[Tuple[int, int]], patch_seed: int):
        net = self.model.cfg
        patches = [extract_patch(self.dataset[s].noisy, c, self.radius[s], net.M, patch_seed,
                                 tree=self.noisy_trees[s]) for s, c in items]
        batch = PatchBatch.from_patches(patches, dtype=self.cfg.torch_dtype)
        out = self.model(batch)

        p_hat = out.p_hat.detach().double().numpy()
        anchors = batch.centers.double().numpy() if self.cfg.gt_center == "input" else None
        order, parts = [], []
        sample_ids = np.array([s for s, _ in items])
        for s in np.unique(sample_ids):
            rows = np.flatnonzero(sample_ids == s)
            order.extend(rows.tolist())
            parts.append(build_gt_patches(self.dataset[s].clean, self.clean_trees[s], p_hat[rows],
                                          self.radius[s], cap=net.M,
                                          orient=np.stack([patches[i].normals[0] for i in rows]),
                                          centers=None if anchors is None else anchors[rows]))
        gt = _stack_gt(parts)
        inverse = np.argsort(order)
        gt = GroundTruthPatch(gt.points[inverse], gt.normals[inverse], gt.center_normal[inverse],
                              gt.radius[inverse], gt.mask[inverse]).to(self.cfg.torch_dtype)

        sel_local = torch.gather(batch.points, 1, out.selected[..., None].expand(-1, -1, 3))
        sel_model = batch.centers[:, None, :] + batch.radius[:, None, None] * sel_local
        sel_w = torch.sigmoid(torch.gather(out.scores, 1, out.selected).masked_fill(~out.selected_mask, 0.0))
        w_gt = selector_weights_on_gt(gt, sel_model, sel_w, out.selected_mask)
        return joint_loss(out.p_hat, out.n_hat, gt, w_gt, self.loss_cfg)

    def step(self, items: Sequence[Tuple[int, int]], patch_seed: int = 0, label: str = ""):
        terms = self.batch_loss(items, patch_seed)
        means = {name: getattr(terms, name).mean() for name in ("total", "point", "normal", "ortho")}
        for name, value in means.items():
            if not torch.isfinite(value):
                raise TrainingError(f"non-finite {name} loss in batch {label or patch_seed}")
        self.optimizer.zero_grad(set_to_none=True)
        means["total"].backward()
        self.optimizer.step()
        return {k: float(v.detach()) for k, v in means.items()}

    def epoch_items(self, epoch: int) -> List[Tuple[int, int]]:
        rng = np.random.default_rng(_derive_seed(self.cfg.seed, epoch, 17))
        items = []
        for s, sample in enumerate(self.dataset):
            n = len(sample.noisy)
            centers = rng.choice(n, size=min(self.cfg.centers_per_cloud, n), replace=False)
            items.extend((s, int(c)) for c in centers)
        perm = rng.permutation(len(items))
        return [items[i] for i in perm]

    def fit(self, callback: Optional[Callable[[EpochRecord], None]] = None) -> History:
        history = History()
        cfg = self.cfg
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            self.set_lr(lr)
            items = self.epoch_items(epoch)
            sums = np.zeros(4)
            steps = 0
            t0 = time.perf_counter()
            for start in range(0, len(items), cfg.batch_size):
                label = f"epoch {epoch} step {steps}"
                vals = self.step(items[start:start + cfg.batch_size], _derive_seed(cfg.seed, epoch, steps), label)
                sums += [vals["total"], vals["point"], vals["normal"], vals["ortho"]]
                history.steps.append(vals["total"])
                steps += 1
            mean = sums / max(steps, 1)
            rec = EpochRecord(epoch + 1, lr, *map(float, mean))
            history.epochs.append(rec)
            logger.info("epoch %d lr %.3g loss %.5g (point %.4g normal %.4g ortho %.4g) %.1fs",
                        rec.epoch, lr, rec.loss, rec.L_point, rec.L_normal, rec.L_ortho,
                        time.perf_counter() - t0)
            if callback:
                callback(rec)
            if cfg.checkpoint_every and cfg.checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(f"{cfg.checkpoint_path}.epoch{epoch + 1}", self.model)
        return history


def train(dataset: Sequence[NoisySample], cfg: TrainConfig, net_cfg: Optional[NetConfig] = None,
          loss_cfg: Optional[LossConfig] = None, model: Optional[PCDNF] = None,
          callback=None) -> Tuple[PCDNF, History]:
    """Train a fresh (or given) network on the samples; returns it with its history."""
    torch.manual_seed(cfg.seed)
    model = model if model is not None else PCDNF(net_cfg or NetConfig())
    trainer = Trainer(model, dataset, cfg, loss_cfg)
    history = trainer.fit(callback)
    return trainer.model, history

