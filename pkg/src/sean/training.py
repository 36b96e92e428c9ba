"""Segmentation losses, the poly learning-rate schedule, and the training loop."""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import save_checkpoint
from .determinism import seed_everything
from .errors import ConfigError, NumericError
from .fileio import atomic_write_text
from .network import AttentionConfig, FusionMode, HybridUnet
from .phantom import extract_slab

GDL_EPS = 1e-5


def _pair(probabilities, target):
    p = probabilities if isinstance(probabilities, torch.Tensor) else torch.as_tensor(
        np.asarray(probabilities), dtype=torch.float64)
    g = target if isinstance(target, torch.Tensor) else torch.as_tensor(
        np.asarray(target), dtype=p.dtype)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    return p, g.to(p.dtype)


def generalized_dice_loss(probabilities, target, eps: float = GDL_EPS):
    """Two-class generalized Dice loss with inverse-squared-volume class weights.

    ``probabilities`` are foreground probabilities in [0, 1]; ``target`` is
    a binary mask of the same shape. Returns a scalar in [0, 1] (a tensor
    for tensor inputs, a float otherwise).
    """
    p_fg, g_fg = _pair(probabilities, target)
    p_bg, g_bg = 1.0 - p_fg, 1.0 - g_fg
    w_fg = 1.0 / (g_fg.sum() + eps) ** 2
    w_bg = 1.0 / (g_bg.sum() + eps) ** 2
    numer = w_fg * (p_fg * g_fg).sum() + w_bg * (p_bg * g_bg).sum()
    denom = w_fg * (p_fg + g_fg).sum() + w_bg * (p_bg + g_bg).sum()
    loss = 1.0 - 2.0 * numer / denom
    return loss if isinstance(probabilities, torch.Tensor) else float(loss)


def combined_loss_terms(logits, target, w_dice: float = 1.0, w_ce: float = 1.0):
    """(total, dice_term, ce_term); cross-entropy is computed stably from logits."""
    z, g = _pair(logits, target)
    dice = generalized_dice_loss(torch.sigmoid(z), g)
    ce = F.binary_cross_entropy_with_logits(z, g)
    return w_dice * dice + w_ce * ce, dice, ce


def combined_loss(logits, target, w_dice: float = 1.0, w_ce: float = 1.0):
    total, _, _ = combined_loss_terms(logits, target, w_dice, w_ce)
    return total if isinstance(logits, torch.Tensor) else float(total)


def poly_lr(base_lr: float, iteration: int, total_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration/total_iter) ** power."""
    if total_iter <= 0:
        raise ConfigError("total_iter must be > 0")
    if not 0 <= iteration <= total_iter:
        raise ValueError(f"iteration {iteration} outside [0, {total_iter}]")
    return base_lr * (1.0 - iteration / total_iter) ** power


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    epochs: int = 150
    poly_power: float = 0.9
    w_dice: float = 1.0
    w_ce: float = 1.0
    batch_size: int = 8
    seed: int = 0
    fusion: str = "sea"
    base_width: int = 16
    temporal_radius: int = 1
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    checkpoint_every: int = 0
    data_dir: str = ""
    out_dir: str = ""

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.poly_power <= 0:
            raise ConfigError("train.poly_power must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        FusionMode(self.fusion)


class SegCase:
    """One aligned, preprocessed volume with its aligned mask."""

    def __init__(self, voxels: np.ndarray, mask: np.ndarray, case_id: str = ""):
        if voxels.shape != mask.shape:
            raise ValueError("voxels and mask must share a shape")
        self.voxels = voxels
        self.mask = mask.astype(np.uint8)
        self.case_id = case_id
        self.lesion_slices = [i for i in range(mask.shape[0]) if mask[i].any()]
        self.clean_slices = [i for i in range(mask.shape[0]) if not mask[i].any()]


class SliceSampler:
    """Per epoch: every lesion-bearing center slice once, plus an equal
    per-volume count of random lesion-free slices."""

    def __init__(self, cases: Sequence[SegCase], seed: int):
        self.cases = list(cases)
        self.seed = seed
        self.samples_per_epoch = sum(
            len(c.lesion_slices) * (2 if c.clean_slices else 1) for c in self.cases
        )
        if sum(len(c.lesion_slices) for c in self.cases) == 0:
            raise ConfigError("training dataset has no lesion-bearing slices")

    def epoch(self, epoch_index: int) -> list[tuple[int, int]]:
        rng = np.random.default_rng([self.seed, epoch_index])
        pairs: list[tuple[int, int]] = []
        for ci, case in enumerate(self.cases):
            pairs.extend((ci, si) for si in case.lesion_slices)
            if case.clean_slices and case.lesion_slices:
                draws = rng.integers(0, len(case.clean_slices), size=len(case.lesion_slices))
                pairs.extend((ci, case.clean_slices[d]) for d in draws)
        order = rng.permutation(len(pairs))
        return [pairs[i] for i in order]


def build_model(cfg: TrainConfig) -> HybridUnet:
    return HybridUnet(
        base_width=cfg.base_width,
        temporal_radius=cfg.temporal_radius,
        fusion=FusionMode(cfg.fusion),
        attention=cfg.attention,
    )


def train_segmentation(cfg: TrainConfig, cases: Sequence[SegCase], out_dir=None):
    """Train a segmentation model on aligned, preprocessed cases.

    Returns (model, log_rows) where each log row is
    (iter, lr, loss, dice_term, ce_term). Deterministic for a fixed config
    and seed. Aborts with NumericError (after writing a diagnostic
    checkpoint when ``out_dir`` is given) if the loss stops being finite.
    """
    cfg.validate()
    seed_everything(cfg.seed)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=cfg.betas)
    sampler = SliceSampler(cases, cfg.seed)
    iters_per_epoch = math.ceil(sampler.samples_per_epoch / cfg.batch_size)
    total_iter = cfg.epochs * iters_per_epoch

    radius = cfg.temporal_radius
    log: list[tuple[int, float, float, float, float]] = []
    it = 0
    model.train()
    for epoch in range(cfg.epochs):
        schedule = sampler.epoch(epoch)
        for start in range(0, len(schedule), cfg.batch_size):
            chunk = schedule[start:start + cfg.batch_size]
            slabs = np.stack([extract_slab(sampler.cases[ci].voxels, si, radius) for ci, si in chunk])
            targets = np.stack([sampler.cases[ci].mask[si] for ci, si in chunk])
            x = torch.from_numpy(slabs).float()
            g = torch.from_numpy(targets).float()

            lr = poly_lr(cfg.base_lr, it, total_iter, cfg.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr

            logits = model(x)[:, 0]
            total, dice, ce = combined_loss_terms(logits, g, cfg.w_dice, cfg.w_ce)
            if not torch.isfinite(total):
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "seg.diverged.ckpt", "segmentation",
                                    model.config_dict(), model.state_dict())
                raise NumericError(f"segmentation loss became non-finite at iteration {it}")
            opt.zero_grad()
            total.backward()
            opt.step()
            log.append((it, lr, float(total), float(dice), float(ce)))
            it += 1
            if cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0 and out_dir is not None:
                save_checkpoint(Path(out_dir) / f"seg.iter{it:06d}.ckpt", "segmentation",
                                model.config_dict(), model.state_dict())

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "seg.ckpt", "segmentation", model.config_dict(), model.state_dict())
        write_train_log_csv(out_dir / "train_log.csv", log)
    return model, log


def write_train_log_csv(path, log) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["iter", "lr", "loss", "dice_term", "ce_term"])
    for it, lr, loss, dice, ce in log:
        writer.writerow([it, repr(lr), repr(loss), repr(dice), repr(ce)])
    atomic_write_text(path, buf.getvalue())
