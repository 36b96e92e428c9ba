"""Symmetry-based in-plane rigid alignment.

Images are indexed (row y, column x) with x increasing to the right.
``RigidParams(theta, tx, ty)`` denotes a rotation by ``theta`` radians
about the image center (matrix [[cos, -sin], [sin, cos]] acting on (x, y)
offsets) followed by a translation of ``(tx, ty)`` pixels. Warping samples
the source image on the inverse-transformed grid, so the output content
appears transformed by the forward parameters.

The alignment network regresses the correcting transform for a brain
slice: applying the predicted parameters makes the slice bilaterally
symmetric about the vertical midline. It is trained without labels from a
two-term objective: the L1 distance between the warped slice and its
horizontal flip (symmetry term) plus the L1 distance between the
round-trip warped slice and the original (restoration term, which stops
the network from shoving tissue out of the frame).
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .determinism import seed_everything
from .errors import ConfigError, DataError, NumericError


@dataclass(frozen=True)
class RigidParams:
    """In-plane rigid transform: rotation (radians) then shift (pixels)."""

    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        for name in ("theta", "tx", "ty"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite rigid parameter {name}")
        if abs(self.theta) > math.pi + 1e-9:
            raise ValueError(f"|theta| must be <= pi, got {self.theta}")

    @classmethod
    def identity(cls) -> "RigidParams":
        return cls(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.tx, self.ty], dtype=np.float64)


def invert_params(alpha: RigidParams) -> RigidParams:
    """Parameters of the inverse transform: theta' = -theta, t' = -R(-theta) t."""
    c, s = math.cos(alpha.theta), math.sin(alpha.theta)
    return RigidParams(-alpha.theta, -(c * alpha.tx + s * alpha.ty), s * alpha.tx - c * alpha.ty)


def rigid_matrix(alpha: RigidParams, image_size: tuple[int, int]) -> np.ndarray:
    """2x3 forward affine matrix in the normalized [-1, 1] grid convention.

    ``image_size`` is (H, W). Pixel-space rotation about the center maps to
    normalized coordinates with aspect factors; for square images the
    rotation block is the plain [[cos, -sin], [sin, cos]].
    """
    h, w = image_size
    if h < 2 or w < 2:
        raise ValueError("image_size must be at least 2x2")
    sx, sy = 2.0 / (w - 1), 2.0 / (h - 1)
    c, s = math.cos(alpha.theta), math.sin(alpha.theta)
    return np.array(
        [
            [c, -s * sx / sy, alpha.tx * sx],
            [s * sy / sx, c, alpha.ty * sy],
        ],
        dtype=np.float64,
    )


def _params_tensor(alpha, device=None, dtype=None) -> torch.Tensor:
    if isinstance(alpha, RigidParams):
        return torch.tensor([alpha.theta, alpha.tx, alpha.ty], device=device, dtype=dtype)
    t = torch.as_tensor(alpha, device=device, dtype=dtype)
    if t.shape[-1] != 3:
        raise ValueError("rigid parameters must have 3 components")
    return t


def _invert_params_tensor(params: torch.Tensor) -> torch.Tensor:
    theta, tx, ty = params.unbind(-1)
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([-theta, -(c * tx + s * ty), s * tx - c * ty], dim=-1)


def _source_coords(params: torch.Tensor, h: int, w: int):
    """Inverse-transformed sampling coordinates for each output pixel."""
    theta, tx, ty = params.unbind(-1)  # (B,)
    c, s = torch.cos(theta), torch.sin(theta)
    # inverse: R(-theta) applied to centered coords, then inverse translation
    txi = -(c * tx + s * ty)
    tyi = s * tx - c * ty
    ys = torch.arange(h, device=params.device, dtype=params.dtype)
    xs = torch.arange(w, device=params.device, dtype=params.dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xo, yo = xx - cx, yy - cy
    c, s = c[:, None, None], s[:, None, None]
    x_src = c * xo + s * yo + txi[:, None, None] + cx
    y_src = -s * xo + c * yo + tyi[:, None, None] + cy
    return x_src, y_src


def _bilinear_sample(images: torch.Tensor, x_src: torch.Tensor, y_src: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling with zero padding outside the image.

    Exact at integer coordinates, so the identity transform reproduces the
    input with no interpolation error. Differentiable in both the images
    and the sampling coordinates.
    """
    b, ch, h, w = images.shape
    x0, y0 = torch.floor(x_src), torch.floor(y_src)
    wx1, wy1 = x_src - x0, y_src - y0
    wx0, wy0 = 1.0 - wx1, 1.0 - wy1
    flat = images.reshape(b, ch, h * w)
    out = torch.zeros_like(images)
    for yi, wy in ((y0, wy0), (y0 + 1, wy1)):
        for xi, wx in ((x0, wx0), (x0 + 1, wx1)):
            valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            xc = xi.clamp(0, w - 1).long()
            yc = yi.clamp(0, h - 1).long()
            idx = (yc * w + xc).reshape(b, 1, h * w).expand(b, ch, h * w)
            vals = flat.gather(2, idx).reshape(b, ch, h, w)
            out = out + vals * (wx * wy * valid.to(images.dtype)).unsqueeze(1)
    return out


def warp_rigid(images: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Warp a batch of images (B, C, H, W) by per-item rigid params (B, 3) or (3,)."""
    if images.dim() != 4:
        raise ValueError("expected images of shape (B, C, H, W)")
    params = params.to(images.dtype)
    if params.dim() == 1:
        params = params.unsqueeze(0)
    if params.shape[0] == 1 and images.shape[0] > 1:
        params = params.expand(images.shape[0], 3)
    x_src, y_src = _source_coords(params, images.shape[2], images.shape[3])
    return _bilinear_sample(images, x_src, y_src)


def apply_rigid(image, alpha):
    """Warp a single 2D image by ``alpha``; numpy in, numpy out (or torch/torch).

    Torch inputs keep their autograd graph, so the result is differentiable
    with respect to both the image and tensor-valued parameters.
    """
    if isinstance(image, torch.Tensor):
        if image.dim() != 2:
            raise ValueError("expected a 2D image")
        params = _params_tensor(alpha, device=image.device, dtype=image.dtype)
        return warp_rigid(image[None, None], params.reshape(1, 3))[0, 0]
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("expected a 2D image")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    with torch.no_grad():
        out = apply_rigid(torch.from_numpy(np.ascontiguousarray(arr)), alpha)
    return out.numpy()


def warp_volume(voxels: np.ndarray, alpha: RigidParams) -> np.ndarray:
    """Apply the same in-plane transform to every slice of a (D, H, W) volume."""
    vox = np.ascontiguousarray(voxels, dtype=np.float32)
    with torch.no_grad():
        images = torch.from_numpy(vox).unsqueeze(1)
        params = _params_tensor(alpha, dtype=images.dtype).reshape(1, 3)
        return warp_rigid(images, params).squeeze(1).numpy()


def warp_mask(mask: np.ndarray, alpha: RigidParams) -> np.ndarray:
    """Warp a binary (D, H, W) mask; bilinear on {0,1} then threshold at 0.5."""
    warped = warp_volume(mask.astype(np.float32), alpha)
    return (warped >= 0.5).astype(np.uint8)


def hflip_image(image):
    """Mirror about the vertical midline (reverse the last axis)."""
    if isinstance(image, torch.Tensor):
        return image.flip(-1)
    return np.asarray(image)[..., ::-1]


def _loss_terms(images: torch.Tensor, params: torch.Tensor):
    """Per-item (symmetry, restoration) L1 terms for a batch (B, 1, H, W)."""
    warped = warp_rigid(images, params)
    sym = (warped.flip(-1) - warped).abs().mean(dim=(1, 2, 3))
    restored = warp_rigid(warped, _invert_params_tensor(params))
    rest = (restored - images).abs().mean(dim=(1, 2, 3))
    return sym, rest


def alignment_loss(slice_, alpha):
    """Unsupervised alignment objective for one slice.

    Returns (total, symmetry_term, restoration_term). The symmetry term is
    the mean absolute difference between the warped slice and its
    horizontal flip; the restoration term is the mean absolute difference
    between the inverse-warped warped slice and the original.

    Torch inputs return scalar tensors (differentiable); numpy inputs
    return floats.
    """
    if isinstance(slice_, torch.Tensor):
        params = _params_tensor(alpha, device=slice_.device, dtype=slice_.dtype)
        sym, rest = _loss_terms(slice_[None, None], params.reshape(1, 3))
        return (sym[0] + rest[0]), sym[0], rest[0]
    arr = np.ascontiguousarray(np.asarray(slice_, dtype=np.float32))
    with torch.no_grad():
        total, sym, rest = alignment_loss(torch.from_numpy(arr), alpha)
    return float(total), float(sym), float(rest)


class AlignmentNet(nn.Module):
    """Small pose regressor: two conv/pool stages and a 3-unit head.

    Raw outputs are (theta radians, tx, ty) with the shifts in normalized
    [-1, 1] units of the input frame. The head is zero-initialized, so an
    untrained network predicts the identity transform for any input.
    """

    INPUT_SIZE = 128

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, kernel_size=7, padding=3),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 32, kernel_size=5, padding=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        side = self.INPUT_SIZE // 4
        self.head = nn.Linear(32 * side * side, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError("expected input of shape (B, 1, H, W)")
        if x.shape[-2:] != (self.INPUT_SIZE, self.INPUT_SIZE):
            x = F.interpolate(x, size=(self.INPUT_SIZE, self.INPUT_SIZE), mode="bilinear", align_corners=False)
        return self.head(self.features(x).flatten(1))


def params_to_pixels(raw: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Convert raw network output (theta, tx_norm, ty_norm) to pixel units."""
    h, w = image_size
    scale = torch.tensor([1.0, (w - 1) / 2.0, (h - 1) / 2.0], device=raw.device, dtype=raw.dtype)
    return raw * scale


def tissue_slice_indices(voxels: np.ndarray, min_fraction: float = 0.01) -> np.ndarray:
    """Indices of slices whose clamped-HU foreground fraction exceeds the cutoff."""
    clamped = np.clip(voxels, 40.0, 100.0)
    frac = (clamped > 40.0).mean(axis=(1, 2))
    return np.flatnonzero(frac > min_fraction)


def prepare_alignment_slices(volumes) -> list[np.ndarray]:
    """Preprocessed tissue slices per volume, ready for train_alignment.

    Volumes without any tissue-bearing slice are dropped.
    """
    from .phantom import preprocess

    sets = []
    for vol in volumes:
        idx = tissue_slice_indices(vol.voxels)
        if idx.size == 0:
            continue
        sets.append(preprocess(vol).voxels[idx])
    return sets


@dataclass
class AlignTrainConfig:
    base_lr: float = 1e-3
    # the zero-initialized 3-unit head sits on a ~3e4-wide flatten; Adam moves
    # each weight by ~lr per early step, so the head needs a far smaller rate
    # than the convolutions or the predicted pose jumps out of the loss basin
    head_lr_scale: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    epochs: int = 60
    batch_size: int = 16
    poly_power: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError("align_train.base_lr must be > 0")
        if self.head_lr_scale <= 0:
            raise ConfigError("align_train.head_lr_scale must be > 0")
        if self.epochs < 1:
            raise ConfigError("align_train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("align_train.batch_size must be >= 1")
        if self.poly_power <= 0:
            raise ConfigError("align_train.poly_power must be > 0")


def train_alignment(slice_sets: Sequence[np.ndarray], config: AlignTrainConfig, out_dir=None):
    """Train the alignment network on per-volume stacks of preprocessed slices.

    Each epoch samples one random tissue slice per volume. Returns the
    trained network and the per-epoch curve rows
    (epoch, loss, sym_term, rest_term). When ``out_dir`` is given, a
    checkpoint and the curve CSV are written there.
    """
    from .checkpoints import save_checkpoint
    from .training import poly_lr

    config.validate()
    if not slice_sets:
        raise DataError("no volumes with tissue slices to train on")
    shapes = {s.shape[1:] for s in slice_sets}
    if len(shapes) != 1:
        raise ConfigError(f"alignment training requires a uniform slice shape, got {sorted(shapes)}")
    h, w = shapes.pop()

    seed_everything(config.seed)
    net = AlignmentNet()
    group_scales = (1.0, config.head_lr_scale)
    opt = torch.optim.Adam(
        [
            {"params": net.features.parameters(), "lr": config.base_lr},
            {"params": net.head.parameters(), "lr": config.base_lr * config.head_lr_scale},
        ],
        betas=config.betas,
    )
    rng = np.random.default_rng(config.seed)

    n_vol = len(slice_sets)
    iters_per_epoch = math.ceil(n_vol / config.batch_size)
    total_iter = config.epochs * iters_per_epoch

    curve = []
    it = 0
    for epoch in range(config.epochs):
        chosen = np.stack([s[rng.integers(len(s))] for s in slice_sets])
        order = rng.permutation(n_vol)
        sums = np.zeros(3)
        for start in range(0, n_vol, config.batch_size):
            lr = poly_lr(config.base_lr, it, total_iter, config.poly_power)
            for group, scale in zip(opt.param_groups, group_scales):
                group["lr"] = lr * scale
            batch = chosen[order[start:start + config.batch_size]]
            x = torch.from_numpy(batch).unsqueeze(1)
            params = params_to_pixels(net(x), (h, w))
            sym, rest = _loss_terms(x, params)
            loss = (sym + rest).mean()
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "align.diverged.ckpt", "alignment",
                                    _align_ckpt_config(), net.state_dict())
                raise NumericError(f"alignment loss became non-finite at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            frac = batch.shape[0] / n_vol
            with torch.no_grad():
                sums += frac * np.array([float(loss), float(sym.mean()), float(rest.mean())])
            it += 1
        curve.append({"epoch": epoch, "loss": sums[0], "sym_term": sums[1], "rest_term": sums[2]})

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "align.ckpt", "alignment", _align_ckpt_config(), net.state_dict())
        write_curve_csv(out_dir / "curve.csv", curve)
    return net, curve


def _align_ckpt_config() -> dict:
    return {"input_size": AlignmentNet.INPUT_SIZE}


def write_curve_csv(path, curve) -> None:
    from .fileio import atomic_write_text
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "loss", "sym_term", "rest_term"])
    for row in curve:
        writer.writerow([row["epoch"], repr(row["loss"]), repr(row["sym_term"]), repr(row["rest_term"])])
    atomic_write_text(path, buf.getvalue())


def estimate_volume_params(net: AlignmentNet, vol) -> RigidParams:
    """Volume-level correcting transform: per-slice predictions on tissue
    slices, aggregated by coordinate-wise median.

    Takes a raw (unpreprocessed) volume; preprocessing happens internally
    because the network was trained on standardized slices.
    """
    from .phantom import preprocess

    idx = tissue_slice_indices(vol.voxels)
    if idx.size == 0:
        raise DataError(f"volume {vol.id!r} has no tissue-bearing slices")
    pre = preprocess(vol)
    d, h, w = pre.voxels.shape
    x = torch.from_numpy(pre.voxels[idx]).unsqueeze(1)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        px = params_to_pixels(net(x), (h, w)).numpy()
    if was_training:
        net.train()
    med = np.median(px, axis=0)
    return RigidParams(float(med[0]), float(med[1]), float(med[2]))
