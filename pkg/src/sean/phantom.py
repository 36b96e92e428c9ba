"""Synthetic bilateral phantoms, volume I/O, and preprocessing.

A phantom is an elliptical "skull" ring around mirror-symmetric smooth
brain texture, optionally with one hypodense lesion confined to one
lateral half, then perturbed by a known in-plane rigid transform (the same
parameters for every slice). Ground truth records the perturbation and the
transformed lesion mask, which makes alignment and segmentation both
verifiable without any clinical data.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .align import RigidParams, warp_mask, warp_volume
from .determinism import new_rng
from .errors import ConfigError, DataError
from .fileio import atomic_write_bytes, read_json, write_json

HU_WINDOW = (40.0, 100.0)

# canonical geometry, as fractions of the image extent
_SKULL_RX = 0.42
_SKULL_RY = 0.46
_RING_THICKNESS = 2.5
_TAPER_MIN = 0.8


@dataclass(frozen=True)
class CtVolume:
    """3D scalar volume (depth, height, width) in HU-like units."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError("voxels must be a non-empty 3D array")
        if not np.isfinite(self.voxels).all():
            raise ValueError("voxel values must be finite")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing components must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class PhantomSpec:
    image_size: tuple[int, int] = (64, 64)
    num_slices: int = 8
    rotation_range_deg: tuple[float, float] = (-15.0, 15.0)
    shift_range_px: tuple[float, float] = (-10.0, 10.0)
    lesion_probability: float = 0.6
    lesion_intensity_delta: float = -10.0
    lesion_radius_px: tuple[float, float] = (3.0, 6.0)
    texture_seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError("phantom image_size must be at least 16x16")
        if self.num_slices < 1:
            raise ConfigError("phantom num_slices must be >= 1")
        lo, hi = self.rotation_range_deg
        if lo > hi or lo < -45.0 or hi > 45.0:
            raise ConfigError("rotation_range_deg must lie within [-45, 45]")
        lo, hi = self.shift_range_px
        if lo > hi or max(abs(lo), abs(hi)) > w / 4.0:
            raise ConfigError("shift_range_px must lie within +-W/4")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ConfigError("lesion_probability must be in [0, 1]")
        r_lo, r_hi = self.lesion_radius_px
        if r_lo <= 0 or r_lo > r_hi:
            raise ConfigError("lesion_radius_px must be a positive interval")
        # the largest lesion must fit strictly inside one half of the
        # tapered skull interior, with margin from the midline
        rx_in = _TAPER_MIN * (_SKULL_RX * w - _RING_THICKNESS)
        ry_in = _TAPER_MIN * (_SKULL_RY * h - _RING_THICKNESS)
        if 2.0 * r_hi + 2.0 > 0.8 * rx_in or r_hi > 0.6 * ry_in:
            raise ConfigError("lesion of radius %.1f px would not fit inside the skull interior" % r_hi)


@dataclass(frozen=True)
class PhantomGroundTruth:
    true_params: RigidParams
    lesion_mask: np.ndarray  # uint8, same shape as the volume


def _mirror(vol: np.ndarray) -> np.ndarray:
    # averaging with the flipped copy is exactly symmetric (addition commutes)
    return (vol + vol[:, :, ::-1]) / 2.0


def _canonical_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Unperturbed symmetric volume plus the (canonical) lesion mask."""
    d = spec.num_slices
    h, w = spec.image_size
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    tex = gaussian_filter(rng.standard_normal((d, h, w)), sigma=(1.2, 5.0, 5.0), mode="nearest")
    tex = (tex - tex.mean()) / max(tex.std(), 1e-12)
    tex = np.clip(70.0 + 8.0 * tex, 52.0, 92.0)
    tex = _mirror(tex)

    taper = _TAPER_MIN + (1.0 - _TAPER_MIN) * np.sin(math.pi * (np.arange(d) + 0.5) / d)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    vol = np.zeros((d, h, w))
    interior = np.zeros((d, h, w), dtype=bool)
    for z in range(d):
        rx = _SKULL_RX * w * taper[z]
        ry = _SKULL_RY * h * taper[z]
        nd_out = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        nd_in = ((xx - cx) / (rx - _RING_THICKNESS)) ** 2 + ((yy - cy) / (ry - _RING_THICKNESS)) ** 2
        ring = (nd_out <= 1.0) & (nd_in > 1.0)
        inside = nd_in <= 1.0
        vol[z][inside] = tex[z][inside]
        vol[z][ring] = 120.0
        interior[z] = inside

    # soften edges so resampling after rigid perturbation stays faithful
    vol = _mirror(gaussian_filter(vol, sigma=(0.0, 0.8, 0.8), mode="nearest"))

    mask = np.zeros((d, h, w), dtype=np.uint8)
    if rng.random() < spec.lesion_probability:
        side = 1.0 if rng.integers(0, 2) == 1 else -1.0
        r = rng.uniform(*spec.lesion_radius_px)
        rz = 0.5 if d == 1 else rng.uniform(1.0, max(1.0, min(2.5, (d - 1) / 3.0)))
        zc = 0.0 if d == 1 else rng.uniform(rz, d - 1 - rz)
        f = taper[min(d - 1, max(0, int(round(zc))))]
        rx_in = f * (_SKULL_RX * w - _RING_THICKNESS)
        ry_in = f * (_SKULL_RY * h - _RING_THICKNESS)
        x_off = side * rng.uniform(r + 2.0, max(r + 2.0 + 1e-6, 0.8 * rx_in - r))
        y_off = rng.uniform(-0.5, 0.5) * ry_in
        zz = np.arange(d, dtype=np.float64)[:, None, None]
        blob = (
            ((zz - zc) / rz) ** 2
            + ((yy[None] - (cy + y_off)) / r) ** 2
            + ((xx[None] - (cx + x_off)) / r) ** 2
        ) <= 1.0
        mask = (blob & interior).astype(np.uint8)
        vol = vol + spec.lesion_intensity_delta * mask
    return vol, mask


def generate_phantom(spec: PhantomSpec, seed: int, *, params: RigidParams | None = None,
                     vol_id: str = "") -> tuple[CtVolume, PhantomGroundTruth]:
    """Deterministically generate one perturbed phantom and its ground truth.

    ``params`` overrides the sampled rigid perturbation (the canonical
    content for a given (spec, seed) is unchanged by the override).
    """
    spec.validate()
    rng = new_rng(spec.texture_seed, seed)
    vol, mask = _canonical_phantom(spec, rng)
    if params is None:
        theta = math.radians(rng.uniform(*spec.rotation_range_deg))
        tx = rng.uniform(*spec.shift_range_px)
        ty = rng.uniform(*spec.shift_range_px)
        params = RigidParams(theta, tx, ty)

    voxels = warp_volume(vol.astype(np.float32), params)
    lesion = warp_mask(mask, params) if mask.any() else mask
    ct = CtVolume(voxels=voxels, id=vol_id or f"phantom-{seed:06d}")
    return ct, PhantomGroundTruth(true_params=params, lesion_mask=lesion)


def preprocess(vol: CtVolume) -> CtVolume:
    """Clamp to the brain window then standardize the case to mean 0, std 1."""
    v = np.clip(vol.voxels.astype(np.float64), *HU_WINDOW)
    std = v.std()  # population convention
    if std < 1e-8:
        raise DataError(f"volume {vol.id!r} has zero variance after clamping; cannot standardize")
    out = ((v - v.mean()) / std).astype(np.float32)
    return CtVolume(voxels=out, spacing=vol.spacing, id=vol.id)


def extract_slab(vol, center_index: int, radius: int) -> np.ndarray:
    """Slices center-radius .. center+radius with edge replication at the ends."""
    voxels = vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol)
    d = voxels.shape[0]
    if not 0 <= center_index < d:
        raise ValueError(f"center_index {center_index} out of range for {d} slices")
    if radius < 0:
        raise ValueError("slab radius must be >= 0")
    idx = np.clip(np.arange(center_index - radius, center_index + radius + 1), 0, d - 1)
    return voxels[idx].copy()


def write_volume(vol: CtVolume, mask: np.ndarray | None, path) -> None:
    """Write ``<base>.raw`` + ``<base>.json`` (and ``<base>.mask.raw`` if given)."""
    base = Path(path)
    d, h, w = vol.voxels.shape
    atomic_write_bytes(base.parent / (base.name + ".raw"), np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    write_json(base.parent / (base.name + ".json"), {
        "dims": [d, h, w],
        "spacing": list(vol.spacing),
        "dtype": "f32le",
        "id": vol.id,
    })
    if mask is not None:
        if mask.shape != vol.voxels.shape:
            raise DataError("mask shape does not match volume shape")
        m = np.ascontiguousarray(mask, dtype=np.uint8)
        if not np.isin(m, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        atomic_write_bytes(base.parent / (base.name + ".mask.raw"), m.tobytes())


def read_volume(path) -> tuple[CtVolume, np.ndarray | None]:
    """Inverse of write_volume; the voxel round-trip is bit-exact."""
    base = Path(path)
    header_path = base.parent / (base.name + ".json")
    if not header_path.exists():
        raise DataError(f"missing sidecar header {header_path}")
    header = read_json(header_path)
    for key in ("dims", "spacing", "dtype", "id"):
        if key not in header:
            raise DataError(f"sidecar {header_path} missing key {key!r}")
    if header["dtype"] != "f32le":
        raise DataError(f"unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(v) < 1 for v in dims):
        raise DataError(f"invalid dims {dims}")
    d, h, w = (int(v) for v in dims)

    raw_path = base.parent / (base.name + ".raw")
    if not raw_path.exists():
        raise DataError(f"missing raw payload {raw_path}")
    raw = raw_path.read_bytes()
    expected = d * h * w * 4
    if len(raw) != expected:
        raise DataError(f"{raw_path} holds {len(raw)} bytes, expected {expected} (truncated?)")
    voxels = np.frombuffer(raw, dtype="<f4").reshape(d, h, w).copy()
    vol = CtVolume(voxels=voxels, spacing=tuple(float(s) for s in header["spacing"]), id=str(header["id"]))

    mask_path = base.parent / (base.name + ".mask.raw")
    mask = None
    if mask_path.exists():
        mraw = mask_path.read_bytes()
        if len(mraw) != d * h * w:
            raise DataError(f"{mask_path} holds {len(mraw)} bytes, expected {d * h * w}")
        mask = np.frombuffer(mraw, dtype=np.uint8).reshape(d, h, w).copy()
        if not np.isin(mask, (0, 1)).all():
            raise DataError(f"{mask_path} contains values other than 0/1")
    return vol, mask


def write_ground_truth(gt: PhantomGroundTruth, path) -> None:
    base = Path(path)
    write_json(base.parent / (base.name + ".gt.json"), {
        "format_version": 1,
        "theta_rad": gt.true_params.theta,
        "tx_px": gt.true_params.tx,
        "ty_px": gt.true_params.ty,
        "has_lesion": bool(gt.lesion_mask.any()),
    })


def read_ground_truth_params(path) -> RigidParams | None:
    base = Path(path)
    gt_path = base.parent / (base.name + ".gt.json")
    if not gt_path.exists():
        return None
    obj = read_json(gt_path)
    return RigidParams(float(obj["theta_rad"]), float(obj["tx_px"]), float(obj["ty_px"]))
