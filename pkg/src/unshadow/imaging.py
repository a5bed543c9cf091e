"""Pixel-level primitives: regions, embedding, colour conversion, resizing, I/O.

Images are float32 arrays of shape (H, W, 3) in [0, 1]; masks are float32
arrays of shape (H, W) holding exactly 0 or 1. The region/embed helpers also
accept torch tensors in NCHW layout with an (N, 1, H, W) mask, so the
training loop can reuse them on batches.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class ShapeError(ValueError):
    """Raised when image, mask or region dimensions disagree."""


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


@dataclass(frozen=True)
class Region:
    """Image content restricted to the support of ``mask`` (zero elsewhere)."""

    data: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.data.shape

    @property
    def coverage(self) -> float:
        return mask_coverage(self.mask)


def as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    return (m > 0.5).astype(np.float32)


def mask_coverage(mask) -> float:
    m = np.asarray(mask)
    return float(m.mean()) if m.size else 0.0


def _check_pair(image, mask):
    if image.shape[:2] != mask.shape[:2]:
        raise ShapeError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} differ")


def _broadcast_mask(mask, like):
    # HWC image with HW mask: add the channel axis at the end
    if mask.ndim == like.ndim - 1:
        return mask[..., None]
    return mask


def extract_region(image, mask) -> Region:
    """Pixelwise product of an image with its binary mask."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    _check_pair(image, mask)
    return Region(image * _broadcast_mask(mask, image), mask)


def embed(shadow, mask, removed):
    """``S - S*M + S_r*M`` clipped to [0, 1]; works on numpy arrays and tensors."""
    m = _broadcast_mask(mask, shadow)
    return (shadow - shadow * m + removed * m).clip(0.0, 1.0)


def embed_region(shadow, mask, region: Region) -> np.ndarray:
    shadow = np.asarray(shadow, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    _check_pair(shadow, mask)
    if region.data.shape != shadow.shape:
        raise ShapeError(f"region {region.data.shape} does not match image {shadow.shape}")
    if not np.array_equal(region.mask, mask):
        raise ContractError("region support differs from the embedding mask")
    return embed(shadow, mask, region.data)


# sRGB (D65) <-> CIELAB
_RGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def to_lab(image) -> np.ndarray:
    """sRGB in [0, 1] to CIELAB (D65, 2 degree observer). Computed in float64."""
    rgb = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3 * _DELTA ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def from_lab(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0)) * D65_WHITE
    return _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)


def resize(image, h: int, w: int) -> np.ndarray:
    """Bilinear resample (half-pixel centres, no antialiasing), clipped to [0, 1]."""
    if h < 1 or w < 1:
        raise ContractError(f"target size must be positive, got {h}x{w}")
    arr = np.asarray(image, dtype=np.float32)
    if arr.shape[:2] == (h, w):
        return arr.copy()
    squeeze = arr.ndim == 2
    t = torch.from_numpy(np.ascontiguousarray(arr[..., None] if squeeze else arr))
    t = t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)
    return out[..., 0] if squeeze else out


def resize_mask(mask, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resample that keeps the mask binary."""
    m = np.asarray(mask, dtype=np.float32)
    if m.shape == (h, w):
        return m.copy()
    t = torch.from_numpy(np.ascontiguousarray(m))[None, None]
    return F.interpolate(t, size=(h, w), mode="nearest")[0, 0].numpy()


def adjust_brightness(region: Region, level: float) -> Region:
    """Scale the region's pixels by ``1 + level/100`` and clip to [0, 1]."""
    if level < -100:
        raise ContractError(f"brightness level must be >= -100, got {level}")
    gain = 1.0 + level / 100.0
    data = np.clip(region.data * gain, 0.0, 1.0) * _broadcast_mask(region.mask, region.data)
    return Region(data.astype(np.float32), region.mask)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def write_mask(path, mask) -> None:
    write_image(path, np.asarray(mask, dtype=np.float32))
