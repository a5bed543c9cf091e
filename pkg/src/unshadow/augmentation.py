"""Shadow inpainting, standard augmentation, critic illumination variants,
refinement positives and curriculum difficulty scoring.

Every random operation takes an explicit ``np.random.Generator``; the same
seed and call order give identical outputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .datasets import ShadowTriplet, nonshadow_windows
from .imaging import ContractError, Region, adjust_brightness, resize, resize_mask

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ConfigError(ValueError):
    pass


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.3
    scale_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.01
    blur_sigma: float = 1.0
    contrast_range: tuple[float, float] = (0.8, 1.2)
    photometric_prob: float = 0.5
    inpaint_enabled: bool = True
    inpaint_jitter: float = 0.05
    inpaint_max_overlap: float = 0.01
    inpaint_attempts: int = 50
    mu: float = 75.0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        for name in ("flip_prob", "photometric_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("scale_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ConfigError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise_sigma and blur_sigma must be non-negative")


@dataclass
class MaskBank:
    masks: list = field(default_factory=list)

    @classmethod
    def from_split(cls, split) -> "MaskBank":
        return cls([split[i].mask for i in range(len(split))])

    def __len__(self):
        return len(self.masks)

    def draw(self, rng, shape) -> np.ndarray:
        m = self.masks[int(rng.integers(len(self.masks)))]
        return resize_mask(m, *shape)


def shadow_mean(image: np.ndarray, mask: np.ndarray) -> float:
    n = mask.sum()
    if n == 0:
        raise ContractError("the triplet has no shadow pixels")
    return float((image * mask[..., None]).sum() / (n * image.shape[-1]))


def inpaint_shadow(triplet: ShadowTriplet, bank: MaskBank, rng: np.random.Generator,
                   cfg: AugmentationConfig | None = None, jitter: float | None = None) -> ShadowTriplet:
    """Darken a bank-mask footprint in the lit area to the image's own shadow level.

    The target level is the mean of the existing shadow, jittered uniformly by
    up to ``cfg.inpaint_jitter``; the footprint is scaled by one gain so its mean
    hits the target while its texture is kept. ``jitter`` pins the draw.
    """
    cfg = cfg or AugmentationConfig()
    if len(bank) == 0:
        raise ConfigError("shadow inpainting needs a non-empty mask bank")
    old = triplet.mask
    target_mean = shadow_mean(triplet.shadow, old)

    new = None
    for _ in range(cfg.inpaint_attempts):
        cand = bank.draw(rng, old.shape)
        area = cand.sum()
        if area > 0 and (cand * old).sum() / area < cfg.inpaint_max_overlap:
            new = cand
            break
    if new is None:
        log.debug("inpaint skipped for %s: no bank mask clears the existing shadow", triplet.id)
        return triplet

    if jitter is None:
        jitter = rng.uniform(-cfg.inpaint_jitter, cfg.inpaint_jitter)
    target_mean *= 1.0 + jitter
    # original shadow pixels are never touched
    footprint = new * (1.0 - old)
    current = shadow_mean(triplet.shadow, footprint)
    gain = target_mean / max(current, 1e-6)
    f3 = footprint[..., None]
    shadow = triplet.shadow * (1.0 - f3) + np.clip(triplet.shadow * gain, 0.0, 1.0) * f3
    mask = np.maximum(old, footprint)
    return ShadowTriplet(shadow.astype(np.float32), mask.astype(np.float32), triplet.shadow_free, triplet.id)


def _scale_indices(n: int, s: float) -> np.ndarray:
    """Source indices for a nearest-neighbour rescale by ``s`` cropped/padded back to ``n``."""
    m = max(1, int(round(n * s)))
    offset = (m - n) // 2
    r = np.arange(n) + offset
    # reflect into [0, m) for the padding case
    period = 2 * m
    r = np.mod(r, period)
    r = np.where(r >= m, period - 1 - r, r)
    return np.clip(np.floor((r + 0.5) * n / m).astype(np.int64), 0, n - 1)


def geometric_transform(triplet: ShadowTriplet, flip: bool, scale: float) -> ShadowTriplet:
    H, W = triplet.mask.shape
    rows = _scale_indices(H, scale)
    cols = _scale_indices(W, scale)
    if flip:
        cols = cols[::-1]

    def apply(a):
        return None if a is None else np.ascontiguousarray(a[rows][:, cols])

    return ShadowTriplet(apply(triplet.shadow), apply(triplet.mask), apply(triplet.shadow_free), triplet.id)


def standard_augment(triplet: ShadowTriplet, cfg: AugmentationConfig, rng: np.random.Generator) -> ShadowTriplet:
    """Flip + rescale (mask included), then noise / blur / contrast on S and G only."""
    flip = rng.random() < cfg.flip_prob
    scale = rng.uniform(*cfg.scale_range)
    out = geometric_transform(triplet, flip, scale)

    images = [out.shadow] if out.shadow_free is None else [out.shadow, out.shadow_free]
    if rng.random() < cfg.photometric_prob and cfg.noise_sigma > 0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=out.shadow.shape).astype(np.float32)
        images = [im + noise for im in images]
    if rng.random() < cfg.photometric_prob and cfg.blur_sigma > 0:
        images = [gaussian_filter(im, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0)) for im in images]
    if rng.random() < cfg.photometric_prob:
        c = rng.uniform(*cfg.contrast_range)
        images = [(im - im.mean()) * c + im.mean() for im in images]
    images = [np.clip(im, 0.0, 1.0).astype(np.float32) for im in images]
    gt = images[1] if len(images) > 1 else None
    return ShadowTriplet(images[0], out.mask, gt, out.id)


def brightness_levels(mu: float) -> tuple[float, float, float]:
    return (mu - 5.0, float(mu), mu + 5.0)


def illumination_variants(region: Region, mu: float) -> list[Region]:
    """The critic's brightened copies of a shadow region at levels mu-5, mu, mu+5."""
    if mu < 5:
        raise ContractError(f"illuminance factor must be >= 5, got {mu}")
    return [adjust_brightness(region, v) for v in brightness_levels(mu)]


def refinement_positive(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                        crop: bool = True, crop_frac=(0.5, 0.9), cutout: bool = True,
                        max_blur: float = 2.0, max_noise: float = 0.02, record: dict | None = None) -> np.ndarray:
    """Positive view for the refinement contrastive loss.

    Crops a (mostly) non-shadow square, resizes it back to the input size,
    then applies one cutout rectangle of at most a quarter of the frame,
    Gaussian blur and Gaussian noise.
    """
    H, W = mask.shape
    out = image
    if crop:
        side = int(round(rng.uniform(*crop_frac) * min(H, W)))
        ok = nonshadow_windows(mask, (side, side))
        corners = np.argwhere(ok)
        if len(corners):
            y, x = corners[int(rng.integers(len(corners)))]
            out = resize(image[y:y + side, x:x + side], H, W)
            if record is not None:
                record["crop"] = (int(y), int(x), side)
        else:
            log.debug("no non-shadow %dx%d crop available; transforming the full frame", side, side)
    out = np.array(out, dtype=np.float32)

    if cutout:
        ch = max(1, int(rng.uniform(0.1, 0.5) * H))
        cw = max(1, int(rng.uniform(0.1, 0.5) * W))
        y = int(rng.integers(0, H - ch + 1))
        x = int(rng.integers(0, W - cw + 1))
        out[y:y + ch, x:x + cw] = out.reshape(-1, out.shape[-1]).mean(0)
        if record is not None:
            record["cutout"] = (y, x, ch, cw)

    sigma = rng.uniform(0.0, max_blur) if max_blur > 0 else 0.0
    if sigma > 0:
        out = gaussian_filter(out, sigma=(sigma, sigma, 0))
    noise = rng.uniform(0.0, max_noise) if max_noise > 0 else 0.0
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def curriculum_score(triplet: ShadowTriplet) -> float:
    """Difficulty in [0, 1]: large shadows that are hard to tell from the lit area score high."""
    mask = triplet.mask
    coverage = float(mask.mean())
    lum = triplet.shadow @ LUMA
    n_shadow = mask.sum()
    n_lit = mask.size - n_shadow
    if n_shadow == 0:
        contrast = 0.0
    elif n_lit == 0:
        log.info("%s is all shadow; no lit reference for contrast", triplet.id)
        contrast = float(np.clip(0.0 - (lum * mask).sum() / n_shadow, 0.0, 1.0))
    else:
        lit_mean = (lum * (1 - mask)).sum() / n_lit
        contrast = float(np.clip(lit_mean - (lum * mask).sum() / n_shadow, 0.0, 1.0))
    return 0.5 * coverage + 0.5 * (1.0 - contrast)
