"""Toy shadow triplets: flat scenes with darkened geometric regions."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import DatasetSplit, ShadowTriplet, nonshadow_windows
from .imaging import write_image, write_mask

SHAPES = ("rect", "ellipse", "triangle")


def _shape_mask(size: int, rng: np.random.Generator, band: int) -> np.ndarray:
    """A random shape confined to a ``band``-pixel strip along one image side."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    kind = SHAPES[int(rng.integers(len(SHAPES)))]
    long_lo = int(rng.integers(0, size // 3))
    long_hi = int(rng.integers(2 * size // 3, size + 1))
    short_lo = int(rng.integers(0, 4))
    short_hi = band
    # (u, v) = (along the side, away from it)
    side = int(rng.integers(4))
    u, v = [(xx, yy), (xx, size - 1 - yy), (yy, xx), (yy, size - 1 - xx)][side]
    if kind == "rect":
        m = (u >= long_lo) & (u < long_hi) & (v >= short_lo) & (v < short_hi)
    elif kind == "ellipse":
        cu, cv = (long_lo + long_hi) / 2, (short_lo + short_hi) / 2
        ru, rv = (long_hi - long_lo) / 2, (short_hi - short_lo) / 2
        m = ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0
    else:
        t = (u - long_lo) / max(long_hi - long_lo, 1)
        m = (t >= 0) & (t <= 1) & (v >= short_lo) & (v < short_lo + (short_hi - short_lo) * (1 - t))
    return m.astype(np.float32)


def make_toy_triplet(rng: np.random.Generator, size: int = 64, band: int = 22, crop: int = 40,
                     attenuation=(1 / 1.8, 1 / 1.7), colour_range=(0.55, 0.85),
                     sample_id: str = "") -> ShadowTriplet:
    """One flat-colour scene with a gentle gradient and one darkened shape.

    The shadow keeps a ``crop``-sized window essentially shadow-free so the
    critic always has non-shadow crops to sample. With the default ranges lit
    and shadowed intensities do not overlap, so an unconditional critic can
    tell them apart without memorising every scene.
    """
    for _ in range(100):
        mask = _shape_mask(size, rng, band)
        if mask.mean() > 0.03 and nonshadow_windows(mask, (crop, crop)).any():
            break
    else:
        raise RuntimeError("could not place a toy shadow")
    colour = rng.uniform(*colour_range, size=3).astype(np.float32)
    ramp = np.linspace(-1.0, 1.0, size, dtype=np.float32)
    gy, gx = rng.uniform(-0.04, 0.04, size=2)
    lit = colour[None, None, :] + (gy * ramp[:, None] + gx * ramp[None, :])[..., None]
    lit = np.clip(lit, 0.0, 1.0).astype(np.float32)
    k = rng.uniform(*attenuation)
    shadow = (lit * (1.0 - mask[..., None] * (1.0 - k))).astype(np.float32)
    return ShadowTriplet(shadow, mask, lit, sample_id)


def make_toy_split(n: int = 8, size: int = 64, seed: int = 0, **kwargs) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    samples = [make_toy_triplet(rng, size, sample_id=f"toy_{i:03d}", **kwargs) for i in range(n)]
    return DatasetSplit(samples, "train", "istd")


def write_split(split: DatasetSplit, root, name: str = "train", layout: str = "istd") -> Path:
    """Write a split to disk in the ISTD (``<name>_A/B/C``) or SRD layout."""
    root = Path(root)
    if layout in ("istd", "istd+"):
        dirs = (f"{name}_A", f"{name}_B", f"{name}_C")
    else:
        dirs = ("shadow", "mask", "shadow_free")
    base = root / name
    for i in range(len(split)):
        t = split[i]
        write_image(base / dirs[0] / f"{t.id}.png", t.shadow)
        write_mask(base / dirs[1] / f"{t.id}.png", t.mask)
        if t.shadow_free is not None:
            write_image(base / dirs[2] / f"{t.id}.png", t.shadow_free)
    return root
