"""ISTD / ISTD+ / SRD triplet loading and non-shadow crop sampling."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .imaging import ContractError, Region, ShapeError, read_image, read_mask

log = logging.getLogger(__name__)

LAYOUTS = ("istd", "istd+", "srd")
SPLIT_NAMES = ("train", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
# crops may overlap the shadow mask by strictly less than this fraction
NONSHADOW_TOLERANCE = 0.05
CROP_ATTEMPTS = 100


class LayoutError(FileNotFoundError):
    pass


class SamplingExhausted(RuntimeError):
    pass


@dataclass
class ShadowTriplet:
    shadow: np.ndarray
    mask: np.ndarray
    shadow_free: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.shadow.shape[:2] != self.mask.shape:
            raise ShapeError(f"{self.id}: shadow {self.shadow.shape} vs mask {self.mask.shape}")
        if self.shadow_free is not None and self.shadow_free.shape != self.shadow.shape:
            raise ShapeError(f"{self.id}: shadow-free {self.shadow_free.shape} vs shadow {self.shadow.shape}")

    def load(self) -> "ShadowTriplet":
        return self

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class TripletFiles:
    """On-disk location of one sample; decoded lazily by :meth:`load`."""

    id: str
    shadow: Path
    mask: Path
    shadow_free: Path | None = None

    def load(self) -> ShadowTriplet:
        gt = read_image(self.shadow_free) if self.shadow_free is not None else None
        return ShadowTriplet(read_image(self.shadow), read_mask(self.mask), gt, self.id)


@dataclass
class DatasetSplit:
    samples: list
    name: str = "train"
    layout: str = "istd"
    rejected: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> ShadowTriplet:
        return self.samples[i].load()

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.id.encode())
            if isinstance(s, TripletFiles):
                for p in (s.shadow, s.mask, s.shadow_free):
                    if p is not None:
                        h.update(p.read_bytes())
            else:
                for a in (s.shadow, s.mask, s.shadow_free):
                    if a is not None:
                        h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def write_rejection_report(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{stem}\n" for stem in self.rejected))
        return path


def _layout_dirs(root: Path, layout: str, name: str) -> tuple[Path, Path, Path]:
    if layout in ("istd", "istd+"):
        names = (f"{name}_A", f"{name}_B", f"{name}_C")
    elif layout == "srd":
        names = ("shadow", "mask", "shadow_free")
    else:
        raise ContractError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    # both <root>/<split>/<dir> and <root>/<dir> are accepted
    for base in (root / name, root):
        if (base / names[0]).is_dir() and (base / names[1]).is_dir():
            return tuple(base / n for n in names)
    raise LayoutError(f"{root}: expected {names[0]}/ and {names[1]}/ for layout {layout!r} split {name!r}")


def _stems(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_split(root, layout: str = "istd", name: str = "train", require_gt: bool = False) -> DatasetSplit:
    """Match shadow/mask/shadow-free files by stem, sorted lexicographically.

    Shadow images without a mask are skipped and recorded in ``split.rejected``.
    """
    root = Path(root)
    layout = layout.lower()
    if name not in SPLIT_NAMES:
        raise ContractError(f"split name must be one of {SPLIT_NAMES}, got {name!r}")
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} does not exist")
    if not any(root.iterdir()):
        log.warning("dataset root %s is empty; returning an empty split", root)
        return DatasetSplit([], name, layout)

    shadow_dir, mask_dir, gt_dir = _layout_dirs(root, layout, name)
    shadows, masks, gts = _stems(shadow_dir), _stems(mask_dir), _stems(gt_dir)
    samples, rejected = [], []
    for stem in sorted(shadows):
        if stem not in masks:
            rejected.append(stem)
            continue
        gt = gts.get(stem)
        if require_gt and gt is None:
            raise ContractError(f"sample {stem!r} has no shadow-free image but require_gt=True")
        samples.append(TripletFiles(stem, shadows[stem], masks[stem], gt))
    if rejected:
        log.warning("%d shadow images without masks were skipped", len(rejected))
    return DatasetSplit(samples, name, layout, rejected)


def nonshadow_windows(mask: np.ndarray, crop_hw: tuple[int, int]) -> np.ndarray:
    """Boolean map over top-left corners whose window overlaps the shadow by < 5%."""
    ch, cw = crop_hw
    H, W = mask.shape
    if ch > H or cw > W:
        return np.zeros((0, 0), dtype=bool)
    integral = np.pad(mask.astype(np.float64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    sums = integral[ch:, cw:] - integral[:-ch, cw:] - integral[ch:, :-cw] + integral[:-ch, :-cw]
    return sums / (ch * cw) < NONSHADOW_TOLERANCE


def sample_nonshadow_crop(triplet: ShadowTriplet, crop_hw=(64, 64), rng: np.random.Generator | None = None,
                          attempts: int = CROP_ATTEMPTS) -> Region:
    """Rejection-sample a window of ``crop_hw`` lying (almost) outside the shadow."""
    rng = rng if rng is not None else np.random.default_rng()
    ch, cw = crop_hw
    H, W = triplet.mask.shape
    if ch > H or cw > W:
        raise SamplingExhausted(f"crop {crop_hw} larger than image {(H, W)}")
    for _ in range(attempts):
        y = int(rng.integers(0, H - ch + 1))
        x = int(rng.integers(0, W - cw + 1))
        if triplet.mask[y:y + ch, x:x + cw].mean() < NONSHADOW_TOLERANCE:
            data = triplet.shadow[y:y + ch, x:x + cw].copy()
            return Region(data, np.ones((ch, cw), dtype=np.float32))
    raise SamplingExhausted(f"{triplet.id}: no non-shadow {ch}x{cw} window in {attempts} draws")


def iterate(split: DatasetSplit, order: Sequence[int] | None = None, workers: int = 0) -> Iterator[ShadowTriplet]:
    """Yield triplets in exactly ``order``; decoding may run on a thread pool."""
    order = list(range(len(split))) if order is None else [int(i) for i in order]
    for i in order:
        if not 0 <= i < len(split):
            raise ContractError(f"index {i} out of range for split of size {len(split)}")
    if workers <= 0:
        for i in order:
            yield split[i]
        return
    with ThreadPoolExecutor(workers) as pool:
        # map preserves submission order regardless of completion order
        yield from pool.map(split.__getitem__, order)
