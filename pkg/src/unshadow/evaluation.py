"""Region-wise shadow-removal metrics: LAB error, PSNR and SSIM.

"RMSE" follows the shadow-removal literature and is the mean absolute LAB
difference over a region's pixels and channels; ``literal=True`` gives the
root-mean-square variant instead.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imaging import ContractError, ShapeError, resize, resize_mask, to_lab

log = logging.getLogger(__name__)

REGIONS = ("shadow", "non_shadow", "all")
METRICS = ("rmse_lab", "psnr_rgb", "ssim_rgb")
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _regions(mask):
    m = np.asarray(mask) > 0.5
    return {"shadow": m, "non_shadow": ~m, "all": np.ones_like(m)}


def _check(pred, gt, mask=None):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if mask is not None and mask.shape != pred.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {pred.shape}")


def region_rmse_lab(pred, gt, mask, literal: bool = False) -> dict:
    """LAB error per region; a region without pixels maps to ``None``."""
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask)
    _check(pred, gt, mask)
    diff = to_lab(pred) - to_lab(gt)
    err = diff ** 2 if literal else np.abs(diff)
    out = {}
    for name, m in _regions(mask).items():
        if not m.any():
            out[name] = None
            continue
        v = float(err[m].mean())
        out[name] = math.sqrt(v) if literal else v
    return out


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(pred, gt, mask=None) -> float:
    """PSNR in dB for images in [0, 1]; capped at 100 dB."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check(pred, gt)
    sq = (pred - gt) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0.5
        if not m.any():
            raise ContractError("empty region")
        sq = sq[m]
    return _psnr_from_mse(float(sq.mean()))


def _gaussian_window():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-x ** 2 / (2 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _filter(x, w):
    # valid-mode separable correlation
    r = len(w) // 2
    y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM averaged over channels, on the valid (uncropped) window grid."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check(pred, gt)
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise ContractError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    w = _gaussian_window()
    c1, c2 = K1 ** 2, K2 ** 2
    maps = []
    for c in range(pred.shape[-1]):
        x, y = pred[..., c], gt[..., c]
        mx, my = _filter(x, w), _filter(y, w)
        sxx = _filter(x * x, w) - mx * mx
        syy = _filter(y * y, w) - my * my
        sxy = _filter(x * y, w) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return np.mean(maps, axis=0)


def ssim(pred, gt, mask=None) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03), channel-averaged."""
    smap = ssim_map(pred, gt)
    if mask is None:
        return float(smap.mean())
    r = SSIM_WINDOW // 2
    m = (np.asarray(mask) > 0.5)[r:-r, r:-r]
    if not m.any():
        raise ContractError("empty region on the SSIM grid")
    return float(smap[m].mean())


def score_sample(pred, gt, mask, literal: bool = False) -> dict:
    """All metrics for all regions of one sample, plus pooling accumulators."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask)
    _check(pred, gt, mask)
    lab_err = to_lab(pred) - to_lab(gt)
    lab_err = lab_err ** 2 if literal else np.abs(lab_err)
    sq = (pred - gt) ** 2
    smap = ssim_map(pred, gt)
    r = SSIM_WINDOW // 2
    row, pool = {}, {}
    for name, m in _regions(mask).items():
        sm = m[r:-r, r:-r]
        n, ns = int(m.sum()), int(sm.sum())
        lab_sum = float(lab_err[m].sum()) if n else 0.0
        sq_sum = float(sq[m].sum()) if n else 0.0
        ssim_sum = float(smap[sm].sum()) if ns else 0.0
        pool[name] = (lab_sum, sq_sum, 3 * n, ssim_sum, ns)
        if n:
            v = lab_sum / (3 * n)
            row[f"{name}_rmse_lab"] = math.sqrt(v) if literal else v
            row[f"{name}_psnr_rgb"] = _psnr_from_mse(sq_sum / (3 * n))
        else:
            row[f"{name}_rmse_lab"] = row[f"{name}_psnr_rgb"] = None
        row[f"{name}_ssim_rgb"] = ssim_sum / ns if ns else None
    return {"row": row, "pool": pool}


@dataclass
class MetricsReport:
    """Dataset-level metrics per region plus the per-sample breakdown."""

    regions: dict
    count: int
    rows: list = field(default_factory=list)
    aggregation: str = "sample"
    pooled: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count <= 0:
            raise ContractError("a metrics report needs at least one sample")

    def value(self, region: str, metric: str):
        return self.regions[region][metric]

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "MetricsReport":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        data = json.loads(text)
        return cls(**data)

    def to_csv(self, path) -> None:
        cols = ["id"] + [f"{r}_{m}" for r in REGIONS for m in METRICS]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k) for k in cols})
            w.writerow({"id": f"mean[{self.aggregation}]",
                        **{f"{r}_{m}": self.regions[r][m] for r in REGIONS for m in METRICS}})

    def table(self) -> str:
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        head = f"{'':8s}{'Shadow':>24s}{'Non-Shadow':>24s}{'All':>24s}"
        sub = f"{'':8s}" + "".join(f"{'RMSE':>8s}{'PSNR':>8s}{'SSIM':>8s}" for _ in REGIONS)
        vals = f"{'mean':8s}" + "".join(
            fmt(self.regions[r]["rmse_lab"], "8.2f") + fmt(self.regions[r]["psnr_rgb"], "8.2f")
            + fmt(self.regions[r]["ssim_rgb"], "8.3f") for r in REGIONS)
        return "\n".join([head, sub, vals, f"samples: {self.count} (aggregation: {self.aggregation})"])


class ReportAccumulator:
    """Merges per-sample scores; ``merge`` is associative for parallel scoring."""

    def __init__(self, literal: bool = False):
        self.literal = literal
        self.rows: list[dict] = []
        self.pool = {r: [0.0, 0.0, 0, 0.0, 0] for r in REGIONS}

    def add(self, sample_id: str, pred, gt, mask) -> dict:
        scored = score_sample(pred, gt, mask, self.literal)
        row = {"id": sample_id, **scored["row"]}
        self.rows.append(row)
        for r, vals in scored["pool"].items():
            self.pool[r] = [a + b for a, b in zip(self.pool[r], vals)]
        return row

    def merge(self, other: "ReportAccumulator") -> "ReportAccumulator":
        out = ReportAccumulator(self.literal)
        out.rows = self.rows + other.rows
        out.pool = {r: [a + b for a, b in zip(self.pool[r], other.pool[r])] for r in REGIONS}
        return out

    def _pooled(self) -> dict:
        out = {}
        for r, (lab, sq, n, ss, ns) in self.pool.items():
            v = lab / n if n else None
            out[r] = {
                "rmse_lab": (math.sqrt(v) if self.literal and v is not None else v),
                "psnr_rgb": _psnr_from_mse(sq / n) if n else None,
                "ssim_rgb": ss / ns if ns else None,
            }
        return out

    def _sample_means(self) -> dict:
        out = {}
        for r in REGIONS:
            out[r] = {}
            for m in METRICS:
                vals = [row[f"{r}_{m}"] for row in self.rows if row[f"{r}_{m}"] is not None]
                out[r][m] = float(np.mean(vals)) if vals else None
        return out

    def report(self, aggregation: str = "sample") -> MetricsReport:
        pooled = self._pooled()
        regions = pooled if aggregation == "pixel" else self._sample_means()
        return MetricsReport(regions, len(self.rows), list(self.rows), aggregation, pooled)


def prepare_for_scoring(pred, gt, mask, size: int = 256):
    """Resize prediction, ground truth and mask to ``size`` x ``size``."""
    return resize(pred, size, size), resize(gt, size, size), resize_mask(mask, size, size)


def evaluate(predict, split, size: int = 256, aggregation: str = "sample", literal: bool = False) -> MetricsReport:
    """Score ``predict(shadow, mask) -> image`` over every sample that has a ground truth.

    ``predict=None`` scores each ground truth against itself (self-test).
    """
    acc = ReportAccumulator(literal)
    for i in range(len(split)):
        t = split[i]
        if t.shadow_free is None:
            log.warning("sample %s has no shadow-free image; skipped", t.id)
            continue
        pred = t.shadow_free if predict is None else predict(t.shadow, t.mask)
        acc.add(t.id, *prepare_for_scoring(pred, t.shadow_free, t.mask, size))
    if not acc.rows:
        raise ContractError("no sample with a shadow-free image to evaluate")
    return acc.report(aggregation)


def checkpoint_predictor(state: dict, refine: bool = True):
    """Build a ``predict(shadow, mask)`` callable from a loaded checkpoint."""
    import torch

    from .training import _mask_tensor, _to_numpy, _to_tensor, networks_from_checkpoint, remove_shadow

    deshadower, refiner = networks_from_checkpoint(state)

    @torch.no_grad()
    def predict(shadow, mask):
        out = remove_shadow(deshadower, refiner, _to_tensor(shadow)[None], _mask_tensor(mask)[None], refine)
        return _to_numpy(out[0])

    return predict


def evaluate_checkpoint(state: dict, split, **kwargs) -> MetricsReport:
    return evaluate(checkpoint_predictor(state), split, **kwargs)

