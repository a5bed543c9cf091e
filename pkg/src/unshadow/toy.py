"""End-to-end toy overfit: train on a few synthetic triplets and measure the
shadow-region LAB error of the full pipeline before and after."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .augmentation import AugmentationConfig
from .datasets import DatasetSplit
from .evaluation import evaluate
from .networks import CriticSpec, GeneratorSpec, VGGPerceptual
from .synthetic import make_toy_split
from .training import NetworkConfig, Trainer, TrainConfig

log = logging.getLogger(__name__)

TOY_NETWORK = NetworkConfig(GeneratorSpec(base_channels=16, depth=3, dense_blocks_per_stage=1, layers_per_block=3),
                            CriticSpec(num_layers=3, base_channels=32), num_patches=64)


def toy_train_config(mode: str = "weak", steps: int = 2000, n: int = 8, seed: int = 0, **kwargs) -> TrainConfig:
    """Settings tuned for a 64x64 toy split; ``steps`` bounds the optimisation steps."""
    epochs = max(steps // n, 2)
    base = dict(mode=mode, epochs=epochs, decay_start_epoch=int(0.375 * epochs), lr_base=1e-2, grad_clip=1.0,
                train_resolution=64, crop_size=40, seed=seed, checkpoint_every=max(epochs, 1))
    base.update(kwargs)
    return TrainConfig(**base)


def shadow_error(trainer: Trainer, split: DatasetSplit, refine: bool = True) -> float:
    """Mean shadow-region LAB error of the pipeline output at native size."""
    size = split[0].mask.shape[0]
    report = evaluate(lambda s, m: trainer.infer(s, m, refine), split, size=size)
    return report.value("shadow", "rmse_lab")


@dataclass
class OverfitResult:
    mode: str
    steps: int
    before: float
    after: float
    seconds: float
    trace: list = field(default_factory=list)

    @property
    def reduction(self) -> float:
        return 1.0 - self.after / self.before


def overfit(mode: str = "weak", steps: int = 2000, seed: int = 0, n: int = 8, size: int = 64,
            split: DatasetSplit | None = None, extractor: VGGPerceptual | None = None,
            net_cfg: NetworkConfig | None = None, aug_cfg: AugmentationConfig | None = None,
            **train_kwargs) -> OverfitResult:
    split = split if split is not None else make_toy_split(n, size, seed=seed)
    cfg = toy_train_config(mode, steps, len(split), seed, **train_kwargs)
    extractor = extractor if extractor is not None else VGGPerceptual(allow_untrained=True)
    trainer = Trainer(cfg, split, net_cfg or TOY_NETWORK, aug_cfg, extractor)
    before = shadow_error(trainer, split)
    start = time.perf_counter()
    while trainer.epoch < cfg.epochs and trainer.step < steps:
        summary = trainer.run_epoch(max_steps=steps)
        if not summary["complete"]:
            break
    after = shadow_error(trainer, split)
    log.info("%s toy overfit: %.3f -> %.3f in %d steps", mode, before, after, trainer.step)
    return OverfitResult(mode, trainer.step, before, after, time.perf_counter() - start, trainer.history)
