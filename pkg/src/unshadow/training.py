"""Weakly- and fully-supervised training loops, LR schedule, curriculum
ordering and checkpointing."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import pickle
import types
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .augmentation import (AugmentationConfig, MaskBank, curriculum_score, illumination_variants,
                           inpaint_shadow, refinement_positive, standard_augment, adjust_brightness,
                           brightness_levels)
from .datasets import DatasetSplit, SamplingExhausted, ShadowTriplet, sample_nonshadow_crop
from .imaging import ContractError, Region, embed, resize, resize_mask
from .networks import (CriticSpec, DenseUNet, GeneratorSpec, PatchCritic, ProjectionHead, VGGPerceptual,
                       sample_locations, set_deterministic)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "unshadow-checkpoint"
CHECKPOINT_VERSION = 1
WEAK_TERMS = ("critic_adv", "nce", "identity", "critic_distill", "gen_adv", "illumination", "refine_nce",
              "perceptual")
SUPERVISED_TERMS = ("nce", "identity", "illumination", "refine_nce", "perceptual", "pixel", "color", "style",
                    "supervised")


class NumericalError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    critic: CriticSpec = field(default_factory=CriticSpec)
    proj_dim: int = 256
    proj_hidden: int = 256
    num_patches: int = 256
    tau: float = L.DEFAULT_TAU


@dataclass
class TrainConfig:
    mode: str = "weak"
    epochs: int = 200
    lr_base: float = 1e-4
    decay_start_epoch: int = 75
    momentum: float = 0.9
    batch_size: int = 1
    train_resolution: int = 256
    seed: int = 0
    loss_term_weights: dict = field(default_factory=dict)
    sup_weights: L.LossWeights = field(default_factory=L.LossWeights)
    supervised_mu: float = 0.0
    crop_size: int = 64
    curriculum: bool = True
    inpaint: bool = True
    augment: bool = True
    deterministic: bool = True
    checkpoint_every: int = 10
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.mode not in ("weak", "supervised"):
            raise ValueError(f"mode must be 'weak' or 'supervised', got {self.mode!r}")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError("decay_start_epoch must lie in [0, epochs)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_base <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr_base must be positive and momentum in [0, 1)")
        self.loss_term_weights = {k: float(v) for k, v in self.loss_term_weights.items()}
        known = set(WEAK_TERMS) | set(SUPERVISED_TERMS)
        unknown = set(self.loss_term_weights) - known
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")

    def weight(self, term: str) -> float:
        return self.loss_term_weights.get(term, 1.0)


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Constant for ``decay_start_epoch`` epochs, then linear down to 0 at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr_base
    return cfg.lr_base * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch)


def curriculum_fraction(epoch: int, cfg: TrainConfig) -> float:
    return min(1.0, 0.3 + 0.7 * epoch / max(cfg.decay_start_epoch, 1))


def curriculum_order(split: DatasetSplit, enabled: bool, cfg: TrainConfig, rng: np.random.Generator,
                     scores: list[float] | None = None, epochs: range | None = None) -> list[np.ndarray]:
    """One index sequence per epoch.

    Disabled: a seeded shuffle of the whole split. Enabled: the easiest
    ``q(e)`` fraction by :func:`curriculum_score`, shuffled within the pool.
    """
    n = len(split)
    if n == 0:
        raise ContractError("cannot order an empty split")
    epochs = epochs if epochs is not None else range(cfg.epochs)
    if enabled and scores is None:
        scores = [curriculum_score(split[i]) for i in range(n)]
    ranked = np.argsort(np.asarray(scores), kind="stable") if enabled else None
    orders = []
    for e in epochs:
        if not enabled:
            orders.append(rng.permutation(n))
            continue
        k = max(1, math.ceil(curriculum_fraction(e, cfg) * n - 1e-9))
        orders.append(rng.permutation(ranked[:k]))
    return orders


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()


def _mask_tensor(mask: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask)).float()[None]


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(1, 2, 0).numpy()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def remove_shadow(deshadower, refiner, shadow: torch.Tensor, mask: torch.Tensor, refine: bool = True,
                  stages: dict | None = None) -> torch.Tensor:
    """Inference pipeline: region extraction, DeShadower, embedding, refinement."""
    region = shadow * mask
    removed, _ = deshadower(region, mask)
    embedded = embed(shadow, mask, removed)
    out = refiner(embedded)[0] if refine else embedded
    if stages is not None:
        stages.update(region=region, removed=removed, embedded=embedded, refined=out)
    return out


class Trainer:
    """Owns the networks, optimisers and RNG streams of one training run."""

    def __init__(self, cfg: TrainConfig, split: DatasetSplit, net_cfg: NetworkConfig | None = None,
                 aug_cfg: AugmentationConfig | None = None, extractor: VGGPerceptual | None = None):
        self.cfg = cfg
        self.split = split
        self.net_cfg = net_cfg = net_cfg or NetworkConfig()
        self.aug_cfg = aug_cfg or AugmentationConfig()
        if cfg.deterministic:
            set_deterministic(True)
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)

        self.deshadower = DenseUNet(net_cfg.generator)
        self.refiner = DenseUNet(net_cfg.generator)
        self.head_d = ProjectionHead(self.deshadower.tap_channels, net_cfg.proj_dim, net_cfg.proj_hidden)
        self.head_r = ProjectionHead(self.refiner.tap_channels, net_cfg.proj_dim, net_cfg.proj_hidden)
        self.illuminator = self.critic = None
        gen_params = [*self.deshadower.parameters(), *self.head_d.parameters()]
        if cfg.mode == "weak":
            self.illuminator = DenseUNet(net_cfg.generator)
            self.critic = PatchCritic(net_cfg.critic)
            gen_params += list(self.illuminator.parameters())
            self.opt_critic = self._sgd(self.critic.parameters())
        self.opt_gen = self._sgd(gen_params)
        self.opt_ref = self._sgd([*self.refiner.parameters(), *self.head_r.parameters()])
        self.extractor = extractor if extractor is not None else VGGPerceptual()

        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.inpaint = cfg.inpaint and self.aug_cfg.inpaint_enabled
        self.bank = MaskBank.from_split(split) if self.inpaint and len(split) else MaskBank()
        self._scores = None

    def _sgd(self, params):
        return torch.optim.SGD(params, lr=self.cfg.lr_base, momentum=self.cfg.momentum)

    def _update(self, opt, loss) -> float:
        """Backward, clip the gradient norm if configured, step; returns the pre-clip norm."""
        opt.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
        max_norm = self.cfg.grad_clip if self.cfg.grad_clip > 0 else float("inf")
        norm = torch.nn.utils.clip_grad_norm_(params, max_norm)
        opt.step()
        return float(norm)

    @property
    def optimizers(self) -> dict:
        opts = {"gen": self.opt_gen, "ref": self.opt_ref}
        if self.cfg.mode == "weak":
            opts["critic"] = self.opt_critic
        return opts

    @property
    def networks(self) -> dict:
        nets = {"deshadower": self.deshadower, "refiner": self.refiner, "head_d": self.head_d,
                "head_r": self.head_r}
        if self.cfg.mode == "weak":
            nets.update(illuminator=self.illuminator, critic=self.critic)
        return nets

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    # data -----------------------------------------------------------------

    def prepare(self, triplet: ShadowTriplet) -> ShadowTriplet:
        r = self.cfg.train_resolution
        t = triplet
        if t.mask.shape != (r, r):
            gt = resize(t.shadow_free, r, r) if t.shadow_free is not None else None
            t = ShadowTriplet(resize(t.shadow, r, r), resize_mask(t.mask, r, r), gt, t.id)
        if self.inpaint and len(self.bank) and t.mask.sum() > 0:
            t = inpaint_shadow(t, self.bank, self.rng, self.aug_cfg)
        if self.cfg.augment:
            t = standard_augment(t, self.aug_cfg, self.rng)
        return t

    def _crop(self, triplet: ShadowTriplet) -> torch.Tensor | None:
        size = self.cfg.crop_size
        try:
            region = sample_nonshadow_crop(triplet, (size, size), self.rng)
        except SamplingExhausted as exc:
            log.debug("%s", exc)
            return None
        return _to_tensor(region.data)[None]

    def _other_triplet(self, current: ShadowTriplet) -> ShadowTriplet | None:
        if len(self.split) < 2:
            return None
        i = int(self.rng.integers(len(self.split)))
        other = self.split[i]
        if other.id == current.id:
            return None
        r = self.cfg.train_resolution
        if other.mask.shape != (r, r):
            other = ShadowTriplet(resize(other.shadow, r, r), resize_mask(other.mask, r, r), None, other.id)
        return other

    # steps ----------------------------------------------------------------

    def _contrastive(self, net, head, query, positive, negative, support=None, query_taps=None,
                     negative_taps=None):
        fq = query_taps if query_taps is not None else net.encode(query)
        fn = negative_taps if negative_taps is not None else net.encode(negative)
        locs = sample_locations(fn, self.net_cfg.num_patches, self.gen, support)
        return L.layerwise_nce(head(fq, locs), head(net.encode(positive), locs), head(fn, locs),
                               self.net_cfg.tau)

    def _refine(self, shadow, mask, removed, record: dict, gt=None):
        cfg = self.cfg
        embedded = embed(shadow, mask, removed.detach())
        out, _ = self.refiner(embedded)
        positive = torch.stack([
            _to_tensor(refinement_positive(_to_numpy(e), m[0].numpy(), self.rng)) for e, m in zip(embedded, mask)
        ])
        ref_nce = self._contrastive(self.refiner, self.head_r, out, positive, shadow)
        perceptual = L.refinement_perceptual(self.extractor, out, embedded)
        total = cfg.weight("refine_nce") * ref_nce + cfg.weight("perceptual") * perceptual
        record.update(refine_nce=ref_nce, perceptual=perceptual)
        if gt is not None:
            parts = {}
            sup = L.supervised_total(self.extractor, out, gt, cfg.sup_weights, parts)
            total = total + cfg.weight("supervised") * sup
            record.update(parts, supervised=sup)
        record["grad_norm_ref"] = self._update(self.opt_ref, total)

    def _batch(self, triplets):
        shadow = torch.stack([_to_tensor(t.shadow) for t in triplets])
        mask = torch.stack([_mask_tensor(t.mask) for t in triplets])
        return shadow, mask

    def step_weak(self, triplets: list[ShadowTriplet]) -> dict | None:
        cfg = self.cfg
        triplets = [self.prepare(t) for t in triplets]
        if any(t.mask.sum() == 0 for t in triplets):
            log.warning("skipping step %d: empty shadow mask in %s", self.step, [t.id for t in triplets])
            return None
        shadow, mask = self._batch(triplets)
        region = shadow * mask
        record: dict = {}

        crops, variants = [], []
        for t in triplets:
            for src in (t, self._other_triplet(t)):
                crop = self._crop(src) if src is not None else None
                if crop is not None:
                    crops.append(crop)
            s_region = Region(t.shadow * t.mask[..., None], t.mask)
            variants += [_to_tensor(v.data)[None] for v in illumination_variants(s_region, self.aug_cfg.mu)]
        reals = crops + variants

        # (a) critic
        bright, _ = self.illuminator(region, mask)
        _, critic_adv = L.lsgan_terms(self.critic(bright.detach()), [self.critic(r) for r in reals])
        record["grad_norm_critic"] = self._update(self.opt_critic, cfg.weight("critic_adv") * critic_adv)
        record["critic_adv"] = critic_adv

        # (b) DeShadower, illumination generator and projection heads
        removed, region_taps = self.deshadower(region, mask)
        nce = self._contrastive(self.deshadower, self.head_d, removed, bright, region, support=mask,
                                negative_taps=region_taps)
        if crops:
            crop = torch.cat(crops)
            identity = L.identity_loss(self.deshadower, crop, torch.ones_like(crop[:, :1]))
        else:
            identity = removed.new_zeros(())
        distill = L.critic_distill_loss(self.critic, removed)
        with L.frozen(self.critic):
            gen_adv = ((1.0 - self.critic(bright)) ** 2).mean()
        illum = L.illumination_loss(removed, bright, mask)
        total = (cfg.weight("nce") * nce + cfg.weight("identity") * identity
                 + cfg.weight("critic_distill") * distill + cfg.weight("gen_adv") * gen_adv
                 + cfg.weight("illumination") * illum)
        record["grad_norm_gen"] = self._update(self.opt_gen, total)
        record.update(nce=nce, identity=identity, critic_distill=distill, gen_adv=gen_adv, illumination=illum)

        # (c) refinement
        self._refine(shadow, mask, removed, record)
        return self._finish(record, triplets)

    def step_supervised(self, triplets: list[ShadowTriplet]) -> dict | None:
        cfg = self.cfg
        for t in triplets:
            if t.shadow_free is None:
                raise ContractError(f"supervised training needs a shadow-free image for {t.id}")
        triplets = [self.prepare(t) for t in triplets]
        if any(t.mask.sum() == 0 for t in triplets):
            log.warning("skipping step %d: empty shadow mask in %s", self.step, [t.id for t in triplets])
            return None
        shadow, mask = self._batch(triplets)
        gt = torch.stack([_to_tensor(t.shadow_free) for t in triplets])
        region = shadow * mask
        record: dict = {}

        # augmented ground truth takes the illumination generator's place
        levels = brightness_levels(cfg.supervised_mu)
        bright = torch.stack([
            _to_tensor(adjust_brightness(Region(t.shadow_free * t.mask[..., None], t.mask),
                                         levels[int(self.rng.integers(3))]).data)
            for t in triplets
        ])
        removed, region_taps = self.deshadower(region, mask)
        nce = self._contrastive(self.deshadower, self.head_d, removed, bright, region, support=mask,
                                negative_taps=region_taps)
        crops = [c for c in (self._crop(t) for t in triplets) if c is not None]
        if crops:
            crop = torch.cat(crops)
            identity = L.identity_loss(self.deshadower, crop, torch.ones_like(crop[:, :1]))
        else:
            identity = removed.new_zeros(())
        illum = L.illumination_loss(removed, bright, mask)
        total = cfg.weight("nce") * nce + cfg.weight("identity") * identity + cfg.weight("illumination") * illum
        record["grad_norm_gen"] = self._update(self.opt_gen, total)
        record.update(nce=nce, identity=identity, illumination=illum)

        self._refine(shadow, mask, removed, record, gt=gt)
        return self._finish(record, triplets)

    def _finish(self, record: dict, triplets) -> dict:
        values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in record.items()}
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise NumericalError(f"non-finite {bad} at step {self.step} on batch {[t.id for t in triplets]}")
        values["step"] = self.step
        values["epoch"] = self.epoch
        self.history.append(values)
        self.step += 1
        return values

    def train_step(self, triplets) -> dict | None:
        fn = self.step_weak if self.cfg.mode == "weak" else self.step_supervised
        return fn(list(triplets))

    # epochs ---------------------------------------------------------------

    def epoch_order(self, epoch: int) -> np.ndarray:
        if self.cfg.curriculum and self._scores is None:
            self._scores = [curriculum_score(self.split[i]) for i in range(len(self.split))]
        return curriculum_order(self.split, self.cfg.curriculum, self.cfg, self.rng, self._scores,
                                epochs=range(epoch, epoch + 1))[0]

    def run_epoch(self, max_steps: int | None = None) -> dict:
        cfg = self.cfg
        self.set_lr(lr_schedule(self.epoch, cfg))
        for m in self.networks.values():
            m.train()
        order = self.epoch_order(self.epoch)
        rows = []
        complete = True
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and self.step >= max_steps:
                complete = False
                break
            batch = [self.split[int(i)] for i in order[start:start + cfg.batch_size]]
            rec = self.train_step(batch)
            if rec is not None:
                rows.append(rec)
        summary = {"epoch": self.epoch, "lr": lr_schedule(self.epoch, cfg), "steps": len(rows),
                   "complete": complete}
        terms = WEAK_TERMS if cfg.mode == "weak" else SUPERVISED_TERMS
        for k in terms:
            vals = [r[k] for r in rows if k in r]
            summary[k] = float(np.mean(vals)) if vals else float("nan")
        # an epoch cut short by max_steps does not count as done
        if complete:
            self.epoch += 1
        return summary

    @torch.no_grad()
    def infer(self, shadow: np.ndarray, mask: np.ndarray, refine: bool = True) -> np.ndarray:
        for m in self.networks.values():
            m.eval()
        out = remove_shadow(self.deshadower, self.refiner, _to_tensor(shadow)[None], _mask_tensor(mask)[None],
                            refine)
        return _to_numpy(out[0])

    # checkpoints ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "step": self.step,
            "config": {"train": dataclasses.asdict(self.cfg), "network": dataclasses.asdict(self.net_cfg),
                       "augment": dataclasses.asdict(self.aug_cfg)},
            "config_hash": config_hash(dataclasses.asdict(self.cfg)),
            "networks": {k: m.state_dict() for k, m in self.networks.items()},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "rng": {"numpy": self.rng.bit_generator.state, "torch": self.gen.get_state()},
            "history": self.history,
        }

    def load_state_dict(self, state: dict) -> None:
        check_checkpoint(state)
        for k, m in self.networks.items():
            m.load_state_dict(state["networks"][k])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.rng.bit_generator.state = state["rng"]["numpy"]
        self.gen.set_state(state["rng"]["torch"])
        self.epoch = state["epoch"]
        self.step = state["step"]
        self.history = list(state["history"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        # torch.save names the zip archive after the file; a buffer keeps the bytes path-independent
        buf = io.BytesIO()
        torch.save(self.state_dict(), buf, pickle_module=_memo_free_pickle)
        tmp.write_bytes(buf.getvalue())
        # atomic replace keeps the previous checkpoint loadable if interrupted
        tmp.replace(path)
        return path


class _MemoFreePickler(pickle.Pickler):
    """Pickler without a memo.

    The memo makes the bytes depend on which equal strings happen to be the
    same object, so a reloaded state would serialise differently.
    Tensors go through ``persistent_id`` and stay shared.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fast = True


_memo_free_pickle = types.SimpleNamespace(Pickler=_MemoFreePickler, __name__="unshadow_pickle")


def check_checkpoint(state: dict) -> None:
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an unshadow checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('version')}")


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    check_checkpoint(state)
    return state


def networks_from_checkpoint(state: dict) -> tuple[DenseUNet, DenseUNet]:
    """DeShadower and refiner in eval mode, rebuilt from a checkpoint."""
    from .config import build_dataclass

    net_cfg = build_dataclass(NetworkConfig, state["config"]["network"])
    deshadower = DenseUNet(net_cfg.generator)
    refiner = DenseUNet(net_cfg.generator)
    deshadower.load_state_dict(state["networks"]["deshadower"])
    refiner.load_state_dict(state["networks"]["refiner"])
    return deshadower.eval(), refiner.eval()


def fit(cfg: TrainConfig, split: DatasetSplit, out_dir, net_cfg: NetworkConfig | None = None,
        aug_cfg: AugmentationConfig | None = None, extractor: VGGPerceptual | None = None,
        resume=None, max_steps: int | None = None, trainer: Trainer | None = None) -> Path:
    """Train for ``cfg.epochs`` epochs; returns the final checkpoint path.

    Writes ``losses.csv`` (one row per epoch) and ``epoch_XXXX.pt`` every
    ``checkpoint_every`` epochs next to ``last.pt``.
    """
    if len(split) == 0:
        raise ContractError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = trainer or Trainer(cfg, split, net_cfg, aug_cfg, extractor)
    if resume is not None:
        trainer.load_state_dict(load_checkpoint(resume))
        log.info("resumed from %s at epoch %d", resume, trainer.epoch)

    csv_path = out_dir / "losses.csv"
    terms = WEAK_TERMS if cfg.mode == "weak" else SUPERVISED_TERMS
    fields = ["epoch", "lr", "steps", *terms]
    kept = []
    if resume is not None and csv_path.exists():
        # drop rows from epochs the resumed run will repeat
        with open(csv_path, newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["epoch"]) < trainer.epoch]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(kept)
    last = out_dir / "last.pt"
    while trainer.epoch < cfg.epochs:
        if max_steps is not None and trainer.step >= max_steps:
            break
        summary = trainer.run_epoch(max_steps)
        if not summary["complete"]:
            log.info("stopped after %d steps inside epoch %d", trainer.step, trainer.epoch)
            break
        with open(csv_path, "a", newline="") as fh:
            csv.DictWriter(fh, fields, extrasaction="ignore").writerow(summary)
        log.info("epoch %d: %s", summary["epoch"],
                 ", ".join(f"{k}={summary[k]:.4g}" for k in terms if k in summary))
        if trainer.epoch % cfg.checkpoint_every == 0:
            trainer.save(out_dir / f"epoch_{trainer.epoch:04d}.pt")
        trainer.save(last)
    if not last.exists():
        trainer.save(last)
    return last
