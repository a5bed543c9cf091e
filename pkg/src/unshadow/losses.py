"""Training objectives. All tensors are NCHW; embeddings are (M, D) rows."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn

DEFAULT_TAU = 0.07


@dataclass
class NceBatch:
    query: torch.Tensor      # (Q, D)
    positive: torch.Tensor   # (Q, D)
    negatives: torch.Tensor  # (N, D) shared by every query, or (Q, N, D)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.query.shape != self.positive.shape:
            raise ValueError(f"query {tuple(self.query.shape)} and positive {tuple(self.positive.shape)} differ")


@dataclass
class LossWeights:
    lambda1: float = 1.0    # pixel
    lambda2: float = 1.0    # colour
    lambda3: float = 1.0e4  # style

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def info_nce(batch: NceBatch) -> torch.Tensor:
    """Mean over queries of the InfoNCE cross-entropy with the positive at index 0."""
    q, p, n = batch.query, batch.positive, batch.negatives
    pos = (q * p).sum(-1, keepdim=True)
    if n.dim() == 2:
        neg = q @ n.t()
    else:
        neg = torch.einsum("qd,qnd->qn", q, n)
    logits = torch.cat([pos, neg], dim=1) / batch.tau
    # logsumexp subtracts the row max internally
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def nce(query, positive, negatives, tau: float = DEFAULT_TAU) -> torch.Tensor:
    return info_nce(NceBatch(query, positive, negatives, tau))


def _layers(x):
    if isinstance(x, Mapping):
        return dict(x)
    return dict(enumerate(x))


def layerwise_nce(f, b, s, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Sum over layers of InfoNCE(query=f_l, positive=b_l, negatives=all of s_l).

    Layers are given as sequences or as mappings keyed by layer id.
    """
    f, b, s = _layers(f), _layers(b), _layers(s)
    if not (f.keys() == b.keys() == s.keys()):
        raise KeyError(f"layer ids differ: {sorted(f)} / {sorted(b)} / {sorted(s)}")
    if not f:
        raise ValueError("no layers given")
    return sum(nce(f[k], b[k], s[k], tau) for k in f)


refinement_nce = layerwise_nce


def masked_l1(a, b, mask) -> torch.Tensor:
    """Mean |a - b| over the pixels (and channels) where ``mask`` is 1."""
    mask = mask.expand_as(a)
    n = mask.sum()
    if n == 0:
        raise ValueError("empty support")
    return ((a - b).abs() * mask).sum() / n


def identity_loss(deshadower: nn.Module, sample, mask) -> torch.Tensor:
    """L1 between the generator's output on a shadow-free region and the region itself."""
    out, _ = deshadower(sample, mask)
    return masked_l1(out, sample, mask)


@contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients reaching ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def critic_distill_loss(critic: nn.Module, generated) -> torch.Tensor:
    """Mean over the patch score map of (1 - score)^2; the critic itself is not updated."""
    with frozen(critic):
        return ((1.0 - critic(generated)) ** 2).mean()


def lsgan_terms(fake_scores, real_scores: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator, critic) least-squares objectives from raw score maps."""
    gen = ((1.0 - fake_scores) ** 2).mean()
    real = torch.stack([((1.0 - r) ** 2).mean() for r in real_scores]).mean()
    return gen, (fake_scores ** 2).mean() + real


def adversarial_losses(critic: nn.Module, generated, real) -> tuple[torch.Tensor, torch.Tensor]:
    """LSGAN split: the generator term never reaches the critic and vice versa.

    ``real`` may be a tensor or a list of tensors of different sizes; their
    critic terms are averaged.
    """
    reals = [real] if torch.is_tensor(real) else list(real)
    with frozen(critic):
        gen_loss = ((1.0 - critic(generated)) ** 2).mean()
    _, critic_loss = lsgan_terms(critic(generated.detach()), [critic(r) for r in reals])
    return gen_loss, critic_loss


def illumination_loss(removed, bright, mask, bright_mask=None) -> torch.Tensor:
    if bright_mask is not None and not torch.equal(mask, bright_mask):
        raise ValueError("shadow-removed and bright regions have different supports")
    return masked_l1(removed, bright, mask)


def pixel_loss(pred, gt) -> torch.Tensor:
    return (pred - gt).abs().mean()


def color_loss(pred, gt) -> torch.Tensor:
    """Mean per-pixel angle between RGB vectors (channel dim 1).

    Uses atan2(|a x b|, a . b), which equals the clamped arccos of the
    normalised dot product but stays exact at zero angle and gives 0 for
    zero-norm pixels.
    """
    cross = torch.linalg.cross(pred, gt, dim=1)
    dot = (pred * gt).sum(1)
    # sqrt(sum sq) with a safe gradient at exactly zero
    sq = (cross ** 2).sum(1)
    nonzero = sq > 0
    norm = torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return torch.atan2(norm, dot).mean()


def gram(features) -> torch.Tensor:
    """V V^T / (C*H*W) for (C, H, W) or (N, C, H, W) features."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features[None]
    N, C, H, W = features.shape
    v = features.reshape(N, C, H * W)
    g = v @ v.transpose(1, 2) / (C * H * W)
    return g[0] if squeeze else g


def style_from_features(pred_feats, gt_feats) -> torch.Tensor:
    terms = [((gram(p) - gram(g)) ** 2).sum((-2, -1)).mean() for p, g in zip(pred_feats, gt_feats)]
    return sum(terms) / len(terms)


def style_loss(extractor: nn.Module, pred, gt) -> torch.Tensor:
    return style_from_features(extractor(pred), extractor(gt))


def perceptual_from_features(a_feats, b_feats) -> torch.Tensor:
    return 0.5 * sum(((a - b) ** 2).mean() for a, b in zip(a_feats, b_feats))


def refinement_perceptual(extractor: nn.Module, refined, reference) -> torch.Tensor:
    """Half the summed per-element MSE between relu5_1/relu5_3 activations."""
    return perceptual_from_features(extractor(refined), extractor(reference))


def supervised_total(extractor: nn.Module, pred, gt, weights: LossWeights | None = None,
                     parts: dict | None = None) -> torch.Tensor:
    w = weights or LossWeights()
    lp, lc, ls = pixel_loss(pred, gt), color_loss(pred, gt), style_loss(extractor, pred, gt)
    if parts is not None:
        parts.update(pixel=lp, color=lc, style=ls)
    return w.lambda1 * lp + w.lambda2 * lc + w.lambda3 * ls

