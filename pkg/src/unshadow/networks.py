"""Generators (DeShadower, Illumination generator, Refinement), the patch
critic, contrastive projection heads and the frozen VGG-16 extractor.

All modules work on NCHW float tensors in [0, 1].
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGIT_EPS = 1e-3
VGG_WEIGHTS_ENV = "UNSHADOW_VGG16_WEIGHTS"
VGG_DOWNLOAD_HINT = (
    "Download the torchvision ImageNet VGG-16 weights "
    "(https://download.pytorch.org/models/vgg16-397923af.pth) and point "
    f"${VGG_WEIGHTS_ENV} or paths.perceptual_weights at the file."
)


@dataclass
class GeneratorSpec:
    base_channels: int = 64
    depth: int = 4
    dense_blocks_per_stage: int = 2
    layers_per_block: int = 4
    skip_connections: bool = True

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"generator depth must be >= 3, got {self.depth}")
        if not self.skip_connections:
            raise ValueError("the DenseUNet generators always use skip connections")

    def stage_channels(self, i: int) -> int:
        return self.base_channels * min(2 ** i, 8)


@dataclass
class CriticSpec:
    num_layers: int = 4
    base_channels: int = 64

    @property
    def receptive_patch(self) -> int:
        # 4x4 kernels; all but the last feature layer have stride 2, then a stride-1 output conv
        rf = 4
        strides = [2] * (self.num_layers - 1) + [1]
        for s in reversed(strides):
            rf = (rf - 1) * s + 4
        return rf

    def score_size(self, n: int) -> int:
        for _ in range(self.num_layers - 1):
            n = (n + 2 - 4) // 2 + 1
        return n - 1 - 1


class DenseBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, growth: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_ch + i * growth, growth, 3, padding=1), nn.LeakyReLU(0.2))
            for i in range(n_layers)
        )
        self.compress = nn.Sequential(nn.Conv2d(in_ch + n_layers * growth, out_ch, 1), nn.LeakyReLU(0.2))

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, 1)))
        return self.compress(torch.cat(feats, 1))


def _dense_stack(in_ch, out_ch, spec: GeneratorSpec):
    growth = max(4, spec.base_channels // 2)
    blocks = [DenseBlock(in_ch if i == 0 else out_ch, out_ch, growth, spec.layers_per_block)
              for i in range(spec.dense_blocks_per_stage)]
    return nn.Sequential(*blocks)


class DenseUNet(nn.Module):
    """Encoder-decoder of dense blocks with symmetric skip connections.

    ``forward`` returns the output image and the encoder taps, one per
    downsampling stage (spatial sizes H/2, H/4, ..., H/2**depth). Without a
    normalisation layer: at batch size 1 batch/instance norm would discard
    the absolute illumination level the networks are meant to change.

    With ``residual=True`` (default) the head predicts a correction in logit
    space, ``sigmoid(logit(x) + h)``, and is zero-initialised so the untrained
    network is the identity (up to clamping inputs to [1e-3, 1 - 1e-3]).
    Unlike an additive residual clamped to [0, 1], saturated pixels keep a
    gradient. ``residual=False`` gives a plain sigmoid output.
    """

    def __init__(self, spec: GeneratorSpec | None = None, in_channels: int = 3, out_channels: int = 3,
                 residual: bool = True):
        super().__init__()
        self.spec = spec = spec or GeneratorSpec()
        self.residual = residual
        base = spec.base_channels
        self.stem = nn.Sequential(nn.Conv2d(in_channels, base, 3, padding=1), nn.LeakyReLU(0.2))
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        ch = base
        for i in range(spec.depth):
            out = spec.stage_channels(i)
            self.enc.append(_dense_stack(ch, out, spec))
            self.down.append(nn.Sequential(nn.Conv2d(out, spec.stage_channels(i + 1), 3, stride=2, padding=1),
                                           nn.LeakyReLU(0.2)))
            ch = spec.stage_channels(i + 1)
        self.bottleneck = _dense_stack(ch, ch, spec)
        self.dec = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            skip = spec.stage_channels(i)
            self.dec.append(_dense_stack(ch + skip, skip, spec))
            ch = skip
        self.head = nn.Conv2d(ch, out_channels, 3, padding=1)
        if residual:
            # starts as the identity map
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    @property
    def tap_channels(self) -> list[int]:
        return [self.spec.stage_channels(i + 1) for i in range(self.spec.depth)]

    def _pad(self, x):
        k = 2 ** self.spec.depth
        H, W = x.shape[-2:]
        ph, pw = (-H) % k, (-W) % k
        if ph or pw:
            mode = "reflect" if ph < H and pw < W else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return x, (H, W)

    def encode(self, x) -> list[torch.Tensor]:
        x, _ = self._pad(x)
        h = self.stem(x)
        taps = []
        for enc, down in zip(self.enc, self.down):
            h = down(enc(h))
            taps.append(h)
        return taps

    def forward(self, x, mask=None):
        inp = x
        x, (H, W) = self._pad(x)
        h = self.stem(x)
        skips, taps = [], []
        for enc, down in zip(self.enc, self.down):
            h = enc(h)
            skips.append(h)
            h = down(h)
            taps.append(h)
        h = self.bottleneck(h)
        for dec, skip in zip(self.dec, reversed(skips)):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = dec(torch.cat([h, skip], 1))
        h = self.head(h)[..., :H, :W]
        if self.residual:
            h = h + torch.logit(inp.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS))
        out = torch.sigmoid(h)
        if mask is not None:
            out = out * mask
        return out, taps


class PatchCritic(nn.Module):
    """PatchGAN-style critic producing an unbounded score per patch (LSGAN)."""

    def __init__(self, spec: CriticSpec | None = None, in_channels: int = 3):
        super().__init__()
        self.spec = spec = spec or CriticSpec()
        layers, ch = [], in_channels
        for i in range(spec.num_layers):
            out = spec.base_channels * min(2 ** i, 8)
            stride = 2 if i < spec.num_layers - 1 else 1
            layers += [nn.Conv2d(ch, out, 4, stride=stride, padding=1), nn.LeakyReLU(0.2)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        rf = self.spec.receptive_patch
        if min(x.shape[-2:]) < rf:
            raise ValueError(f"critic input {tuple(x.shape[-2:])} is smaller than its {rf}px receptive patch")
        return self.model(x)[:, 0]


class ProjectionHead(nn.Module):
    """One MLP with two hidden layers per tapped encoder layer; unit-norm outputs."""

    def __init__(self, in_channels: list[int], dim: int = 256, hidden: int = 256):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                          nn.Linear(hidden, dim))
            for c in in_channels
        )

    def forward(self, feats: list[torch.Tensor], locations: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != len(self.mlps) or len(locations) != len(feats):
            raise ValueError(f"expected {len(self.mlps)} layers, got {len(feats)} features / {len(locations)} index sets")
        out = []
        for mlp, f, idx in zip(self.mlps, feats, locations):
            B, C, H, W = f.shape
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= H * W):
                raise IndexError(f"sample location out of range for a {H}x{W} feature map")
            v = f.flatten(2)[:, :, idx].permute(0, 2, 1).reshape(-1, C)
            out.append(F.normalize(mlp(v), dim=1))
        return out


def sample_locations(feats: list[torch.Tensor], n: int = 256, generator: torch.Generator | None = None,
                     support: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Flat spatial indices per layer, shared by every stack built from same-sized inputs.

    With ``support`` (an N1HW mask at input resolution) locations are drawn
    from cells the mask touches, falling back to the whole map if none do.
    """
    out = []
    for f in feats:
        H, W = f.shape[-2:]
        cand = torch.arange(H * W)
        if support is not None:
            cover = F.adaptive_max_pool2d(support.float(), (H, W)).amax(0).flatten()
            inside = torch.nonzero(cover > 0).flatten()
            if inside.numel():
                cand = inside
        perm = torch.randperm(cand.numel(), generator=generator)[:min(n, cand.numel())]
        out.append(cand[perm])
    return out


class VGGPerceptual(nn.Module):
    """Frozen VGG-16 returning relu5_1 and relu5_3 activations."""

    # (out_channels or "M") for conv1_1 ... conv5_3
    CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
    TAPS = (25, 29)  # relu5_1, relu5_3 in torchvision's ``features`` indexing

    def __init__(self, weights: str | os.PathLike | None = None, allow_untrained: bool = False, seed: int = 0):
        super().__init__()
        layers, ch = [], 3
        for v in self.CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(ch, v, 3, padding=1), nn.ReLU(inplace=False)]
                ch = v
        self.features = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

        path = weights or os.environ.get(VGG_WEIGHTS_ENV)
        if path:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"VGG-16 weights not found at {path}. {VGG_DOWNLOAD_HINT}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            self.features.load_state_dict(state)
            self.pretrained = True
        elif allow_untrained:
            g = torch.Generator().manual_seed(seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                        m.bias.zero_()
            self.pretrained = False
        else:
            raise FileNotFoundError(f"no VGG-16 weights configured. {VGG_DOWNLOAD_HINT}")
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x) -> list[torch.Tensor]:
        h = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features[: self.TAPS[-1] + 1]):
            h = layer(h)
            if i in self.TAPS:
                taps.append(h)
        return taps


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
