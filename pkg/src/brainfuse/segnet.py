"""Feature-level fusion: attention-enhanced residual 3D U-Net with deep supervision.

Encoder: four resolution levels then a bottleneck (channels 32 -> 512 by
default), each a residual block with CBAM. Downsampling is by strided
convolution, upsampling by trilinear interpolation followed by a convolution.
Skip connections pass through attention gates driven by the coarser decoder
signal. Auxiliary heads sit on the three coarsest decoder levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .semantic import SemanticFeatures, SemanticSpatialAttention, assemble_output

FEATURE_EXTRACTORS = ("base", "3d_resnet", "2d_resnet", "plain_unet", "none")


@dataclass
class NetworkConfig:
    in_channels: int = 4
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_channels: int = 512
    out_regions: int = 3
    deep_supervision_levels: int = 3
    dropout: float = 0.1
    head_dropout: tuple[float, float] = (0.3, 0.2)
    head_hidden: int = 128
    n_classes: int = 2
    cbam_reduction: int = 8
    spatial_kernel: int = 7
    norm_groups: int = 8
    # initial foreground probability of every region output (sets the head bias)
    output_prior: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 < self.output_prior < 1.0:
            raise ConfigError(f"output_prior must be in (0, 1), got {self.output_prior}")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.head_dropout = tuple(float(p) for p in self.head_dropout)
        chans = self.channels
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"channel plan must be strictly increasing, got {chans}")
        if self.out_regions != 3:
            raise ConfigError("out_regions must be 3 (WT, TC, ET)")
        if not 0 <= self.deep_supervision_levels <= len(self.encoder_channels) - 1:
            raise ConfigError(
                f"deep_supervision_levels must be in [0, {len(self.encoder_channels) - 1}]"
            )

    @property
    def channels(self) -> tuple[int, ...]:
        return self.encoder_channels + (self.bottleneck_channels,)

    @property
    def levels(self) -> int:
        """Number of 2x downsamplings between input and bottleneck."""
        return len(self.encoder_channels)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def _conv(in_ch, out_ch, kernel=3, stride=1, planar=False, bias=False) -> nn.Conv3d:
    if planar:
        # slice-wise 2D: no mixing along depth; stride still halves depth to keep the grid
        return nn.Conv3d(in_ch, out_ch, (1, kernel, kernel), stride, (0, kernel // 2, kernel // 2),
                         bias=bias)
    return nn.Conv3d(in_ch, out_ch, kernel, stride, kernel // 2, bias=bias)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv3d(channels, hidden, 1), nn.ReLU(), nn.Conv3d(hidden, channels, 1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool3d(x, 1))
        mx = self.mlp(F.adaptive_max_pool3d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel attention then spatial attention, both multiplicative."""

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.channel(x)
        return x * self.spatial(x)


class ResidualCBAMBlock(nn.Module):
    """``shortcut(x) + CBAM(norm(conv(relu(norm(conv(x))))))``.

    ``cbam=False`` gives a plain residual block; ``residual=False`` a plain
    double convolution (with a trailing ReLU); ``planar=True`` swaps the 3x3x3
    kernels for 1x3x3 ones.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, *, cbam: bool = True,
                 residual: bool = True, planar: bool = False, groups: int = 8,
                 reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        if in_ch < 1 or out_ch < 1:
            raise ValueError(f"invalid channel counts {in_ch} -> {out_ch}")
        self.in_channels = in_ch
        self.conv1 = _conv(in_ch, out_ch, 3, stride, planar)
        self.norm1 = _norm(out_ch, groups)
        self.conv2 = _conv(out_ch, out_ch, 3, 1, planar)
        self.norm2 = _norm(out_ch, groups)
        self.cbam = CBAM(out_ch, reduction, spatial_kernel) if cbam else None
        self.residual = residual
        if residual and (in_ch != out_ch or stride != 1):
            self.shortcut = nn.Conv3d(in_ch, out_ch, 1, stride, bias=False)
        else:
            self.shortcut = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        if self.cbam is not None:
            h = self.cbam(h)
        if not self.residual:
            return F.relu(h)
        return h + (x if self.shortcut is None else self.shortcut(x))


class AttentionGate(nn.Module):
    """Filter skip features by ``alpha = sigmoid(psi(relu(theta(skip) + phi(gating))))``.

    The gating signal is trilinearly resized to the skip's grid first.
    """

    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int | None = None):
        super().__init__()
        inter = inter_channels or max(skip_channels // 2, 1)
        self.skip_channels = skip_channels
        self.gating_channels = gating_channels
        self.theta = nn.Conv3d(skip_channels, inter, 1, bias=False)
        self.phi = nn.Conv3d(gating_channels, inter, 1)
        self.psi = nn.Conv3d(inter, 1, 1)

    def coefficients(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        if skip.shape[1] != self.skip_channels or gating.shape[1] != self.gating_channels:
            raise ValueError(
                f"attention gate expects skip/gating channels {self.skip_channels}/"
                f"{self.gating_channels}, got {skip.shape[1]}/{gating.shape[1]}"
            )
        g = F.interpolate(gating, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.theta(skip) + self.phi(g))))

    def forward(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        return skip * self.coefficients(skip, gating)


class ConditionalHead(nn.Module):
    """Segmentation head whose normalization can be scaled/shifted by ``f_fused``."""

    def __init__(self, channels: int, out_channels: int, groups: int = 8,
                 semantic_dim: int | None = None):
        super().__init__()
        self.conv = _conv(channels, channels, 3)
        self.norm = _norm(channels, groups)
        self.out = nn.Conv3d(channels, out_channels, 1)
        if semantic_dim:
            self.cond_scale = nn.Linear(semantic_dim, channels)
            self.cond_shift = nn.Linear(semantic_dim, channels)
            for lin in (self.cond_scale, self.cond_shift):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        else:
            self.cond_scale = self.cond_shift = None

    def forward(self, x, f_fused=None, weight: float = 1.0) -> torch.Tensor:
        h = self.norm(self.conv(x))
        if f_fused is not None and self.cond_scale is not None:
            scale = 1.0 + weight * self.cond_scale(f_fused)
            shift = weight * self.cond_shift(f_fused)
            h = h * scale[:, :, None, None, None] + shift[:, :, None, None, None]
        return self.out(F.relu(h))


@dataclass
class ModelOutput:
    main: torch.Tensor
    aux: list[torch.Tensor]
    class_logits: torch.Tensor
    bottleneck_features: torch.Tensor
    decoder_features: torch.Tensor
    base_main: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


class SegNet(nn.Module):
    """Attention-enhanced 3D U-Net.

    Args:
        cfg: channel plan and head settings.
        extractor: one of ``FEATURE_EXTRACTORS``. ``"none"`` drops the whole
            encoder/decoder, leaving heads that see all-zero features.
        semantic_dim: size of ``f_fused``; enables the bottleneck semantic gate
            and conditional head normalization.
        semantic_attention: add the semantic spatial attention on TC and ET.
    """

    def __init__(self, cfg: NetworkConfig | None = None, extractor: str = "base",
                 semantic_dim: int | None = None, semantic_attention: bool = False,
                 attention_hidden: int = 16):
        super().__init__()
        cfg = cfg or NetworkConfig()
        if extractor not in FEATURE_EXTRACTORS:
            raise ConfigError(f"unknown feature extractor {extractor!r}; choose from {FEATURE_EXTRACTORS}")
        self.cfg = cfg
        self.extractor = extractor
        self.semantic_dim = semantic_dim
        ch = cfg.channels
        g = cfg.norm_groups

        if extractor != "none":
            opts = dict(
                cbam=extractor == "base",
                residual=extractor != "plain_unet",
                planar=extractor == "2d_resnet",
                groups=g, reduction=cfg.cbam_reduction, spatial_kernel=cfg.spatial_kernel,
            )
            self.encoder = nn.ModuleList(
                [ResidualCBAMBlock(cfg.in_channels, ch[0], 1, **opts)]
                + [ResidualCBAMBlock(ch[i - 1], ch[i], 2, **opts) for i in range(1, len(ch))]
            )
            self.bottleneck_dropout = nn.Dropout(cfg.dropout)
            planar = extractor == "2d_resnet"
            self.up = nn.ModuleList(
                nn.Sequential(_conv(ch[i + 1], ch[i], 3, planar=planar), _norm(ch[i], g), nn.ReLU())
                for i in range(cfg.levels)
            )
            self.decoder = nn.ModuleList(
                ResidualCBAMBlock(2 * ch[i], ch[i], 1, **opts) for i in range(cfg.levels)
            )
            if extractor == "base":
                self.gates = nn.ModuleList(AttentionGate(ch[i], ch[i + 1]) for i in range(cfg.levels))
            else:
                self.gates = None
        else:
            self.encoder = self.up = self.decoder = self.gates = None

        if semantic_dim:
            self.semantic_gate = nn.Linear(semantic_dim, ch[-1], bias=False)
        else:
            self.semantic_gate = None
        self.head = ConditionalHead(ch[0], 3, g, semantic_dim)
        self.aux_heads = nn.ModuleList(
            nn.Conv3d(ch[i], 3, 1) for i in range(1, cfg.deep_supervision_levels + 1)
        )
        # start from "mostly background" so a featureless head stays background
        prior = math.log(cfg.output_prior / (1.0 - cfg.output_prior))
        for conv in [self.head.out, *self.aux_heads]:
            nn.init.constant_(conv.bias, prior)
        if semantic_dim and semantic_attention:
            self.tc_attention = SemanticSpatialAttention(ch[0], semantic_dim, attention_hidden)
            self.et_attention = SemanticSpatialAttention(ch[0], semantic_dim, attention_hidden)
        else:
            self.tc_attention = self.et_attention = None
        p1, p2 = cfg.head_dropout
        self.classifier = nn.Sequential(
            nn.Dropout(p1), nn.Linear(ch[-1], cfg.head_hidden), nn.ReLU(),
            nn.Dropout(p2), nn.Linear(cfg.head_hidden, cfg.n_classes),
        )

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input (B, {self.cfg.in_channels}, D, H, W), got {tuple(x.shape)}"
            )
        k = 2 ** self.cfg.levels
        spatial = tuple(x.shape[2:])
        if any(s % k for s in spatial):
            padded = tuple(math.ceil(s / k) * k for s in spatial)
            raise ValueError(
                f"spatial dims {spatial} must be divisible by {k}; pad input to {padded}"
            )

    def _features(self, x: torch.Tensor, gate=None):
        if self.encoder is None:
            b, (d, h, w) = x.shape[0], x.shape[2:]
            ch = self.cfg.channels
            feats = [x.new_zeros(b, ch[i], d >> i, h >> i, w >> i) for i in range(len(ch))]
            bott = feats[-1]
            if gate is not None:
                bott = bott * gate
            return feats[:-1], bott
        skips = []
        h = x
        for i, block in enumerate(self.encoder):
            h = block(h)
            if i < self.cfg.levels:
                skips.append(h)
        h = self.bottleneck_dropout(h)
        if gate is not None:
            h = h * gate
        bott = h
        dec = [None] * self.cfg.levels
        for i in reversed(range(self.cfg.levels)):
            up = self.up[i](F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False))
            skip = skips[i] if self.gates is None else self.gates[i](skips[i], h)
            h = self.decoder[i](torch.cat([up, skip], dim=1))
            dec[i] = h
        return dec, bott

    def forward(self, x: torch.Tensor, semantic: SemanticFeatures | None = None,
                semantic_weight: float = 1.0) -> ModelOutput:
        self.check_input(x)
        use_sem = semantic is not None and self.semantic_dim is not None
        f = semantic.f_fused if use_sem else None
        gate = None
        if use_sem:
            gate = torch.sigmoid(self.semantic_gate(f))[:, :, None, None, None]
            if semantic_weight != 1.0:
                gate = (1.0 - semantic_weight) + semantic_weight * gate
        dec, bott = self._features(x, gate)

        probs = torch.sigmoid(self.head(dec[0], f, semantic_weight))
        y_wt, y_tc, y_et = probs[:, 0:1], probs[:, 1:2], probs[:, 2:3]
        if use_sem and self.tc_attention is not None:
            y_tc = self.tc_attention(y_tc, dec[0], f, semantic_weight)
            y_et = self.et_attention(y_et, dec[0], f, semantic_weight)
        main = assemble_output(y_wt, y_tc, y_et)
        aux = [torch.sigmoid(head(dec[i + 1])) for i, head in enumerate(self.aux_heads)]
        logits = self.classifier(F.adaptive_avg_pool3d(bott, 1).flatten(1))
        return ModelOutput(main, aux, logits, bott, dec[0], base_main=probs)


def describe(model: nn.Module) -> dict:
    """Parameter totals per top-level child plus overall count."""
    per_child = {name: sum(p.numel() for p in mod.parameters()) for name, mod in model.named_children()}
    return {
        "total_parameters": sum(p.numel() for p in model.parameters()),
        "trainable_parameters": sum(p.numel() for p in model.parameters() if p.requires_grad),
        "children": {k: v for k, v in per_child.items() if v},
    }
