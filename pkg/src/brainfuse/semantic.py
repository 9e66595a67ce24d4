"""Semantic-level fusion: 3D-2D bridging, text-gated guidance, semantic attention.

The vision/text encoder pair is pluggable through :class:`EncoderInterface`.
:class:`ToyEncoder` is a deterministic random-projection stand-in used when
no pretrained weights are supplied.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

# Axis order of the spatial dims (D, H, W); first two in-plane, third = slicing axis.
PLANE_PERMUTATIONS: dict[str, tuple[int, int, int]] = {
    "axial": (0, 1, 2),
    "coronal": (0, 2, 1),
    "sagittal": (1, 2, 0),
}

DEFAULT_TEMPLATES = {
    "prefix": "brain MRI of a {tumor_type} glioma",
    "regions": {
        "et": "enhancing tumor",
        "ncr_net": "necrotic non-enhancing core",
        "ed": "peritumoral edema",
    },
    "with": " with {regions}",
    "none": " without visible tumor",
}


@dataclass
class SemanticConfig:
    embed_dim: int = 512
    shared_dim: int = 512
    num_heads: int = 8
    adapter_dropout: float = 0.1
    slice_hidden: int = 16
    image_size: int = 224
    attention_hidden: int = 16
    encoder_seed: int = 0
    freeze_encoder: bool = False
    encoder_checkpoint: str | None = None
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))

    def __post_init__(self) -> None:
        if self.shared_dim % self.num_heads:
            raise ConfigError(
                f"shared_dim {self.shared_dim} not divisible by num_heads {self.num_heads}"
            )


def semantic_weight(epoch: int, activation_epoch: int, ramp_epochs: int) -> float:
    """Blend factor for the semantic path: 0 before activation, linear ramp to 1."""
    if epoch < activation_epoch:
        return 0.0
    if ramp_epochs == 0:
        return 1.0
    return min(1.0, (epoch - activation_epoch + 1) / ramp_epochs)


def describe_regions(present: Sequence[str], tumor_type: str | None,
                     templates: dict | None = None) -> str:
    """Fill the template bank for a case with the given tissue classes present."""
    t = templates or DEFAULT_TEMPLATES
    text = t["prefix"].format(tumor_type=tumor_type or "unspecified")
    names = [t["regions"][r] for r in ("et", "ncr_net", "ed") if r in present]
    if names:
        joined = names[0] if len(names) == 1 else ", ".join(names[:-1]) + " and " + names[-1]
        text += t["with"].format(regions=joined)
    else:
        text += t["none"]
    return text


@dataclass
class SemanticFeatures:
    """Shared-space vectors of one batch, each shaped (B, dim).

    ``f_text_mapped`` and ``g_text`` are ``None`` when text guidance is off.
    """

    f_3d: torch.Tensor
    f_vision_mapped: torch.Tensor
    f_text_mapped: torch.Tensor | None
    f_combined: torch.Tensor
    f_fused: torch.Tensor
    g_text: torch.Tensor | None = None

    @classmethod
    def neutral(cls, batch: int, dim: int, embed_dim: int | None = None) -> "SemanticFeatures":
        """All-zero features; bias-free semantic gates evaluate to exactly 0.5."""
        z = torch.zeros(batch, dim)
        return cls(torch.zeros(batch, embed_dim or dim), z, z, z, z, torch.full((batch, dim), 0.5))


class EncoderInterface(Protocol):
    embed_dim: int

    def vision_encode(self, images: torch.Tensor) -> torch.Tensor: ...

    def text_encode(self, texts: Sequence[str]) -> torch.Tensor: ...


def _tokens(text: str) -> list[str]:
    return ["<s>"] + re.findall(r"[a-z0-9]+", text.lower())


class ToyEncoder(nn.Module):
    """Seeded random-projection vision/text encoder with unit-norm outputs.

    Vision: average-pool the 3x224x224 image to ``pooled`` x ``pooled`` and
    project linearly (a fixed linear map of the flattened image). Text: signed
    feature-hashing bag of tokens followed by a linear projection.
    """

    def __init__(self, embed_dim: int = 512, seed: int = 0, pooled: int = 16,
                 vocab_size: int = 4096, trainable: bool = False):
        super().__init__()
        self.embed_dim = embed_dim
        self.pooled = pooled
        self.vocab_size = vocab_size
        gen = torch.Generator().manual_seed(seed)
        n_in = 3 * pooled * pooled
        self.vision_proj = nn.Parameter(
            torch.randn(embed_dim, n_in, generator=gen) / math.sqrt(n_in), requires_grad=trainable
        )
        self.text_proj = nn.Parameter(
            torch.randn(embed_dim, vocab_size, generator=gen) / math.sqrt(vocab_size),
            requires_grad=trainable,
        )

    def vision_encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images[None]
        pooled = F.adaptive_avg_pool2d(images, self.pooled).flatten(1)
        return F.normalize(pooled @ self.vision_proj.T, dim=-1)

    def _bag(self, text: str) -> torch.Tensor:
        bag = torch.zeros(self.vocab_size, dtype=self.text_proj.dtype)
        for tok in _tokens(text):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
            bag[h % self.vocab_size] += 1.0 if (h >> 63) & 1 else -1.0
        return bag

    def text_encode(self, texts: str | Sequence[str]) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        bags = torch.stack([self._bag(t) for t in texts]).to(self.text_proj.device)
        return F.normalize(bags @ self.text_proj.T, dim=-1)


class SliceNet2d(nn.Module):
    """Small 2D network lifting a 4-channel slice to a 3-channel encoder image."""

    def __init__(self, in_channels: int = 4, hidden: int = 16, out_channels: int = 3,
                 image_size: int = 224):
        super().__init__()
        self.image_size = image_size
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.norm = nn.GroupNorm(math.gcd(8, hidden), hidden)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(F.relu(self.norm(self.conv1(x))))
        return F.interpolate(h, size=(self.image_size, self.image_size), mode="bilinear",
                             align_corners=False)


class Mapper(nn.Module):
    """Encoder space -> shared semantic space."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.1):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(F.gelu(self.linear(x)))


def extract_canonical_slices(x: torch.Tensor) -> dict[str, torch.Tensor]:
    """Center slices of a (B, C, D, H, W) or (C, D, H, W) volume along each plane.

    For each permutation the spatial axes are reordered so that the last one
    is the slicing axis, then index ``size // 2`` along it is taken.
    """
    x = torch.as_tensor(x)
    batched = x.dim() == 5
    if not batched:
        if x.dim() != 4:
            raise ValueError(f"expected (C, D, H, W) or (B, C, D, H, W), got {tuple(x.shape)}")
        x = x[None]
    out = {}
    for plane, perm in PLANE_PERMUTATIONS.items():
        y = x.permute(0, 1, *(p + 2 for p in perm))
        s = y[..., y.shape[-1] // 2]
        out[plane] = s if batched else s[0]
    return out


def fuse_views(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Arithmetic mean of the three per-plane feature vectors."""
    if len(features) != 3:
        raise ValueError(f"expected 3 view features, got {len(features)}")
    shapes = {tuple(f.shape) for f in features}
    if len(shapes) != 1:
        raise ValueError(f"view features differ in shape: {sorted(shapes)}")
    return (features[0] + features[1] + features[2]) / 3.0


def gated_fuse(f_vision_mapped: torch.Tensor, f_text_mapped: torch.Tensor):
    """Text-derived sigmoid gate mixing vision and text features.

    Returns ``(g_text, f_combined)`` with
    ``f_combined = f_vision * g + f_text * (1 - g)`` and ``g = sigmoid(f_text)``.
    """
    if f_vision_mapped.shape != f_text_mapped.shape:
        raise ValueError(
            f"vision {tuple(f_vision_mapped.shape)} and text {tuple(f_text_mapped.shape)} "
            "features must have equal shape"
        )
    g = torch.sigmoid(f_text_mapped)
    return g, f_vision_mapped * g + f_text_mapped * (1 - g)


class AttentionRefine(nn.Module):
    """``LayerNorm(f + MultiHead(f))`` with ``f`` as a length-1 token sequence."""

    def __init__(self, dim: int = 512, num_heads: int = 8, eps: float = 1e-6):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm = nn.LayerNorm(dim, eps=eps)
        self.last_weights: torch.Tensor | None = None

    def forward(self, f_combined: torch.Tensor) -> torch.Tensor:
        tokens = f_combined[:, None, :]
        attended, weights = self.attn(tokens, tokens, tokens, need_weights=True)
        self.last_weights = weights.detach()
        return self.norm(f_combined + attended[:, 0])


class SemanticSpatialAttention(nn.Module):
    """Damp a probability map by a spatial attention map from decoder + semantic features.

    ``feat(dec) + sem(f_fused)`` equals a 1x1x1 convolution over the channel
    concatenation of the decoder features and ``f_fused`` broadcast to every
    voxel, without materializing the broadcast.
    """

    def __init__(self, decoder_channels: int, semantic_dim: int, hidden: int = 16,
                 init_bias: float = 3.0):
        super().__init__()
        self.feat = nn.Conv3d(decoder_channels, hidden, 1)
        self.sem = nn.Linear(semantic_dim, hidden, bias=False)
        self.mix = nn.Conv3d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv3d(hidden, 1, 1)
        # start close to pass-through (sigmoid(3) ~ 0.95) so damping is learned, not imposed
        nn.init.constant_(self.out.bias, init_bias)

    def attention_map(self, f_decoder: torch.Tensor, f_fused: torch.Tensor) -> torch.Tensor:
        h = self.feat(f_decoder) + self.sem(f_fused)[:, :, None, None, None]
        h = F.relu(self.mix(F.relu(h)))
        return torch.sigmoid(self.out(h))

    def forward(self, y_base: torch.Tensor, f_decoder: torch.Tensor, f_fused: torch.Tensor,
                weight: float = 1.0) -> torch.Tensor:
        if y_base.shape[2:] != f_decoder.shape[2:]:
            raise ValueError(
                f"prediction {tuple(y_base.shape[2:])} and decoder features "
                f"{tuple(f_decoder.shape[2:])} are not spatially aligned"
            )
        att = self.attention_map(f_decoder, f_fused)
        if weight != 1.0:
            att = (1.0 - weight) + weight * att
        return y_base * att


def assemble_output(y_wt: torch.Tensor, y_tc: torch.Tensor, y_et: torch.Tensor) -> torch.Tensor:
    """Concatenate single-channel (B, 1, ...) predictions as [WT, TC, ET]."""
    if not (y_wt.shape == y_tc.shape == y_et.shape):
        raise ValueError(
            f"region predictions differ in shape: {tuple(y_wt.shape)}, "
            f"{tuple(y_tc.shape)}, {tuple(y_et.shape)}"
        )
    return torch.cat([y_wt, y_tc, y_et], dim=1)


def split_output(y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if y.shape[1] != 3:
        raise ValueError(f"expected 3 channels, got {y.shape[1]}")
    return y[:, 0:1], y[:, 1:2], y[:, 2:3]


class SemanticFusion(nn.Module):
    """Volume + description -> :class:`SemanticFeatures`."""

    def __init__(self, cfg: SemanticConfig | None = None, encoder: nn.Module | None = None,
                 guidance: bool = True, in_channels: int = 4):
        super().__init__()
        cfg = cfg or SemanticConfig()
        self.cfg = cfg
        self.guidance = guidance
        if encoder is None:
            encoder = ToyEncoder(cfg.embed_dim, seed=cfg.encoder_seed,
                                 trainable=not cfg.freeze_encoder)
        if encoder.embed_dim != cfg.embed_dim:
            raise ConfigError(f"encoder dim {encoder.embed_dim} != embed_dim {cfg.embed_dim}")
        self.encoder = encoder
        self.slice_net = SliceNet2d(in_channels, cfg.slice_hidden, 3, cfg.image_size)
        self.vision_mapper = Mapper(cfg.embed_dim, cfg.shared_dim, cfg.adapter_dropout)
        self.text_mapper = (
            Mapper(cfg.embed_dim, cfg.shared_dim, cfg.adapter_dropout) if guidance else None
        )
        self.refine = AttentionRefine(cfg.shared_dim, cfg.num_heads)

    def encode_volume(self, x: torch.Tensor) -> torch.Tensor:
        slices = extract_canonical_slices(x)
        views = [self.encoder.vision_encode(self.slice_net(slices[p])) for p in PLANE_PERMUTATIONS]
        return fuse_views(views)

    def forward(self, x: torch.Tensor, descriptions: Sequence[str] | None = None) -> SemanticFeatures:
        f_3d = self.encode_volume(x)
        f_vision = self.vision_mapper(f_3d)
        f_text = g = None
        if self.text_mapper is not None:
            if descriptions is None or len(descriptions) != x.shape[0]:
                raise ValueError("text guidance needs one description per batch element")
            emb = self.encoder.text_encode(list(descriptions)).to(f_vision.dtype)
            f_text = self.text_mapper(emb)
            g, f_combined = gated_fuse(f_vision, f_text)
        else:
            f_combined = f_vision
        f_fused = self.refine(f_combined)
        return SemanticFeatures(f_3d, f_vision, f_text, f_combined, f_fused, g)
