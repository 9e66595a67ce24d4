"""Full three-layer model: semantic fusion wrapped around the segmentation network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError
from .segnet import (FEATURE_EXTRACTORS, AttentionGate, ChannelAttention, ModelOutput,
                     NetworkConfig, SegNet, SpatialAttention)
from .semantic import AttentionRefine, SemanticConfig, SemanticFusion, SemanticSpatialAttention

ATTENTION_MODULES = (ChannelAttention, SpatialAttention, AttentionGate, AttentionRefine,
                     SemanticSpatialAttention)
GROUPS = ("encoder_decoder", "clip_adapter", "attention")


@dataclass(frozen=True)
class AblationSwitches:
    pixel_fusion: bool = True
    semantic_fusion: bool = True
    semantic_guidance: bool = True
    semantic_attention: bool = True
    feature_extractor: str = "base"

    def __post_init__(self) -> None:
        if self.feature_extractor not in FEATURE_EXTRACTORS:
            raise ConfigError(
                f"unknown feature_extractor {self.feature_extractor!r}; choose from {FEATURE_EXTRACTORS}"
            )

    @property
    def guidance_active(self) -> bool:
        return self.semantic_fusion and self.semantic_guidance

    @property
    def attention_active(self) -> bool:
        return self.semantic_fusion and self.semantic_attention

    def to_dict(self) -> dict:
        return asdict(self)


class FusionSegmenter(nn.Module):
    """Pixel-normalized volume + description -> :class:`ModelOutput`.

    With ``semantic_fusion`` off this is exactly ``SegNet`` on its own.
    """

    def __init__(self, net_cfg: NetworkConfig | None = None, sem_cfg: SemanticConfig | None = None,
                 switches: AblationSwitches | None = None, encoder: nn.Module | None = None):
        super().__init__()
        net_cfg = net_cfg or NetworkConfig()
        sem_cfg = sem_cfg or SemanticConfig()
        switches = switches or AblationSwitches()
        self.net_cfg, self.sem_cfg, self.switches = net_cfg, sem_cfg, switches
        if switches.semantic_fusion:
            self.semantic = SemanticFusion(sem_cfg, encoder, guidance=switches.semantic_guidance,
                                           in_channels=net_cfg.in_channels)
        else:
            self.semantic = None
        self.segnet = SegNet(
            net_cfg,
            extractor=switches.feature_extractor,
            semantic_dim=sem_cfg.shared_dim if switches.semantic_fusion else None,
            semantic_attention=switches.attention_active,
            attention_hidden=sem_cfg.attention_hidden,
        )

    def forward(self, x: torch.Tensor, descriptions: Sequence[str] | None = None,
                semantic_weight: float = 1.0) -> ModelOutput:
        sem = None
        if self.semantic is not None and semantic_weight > 0:
            sem = self.semantic(x, descriptions)
        out = self.segnet(x, sem, semantic_weight)
        if sem is not None:
            out.extras["semantic"] = sem
        return out


def parameter_groups(model: nn.Module) -> dict[str, list[nn.Parameter]]:
    """Split trainable parameters into optimizer groups.

    ``attention``: CBAM, attention gates, the self-attention refinement and
    semantic spatial attention. ``clip_adapter``: encoder, slice network and
    mappers. Everything else is ``encoder_decoder``.
    """
    owner: dict[int, str] = {}
    for mod in model.modules():
        if isinstance(mod, ATTENTION_MODULES):
            for p in mod.parameters():
                owner[id(p)] = "attention"
    semantic = getattr(model, "semantic", None)
    if semantic is not None:
        for p in semantic.parameters():
            owner.setdefault(id(p), "clip_adapter")
    groups: dict[str, list[nn.Parameter]] = {g: [] for g in GROUPS}
    for p in model.parameters():
        if p.requires_grad:
            groups[owner.get(id(p), "encoder_decoder")].append(p)
    return groups
