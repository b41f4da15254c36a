"""Model assembly: the hybrid transformer segmentation network and a plain
U-Net baseline sharing the same decoder, bridge, and head, so bridge/encoder
ablations differ only in the toggled parts.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .blocks import DecoderStage, DoubleConv, EnhancedTransformerBlock, PatchAggregation, Stem
from .config import ModelConfig
from .errors import BadSpatialDivisibility, NonFiniteInput
from .graph import GCNBridge


class EncoderStage(nn.Module):
    """One transformer encoder level: patch aggregation then an ETB."""

    def __init__(self, channels: int, num_heads: int, use_mhsa: bool, use_dconv: bool):
        super().__init__()
        self.aggregate = PatchAggregation(channels)
        self.etb = EnhancedTransformerBlock(2 * channels, num_heads, use_mhsa, use_dconv)

    def forward(self, x: Tensor) -> Tensor:
        return self.etb(self.aggregate(x))


class ConvEncoderStage(nn.Module):
    """One U-Net encoder level: double conv then 2x2 max pooling."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = DoubleConv(in_channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(self.block(x), 2)


class Head(nn.Module):
    """Final upsample back to input resolution and 1x1 projection to logits."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.norm = nn.BatchNorm2d(channels)
        self.proj = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(F.gelu(self.up(x))))


class _SegmentationNet(nn.Module):
    """Shared skeleton: encoder pyramid, per-skip bridges, mirrored decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        if config.use_gcn:
            self.bridges = nn.ModuleList(
                GCNBridge(ch[i], config.node_budget) for i in range(config.num_stages))
        else:
            self.bridges = nn.ModuleList(nn.Identity() for _ in range(config.num_stages))
        self.decoder = nn.ModuleList(
            DecoderStage(ch[i + 1]) for i in reversed(range(config.num_stages)))
        self.head = Head(ch[0], config.num_classes)

    def encode(self, x: Tensor) -> list[Tensor]:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        stride = self.config.total_stride
        if h % stride or w % stride:
            raise BadSpatialDivisibility(
                f"input {h}x{w} not divisible by total stride {stride}")
        feats = self.encode(x)
        skips = [bridge(feats[i]) for i, bridge in enumerate(self.bridges)]
        y = feats[-1]
        for stage, skip in zip(self.decoder, reversed(skips)):
            y = stage(y, skip)
        return self.head(y)


class UGformer(_SegmentationNet):
    """Transformer encoder (stem + patch aggregation + ETBs), GCN skip bridges,
    convolutional decoder. Produces one logit map at input resolution."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        ch = config.stage_channels
        self.stem = Stem(config.in_channels, ch[0])
        self.stages = nn.ModuleList(
            EncoderStage(ch[i], config.num_heads, config.use_mhsa, config.use_dconv)
            for i in range(config.num_stages))

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class UNet(_SegmentationNet):
    """Plain convolutional baseline with the same feature pyramid, decoder,
    and optional bridges as the transformer model."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        ch = config.stage_channels
        self.stages = nn.ModuleList(
            ConvEncoderStage(config.in_channels if i == 0 else ch[i - 1], ch[i])
            for i in range(config.num_stages + 1))

    def encode(self, x: Tensor) -> list[Tensor]:
        if not torch.isfinite(x).all():
            raise NonFiniteInput("encoder input contains NaN/Inf")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def build_model(config: ModelConfig, seed: int | None = None) -> _SegmentationNet:
    """Construct the configured architecture, optionally with seeded init."""
    if seed is not None:
        torch.manual_seed(seed)
    cls = UGformer if config.arch == "ugformer" else UNet
    return cls(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_inventory(model: nn.Module) -> dict[str, tuple[int, ...]]:
    """Deterministic name -> shape map of all learnable parameters."""
    return {name: tuple(p.shape) for name, p in sorted(model.named_parameters())}


def forward_collect(model: nn.Module, x: Tensor, check_finite: bool = True):
    """Run a forward pass capturing every module output.

    Returns (output, {qualified module name: output tensor}). With
    check_finite, raises NonFiniteInput naming the first offending module.
    """
    captured: dict[str, Tensor] = {}
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            if isinstance(output, Tensor):
                captured[name] = output.detach()
                if check_finite and not torch.isfinite(output).all():
                    raise NonFiniteInput(f"non-finite intermediate at {name!r}")
        return hook

    for name, module in model.named_modules():
        if name:
            handles.append(module.register_forward_hook(make_hook(name)))
    try:
        out = model(x)
    finally:
        for h in handles:
            h.remove()
    if check_finite and not torch.isfinite(out).all():
        raise NonFiniteInput("non-finite model output")
    return out, captured
