"""Differentiable building blocks: stem, patch aggregation, attention,
deformable convolution, the enhanced transformer block, and decoder stages.

All blocks keep the [batch, channel, height, width] layout and are pure
functions of (input, parameters); no block mutates its input.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import HeadMismatch, NonFiniteInput, OddSpatialDim, ShapeMismatch, SkipShapeMismatch


def _require_even_spatial(x: Tensor, who: str):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise OddSpatialDim(f"{who} needs even spatial dims, got {h}x{w}")


class Stem(nn.Module):
    """Input embedding: 3x3 stride-2 conv, GELU, then batch normalization."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        if not torch.isfinite(x).all():
            raise NonFiniteInput("stem input contains NaN/Inf")
        _require_even_spatial(x, "stem")
        return self.norm(F.gelu(self.conv(x)))


class PatchAggregation(nn.Module):
    """Downsampling between stages: 2x2 conv with stride 2, channels doubled."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2 * channels, 2, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        _require_even_spatial(x, "patch aggregation")
        return self.conv(x)


class ChannelLayerNorm(nn.Module):
    """Per-position layer norm over the channel axis of a [B,C,H,W] map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xhat = (x - mu) / torch.sqrt(var + self.eps)
        return xhat * self.weight[:, None, None] + self.bias[:, None, None]


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product attention over the H*W spatial tokens of a feature map."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise HeadMismatch(f"{num_heads} heads do not divide {channels} channels")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)
        self.w_o = nn.Linear(channels, channels, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise HeadMismatch(f"expected {self.channels} channels, got {c}")
        n = h * w
        t = x.flatten(2).transpose(1, 2)                       # [B, N, C]
        q = self.w_q(t).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.w_k(t).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.w_v(t).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.w_o(out)
        return out.transpose(1, 2).view(b, c, h, w)


def bilinear_sample(x: Tensor, py: Tensor, px: Tensor) -> Tensor:
    """Sample x [B,C,H,W] at fractional positions (py, px) of shape [B,K,H',W'].

    Positions outside the image contribute zero. Returns [B,K,C,H',W'].
    Differentiable in both x and the positions.
    """
    b, c, h, w = x.shape
    k = py.shape[1]
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    flat = x.reshape(b, 1, c, h * w).expand(b, k, c, h * w)
    out = None
    for yc, wy in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        for xc, wx in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).to(x.dtype)
            idx = (yc.clamp(0, h - 1) * w + xc.clamp(0, w - 1)).long()
            idx = idx.reshape(b, k, 1, -1).expand(b, k, c, -1)
            vals = torch.gather(flat, 3, idx).view(b, k, c, *py.shape[-2:])
            term = (wy * wx * valid).unsqueeze(2) * vals
            out = term if out is None else out + term
    return out


class DeformableConv2d(nn.Module):
    """3x3 stride-1 convolution whose taps are displaced by learned offsets.

    A companion 3x3 conv predicts 18 offset channels, a (dy, dx) pair per tap
    in row-major tap order; taps are read with bilinear interpolation and zero
    contribution outside the image. The offset predictor is zero-initialized,
    so a fresh block computes a plain convolution.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.offset_conv = nn.Conv2d(in_channels, 18, 3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def sampling_positions(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Absolute (py, px) sampling positions per tap, shape [B,9,H,W] each."""
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} channels, got {c}")
        off = self.offset_conv(x).view(b, 9, 2, h, w)
        taps = torch.arange(9, device=x.device)
        ky = (taps // 3 - 1).to(x.dtype).view(1, 9, 1, 1)
        kx = (taps % 3 - 1).to(x.dtype).view(1, 9, 1, 1)
        gy = torch.arange(h, device=x.device, dtype=x.dtype).view(1, 1, h, 1)
        gx = torch.arange(w, device=x.device, dtype=x.dtype).view(1, 1, 1, w)
        return gy + ky + off[:, :, 0], gx + kx + off[:, :, 1]

    def forward(self, x: Tensor) -> Tensor:
        py, px = self.sampling_positions(x)
        samples = bilinear_sample(x, py, px)                   # [B,9,Cin,H,W]
        w9 = self.weight.view(self.out_channels, self.in_channels, 9)
        out = torch.einsum("bkchw,ock->bohw", samples, w9)
        return out + self.bias.view(1, -1, 1, 1)


class FeedForward(nn.Module):
    """Pointwise expansion MLP: 1x1 conv C -> 4C, GELU, 1x1 conv 4C -> C."""

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, expansion * channels, 1)
        self.fc2 = nn.Conv2d(expansion * channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EnhancedTransformerBlock(nn.Module):
    """Transformer block with parallel attention and deformable-conv branches.

    z = x + a * mhsa(norm1(x)) + b * dconv(x); y = z + ffn(norm2(z)).
    The scalars a and b are learnable and weigh the two branches; either
    branch can be compiled out for ablations (at least one must remain).
    """

    def __init__(self, channels: int, num_heads: int,
                 use_mhsa: bool = True, use_dconv: bool = True):
        super().__init__()
        if not (use_mhsa or use_dconv):
            raise ShapeMismatch("at least one of the MHSA/deformable branches is required")
        self.use_mhsa = use_mhsa
        self.use_dconv = use_dconv
        self.norm1 = ChannelLayerNorm(channels) if use_mhsa else None
        self.mhsa = MultiHeadSelfAttention(channels, num_heads) if use_mhsa else None
        self.a = nn.Parameter(torch.tensor(1.0)) if use_mhsa else None
        self.dconv = DeformableConv2d(channels, channels) if use_dconv else None
        self.b = nn.Parameter(torch.tensor(1.0)) if use_dconv else None
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = FeedForward(channels)

    def forward(self, x: Tensor) -> Tensor:
        z = x
        if self.use_mhsa:
            z = z + self.a * self.mhsa(self.norm1(x))
        if self.use_dconv:
            z = z + self.b * self.dconv(x)
        return z + self.ffn(self.norm2(z))


class ConvUnit(nn.Module):
    """3x3 conv, GELU, batch norm. The shared convolutional texture of the net."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(F.gelu(self.conv(x)))


class DoubleConv(nn.Module):
    """Two stacked ConvUnits, the classic U-Net encoder block."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.unit1 = ConvUnit(in_channels, out_channels)
        self.unit2 = ConvUnit(out_channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.unit2(self.unit1(x))


class DecoderStage(nn.Module):
    """Upsample by a transposed conv, concatenate the skip, refine with convs.

    Takes [B,C,H,W] plus a skip of [B,C/2,2H,2W] and returns [B,C/2,2H,2W].
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ShapeMismatch("decoder stage channel count must be even")
        half = channels // 2
        self.up = nn.ConvTranspose2d(channels, half, 2, stride=2)
        self.unit1 = ConvUnit(channels, half)
        self.unit2 = ConvUnit(half, half)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        b, c, h, w = x.shape
        want = (b, c // 2, 2 * h, 2 * w)
        if tuple(skip.shape) != want:
            raise SkipShapeMismatch(f"skip shape {tuple(skip.shape)}, expected {want}")
        y = self.up(x)
        y = torch.cat([y, skip], dim=1)
        return self.unit2(self.unit1(y))
