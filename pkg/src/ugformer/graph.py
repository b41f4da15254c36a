"""Graph bridge for skip connections: a Gram-matrix graph over spatial
positions, symmetric degree normalization, and two graph-conv layers whose
output is added back onto the feature map.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from torch import Tensor

from .errors import NegativeAdjacency, ShapeMismatch


def gram_affinity(f: Tensor) -> Tensor:
    """Row-stochastic similarity graph of a [C,H,W] feature map.

    Flattens to N = H*W node features and applies a row-wise softmax to
    X @ X.T / sqrt(C), so every row sums to 1.
    """
    c = f.shape[0]
    x = f.reshape(c, -1).transpose(0, 1)           # [N, C]
    return torch.softmax(x @ x.transpose(0, 1) / math.sqrt(c), dim=-1)


def gram_adjacency(f: Tensor) -> Tensor:
    """Symmetrized affinity: averaging with the transpose keeps entries in
    (0, 1] and makes the matrix exactly symmetric."""
    a = gram_affinity(f)
    return (a + a.transpose(0, 1)) / 2


def normalize_adjacency(a_sym: Tensor) -> Tensor:
    """Self-loop degree normalization: D^-1/2 (A + I) D^-1/2.

    Requires a non-negative input; the result is symmetric with every
    eigenvalue in [-1, 1].
    """
    if (a_sym < 0).any():
        raise NegativeAdjacency("adjacency entries must be non-negative")
    a_hat = a_sym + torch.eye(a_sym.shape[0], dtype=a_sym.dtype, device=a_sym.device)
    dinv = a_hat.sum(dim=-1).rsqrt()
    # elementwise outer scaling keeps bitwise symmetry
    return a_hat * (dinv.unsqueeze(-1) * dinv.unsqueeze(-2))


def gcn_layer_forward(p: Tensor, h: Tensor, w: Tensor) -> Tensor:
    """One graph-conv layer: ReLU(P @ H @ W)."""
    if p.shape[-1] != h.shape[0] or h.shape[1] != w.shape[0]:
        raise ShapeMismatch(
            f"incompatible GCN shapes P{tuple(p.shape)} H{tuple(h.shape)} W{tuple(w.shape)}")
    return torch.relu(p @ h @ w)


class GCNBridge(nn.Module):
    """Skip-connection transform: two GCN layers over the Gram graph, fused
    additively with the input feature map.

    Skipped entirely (identity) when H*W exceeds node_budget, since the
    adjacency is quadratic in the pixel count.
    """

    def __init__(self, channels: int, node_budget: int = 1024):
        super().__init__()
        self.channels = channels
        self.node_budget = node_budget
        self.w1 = nn.Parameter(torch.empty(channels, channels))
        self.w2 = nn.Parameter(torch.empty(channels, channels))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)

    def forward(self, f: Tensor) -> Tensor:
        b, c, h, w = f.shape
        if c != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {c}")
        if h * w > self.node_budget:
            return f
        outs = []
        for i in range(b):
            p = normalize_adjacency(gram_adjacency(f[i]))
            x = f[i].reshape(c, -1).transpose(0, 1)
            g = gcn_layer_forward(p, gcn_layer_forward(p, x, self.w1), self.w2)
            outs.append(f[i] + g.transpose(0, 1).reshape(c, h, w))
        return torch.stack(outs, dim=0)
