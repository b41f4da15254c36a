"""Finite-difference verification of analytic gradients.

Every differentiable block is reduced to a scalar through a fixed random
projection of its output; central differences (h = 1e-5, float64) are then
compared against autograd coordinate by coordinate. Scalar parameters are
checked exhaustively, tensors on a random subset of coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .blocks import (DecoderStage, DeformableConv2d, EnhancedTransformerBlock,
                     MultiHeadSelfAttention, PatchAggregation, Stem)
from .errors import NonFiniteGradient
from .graph import GCNBridge
from .training import composite_loss

STEP = 1e-5
TOLERANCE = 1e-4
COORDS_PER_TENSOR = 32
SEAM_MARGIN = 1e-3

BLOCKS = ("stem", "patch_agg", "mhsa", "deform_conv", "etb",
          "gcn_bridge", "decoder", "composite_loss")


@dataclass
class ParamCheck:
    name: str
    coords: int
    max_rel_err: float
    passed: bool


@dataclass
class BlockReport:
    block: str
    passed: bool
    max_rel_err: float
    params: list[ParamCheck] = field(default_factory=list)

    def line(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{self.block:<16s} max_rel_err={self.max_rel_err:.3e}  {verdict}"


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def _push_offsets_off_seams(dconv: DeformableConv2d, x: torch.Tensor):
    """Give the offset predictor small nonzero weights and a bias that lands
    every sampling position at least SEAM_MARGIN away from integer gridlines,
    where bilinear interpolation is differentiable."""
    with torch.no_grad():
        dconv.offset_conv.weight.normal_(0.0, 0.003)
        dconv.offset_conv.bias.uniform_(0.15, 0.35)
        py, px = dconv.sampling_positions(x)
        dist = torch.minimum((py - py.round()).abs().min(),
                             (px - px.round()).abs().min())
    if float(dist) < SEAM_MARGIN:
        raise AssertionError(
            f"offset setup left a sampling position {float(dist):.2e} from an "
            f"integer gridline; the check requires at least {SEAM_MARGIN:g}")


def _projected(module: torch.nn.Module, inputs: tuple[torch.Tensor, ...],
               gen: torch.Generator):
    out = module(*inputs)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def f() -> torch.Tensor:
        return (module(*inputs) * proj).sum()

    return f, dict(module.named_parameters())


def _build(block: str, seed: int):
    """Return (f, params): f() recomputes the scalar from current params."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)

    if block == "stem":
        m = Stem(1, 4).double()
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        return _projected(m, (x,), gen)
    if block == "patch_agg":
        m = PatchAggregation(3).double()
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        return _projected(m, (x,), gen)
    if block == "mhsa":
        m = MultiHeadSelfAttention(8, num_heads=2).double()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        return _projected(m, (x,), gen)
    if block == "deform_conv":
        m = DeformableConv2d(3, 4).double()
        x = torch.rand(2, 3, 7, 7, dtype=torch.float64)
        _push_offsets_off_seams(m, x)
        return _projected(m, (x,), gen)
    if block == "etb":
        m = EnhancedTransformerBlock(8, num_heads=2).double()
        x = torch.rand(1, 8, 5, 5, dtype=torch.float64)
        _push_offsets_off_seams(m.dconv, x)
        return _projected(m, (x,), gen)
    if block == "gcn_bridge":
        m = GCNBridge(4, node_budget=64).double()
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        return _projected(m, (x,), gen)
    if block == "decoder":
        m = DecoderStage(8).double()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        skip = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        return _projected(m, (x, skip), gen)
    if block == "composite_loss":
        logits = torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
        gt = (torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64) > 0.5).double()

        def f() -> torch.Tensor:
            return composite_loss(logits, gt)

        return f, {"logits": logits}
    raise ValueError(f"unknown gradcheck block {block!r}; known: {', '.join(BLOCKS)}")


def check_block(block: str, seed: int = 0, step: float = STEP,
                tol: float = TOLERANCE,
                coords_per_tensor: int = COORDS_PER_TENSOR) -> BlockReport:
    f, params = _build(block, seed)

    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"{block}.{name}")
        analytic[name] = g.detach().clone()

    rng = np.random.default_rng(seed)
    report = BlockReport(block=block, passed=True, max_rel_err=0.0)
    for name, p in params.items():
        n = p.numel()
        if n <= coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_tensor, replace=False)
        flat = p.data.view(-1)
        grad_flat = analytic[name].view(-1)
        worst = 0.0
        ok = True
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + step
                f_plus = float(f())
                flat[c] = orig - step
                f_minus = float(f())
                flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = _rel_err(fd, float(grad_flat[c]))
            worst = max(worst, err)
            if err > tol:
                ok = False
        report.params.append(ParamCheck(name, len(coords), worst, ok))
        report.max_rel_err = max(report.max_rel_err, worst)
        report.passed = report.passed and ok
    return report


def run_blocks(blocks=BLOCKS, seed: int = 0, **kwargs) -> list[BlockReport]:
    return [check_block(b, seed=seed, **kwargs) for b in blocks]
