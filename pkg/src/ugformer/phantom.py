"""Deterministic synthetic phantoms: an elliptical cavity on a smooth
background with bright thin scar arcs on the rim, rendered in four scanner
styles (contrast via gamma, resolution via render-scale-then-resize).

Masks come from the analytic geometry at canvas resolution, so all style
variants of one seed share identical masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SpecOutOfBounds
from .pipeline import Sample, resize_bilinear

STYLES = ("high_contrast", "low_contrast", "high_res", "low_res")
STYLE_GAMMA = {"high_contrast": 0.8, "low_contrast": 1.6}
STYLE_RENDER_SCALE = {"high_res": 2.0, "low_res": 0.5}
CANVAS_MARGIN = 10  # ellipse must keep this many pixels from every border


@dataclass
class PhantomSpec:
    """Geometry and noise parameters for one phantom."""

    seed: int
    height: int = 224
    width: int = 224
    style: str = "high_contrast"
    center: tuple[float, float] = (112.0, 112.0)        # (cy, cx)
    semi_axes: tuple[float, float] = (40.0, 28.0)       # (a, b), pixels
    rotation: float = 0.0                               # radians
    arcs: tuple[tuple[float, float, float], ...] = ((20.0, 90.0, 3.0),)
    noise_sigma: float = 0.02

    def validate(self):
        if self.style not in STYLES:
            raise SpecOutOfBounds(f"unknown style {self.style!r}")
        if not 1 <= len(self.arcs) <= 3:
            raise SpecOutOfBounds("phantoms carry 1 to 3 scar arcs")
        for _, _, thickness in self.arcs:
            if not 2.0 <= thickness <= 4.0:
                raise SpecOutOfBounds(f"rim thickness {thickness} outside [2, 4] px")
        a, b = self.semi_axes
        cy, cx = self.center
        cos_t, sin_t = math.cos(self.rotation), math.sin(self.rotation)
        ex = math.hypot(a * cos_t, b * sin_t)
        ey = math.hypot(a * sin_t, b * cos_t)
        if (cx - ex < CANVAS_MARGIN or cx + ex > self.width - 1 - CANVAS_MARGIN
                or cy - ey < CANVAS_MARGIN or cy + ey > self.height - 1 - CANVAS_MARGIN):
            raise SpecOutOfBounds("ellipse closer than 10 px to the canvas border")

    @classmethod
    def random(cls, seed: int, height: int = 224, width: int = 224,
               style: str = "high_contrast") -> "PhantomSpec":
        """Draw a valid spec from the seed; geometry never depends on style."""
        rng = np.random.default_rng(seed)
        min_dim = min(height, width)
        if min_dim < 48:
            # largest ellipse extent is 0.26*min_dim; the 10 px border margin
            # (plus jitter room) stops fitting below 48 pixels
            raise SpecOutOfBounds(f"canvas {height}x{width} is too small; "
                                  "phantoms need at least 48x48")
        a = rng.uniform(0.14, 0.26) * min_dim
        b = rng.uniform(0.6, 0.95) * a
        rotation = rng.uniform(0.0, math.pi)
        cos_t, sin_t = math.cos(rotation), math.sin(rotation)
        ex = math.hypot(a * cos_t, b * sin_t)
        ey = math.hypot(a * sin_t, b * cos_t)
        cx = rng.uniform(CANVAS_MARGIN + ex + 1, width - 2 - CANVAS_MARGIN - ex)
        cy = rng.uniform(CANVAS_MARGIN + ey + 1, height - 2 - CANVAS_MARGIN - ey)
        n_arcs = int(rng.integers(1, 4))
        arcs = tuple(
            (float(rng.uniform(0.0, 360.0)), float(rng.uniform(40.0, 130.0)),
             float(rng.uniform(2.0, 4.0)))
            for _ in range(n_arcs))
        return cls(seed=seed, height=height, width=width, style=style,
                   center=(float(cy), float(cx)), semi_axes=(float(a), float(b)),
                   rotation=rotation, arcs=arcs)


def _ellipse_frame(spec: PhantomSpec, scale: float = 1.0):
    """Normalized ellipse coordinates (u, v) on a canvas scaled by `scale`.

    Pixel centers map through the same half-pixel convention the bilinear
    resize uses, so rescaled renders stay geometrically aligned.
    """
    h = int(round(spec.height * scale))
    w = int(round(spec.width * scale))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy = (spec.center[0] + 0.5) * scale - 0.5
    cx = (spec.center[1] + 0.5) * scale - 0.5
    a, b = spec.semi_axes[0] * scale, spec.semi_axes[1] * scale
    cos_t, sin_t = math.cos(spec.rotation), math.sin(spec.rotation)
    dx = xx - cx
    dy = yy - cy
    u = (dx * cos_t + dy * sin_t) / a
    v = (-dx * sin_t + dy * cos_t) / b
    return u, v


def _masks(spec: PhantomSpec):
    u, v = _ellipse_frame(spec)
    la = (u * u + v * v) <= 1.0
    edge = la & ~ndimage.binary_erosion(la)
    dist = ndimage.distance_transform_edt(~edge)
    phi = np.degrees(np.arctan2(v, u)) % 360.0
    scar = np.zeros_like(la)
    for start, span, thickness in spec.arcs:
        in_arc = ((phi - start) % 360.0) <= span
        scar |= (dist <= thickness / 2.0) & in_arc
    return la.astype(np.uint8), scar.astype(np.uint8)


def _render(spec: PhantomSpec, levels, scale: float = 1.0) -> np.ndarray:
    base, grad_x, grad_y, la_level, scar_level, blur = levels
    u, v = _ellipse_frame(spec, scale)
    h, w = u.shape
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    img = base + grad_x * xx + grad_y * yy
    rho2 = u * u + v * v
    img = np.where(rho2 <= 1.0, la_level, img)
    # the scar band needs the rim raster at this render scale
    la = rho2 <= 1.0
    edge = la & ~ndimage.binary_erosion(la)
    dist = ndimage.distance_transform_edt(~edge)
    phi = np.degrees(np.arctan2(v, u)) % 360.0
    for start, span, thickness in spec.arcs:
        in_arc = ((phi - start) % 360.0) <= span
        img = np.where((dist <= thickness * scale / 2.0) & in_arc, scar_level, img)
    return ndimage.gaussian_filter(img, blur * scale)


def generate_phantom(spec: PhantomSpec) -> Sample:
    """Render one phantom: deterministic in (seed, style), masks exact."""
    spec.validate()
    la_mask, scar_mask = _masks(spec)

    lvl_rng = np.random.default_rng([spec.seed, 71])
    levels = (
        float(lvl_rng.uniform(0.12, 0.20)),     # background base
        float(lvl_rng.uniform(-0.08, 0.08)),    # horizontal drift
        float(lvl_rng.uniform(-0.08, 0.08)),    # vertical drift
        float(lvl_rng.uniform(0.50, 0.60)),     # cavity level
        float(lvl_rng.uniform(0.85, 0.95)),     # scar level
        0.7,                                    # edge blur sigma
    )

    scale = STYLE_RENDER_SCALE.get(spec.style, 1.0)
    img = _render(spec, levels, scale)
    if scale != 1.0:
        img = resize_bilinear(img, spec.height, spec.width).astype(np.float64)
    gamma = STYLE_GAMMA.get(spec.style)
    if gamma is not None:
        img = np.clip(img, 0.0, None) ** gamma

    noise_rng = np.random.default_rng([spec.seed, STYLES.index(spec.style), 977])
    img = img + noise_rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    meta = {"seed": spec.seed, "style": spec.style,
            "orig_size": (spec.height, spec.width)}
    return Sample(img[None], la_mask, scar_mask, meta)


def random_phantom(seed: int, size: int = 224, style: str = "high_contrast") -> Sample:
    return generate_phantom(PhantomSpec.random(seed, size, size, style))


def phantom_set(count: int, size: int, styles, base_seed: int = 0) -> list[Sample]:
    """A list of phantoms with seeds base_seed..base_seed+count-1, cycling
    through the given styles."""
    styles = tuple(styles)
    return [random_phantom(base_seed + i, size, styles[i % len(styles)])
            for i in range(count)]
