"""Preprocessing, augmentation, and the two-stage cavity-then-scar
prediction procedure.

Images are numpy float32 arrays; masks are uint8 {0,1}. The x coordinate
indexes columns (width), y indexes rows (height).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import (
    AllBlackImage,
    EmptyMask,
    PatchRoiMismatch,
    RoiOutOfBounds,
    ZeroTargetSize,
)


@dataclass
class Sample:
    """One 2-D slice: image [1,H,W] in [0,1], optional binary masks [H,W]."""

    image: np.ndarray
    la_mask: Optional[np.ndarray] = None
    scar_mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image.shape[-2]

    @property
    def width(self) -> int:
        return self.image.shape[-1]


@dataclass
class Roi:
    """Inclusive pixel rectangle with the tolerance used to expand it and the
    original frame size needed for the zero-pad restore."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    tolerance: int
    orig_h: int
    orig_w: int

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1


def crop_black_margins(img: np.ndarray):
    """Strip leading/trailing rows and columns darker than 2% of the max.

    Returns the cropped image and the (row, col) offsets removed at the top
    and left, so masks can be co-cropped.
    """
    img = np.asarray(img)
    threshold = 0.02 * float(img.max())
    keep_rows = np.where(img.max(axis=1) > threshold)[0]
    keep_cols = np.where(img.max(axis=0) > threshold)[0]
    if keep_rows.size == 0 or keep_cols.size == 0:
        raise AllBlackImage("no pixel above the margin threshold")
    r0, r1 = keep_rows[0], keep_rows[-1]
    c0, c1 = keep_cols[0], keep_cols[-1]
    return img[r0:r1 + 1, c0:c1 + 1], (int(r0), int(c0))


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # align-corners-false convention, clamped to the valid range
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(s, 0.0, n_in - 1)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [H,W] array."""
    if out_h < 1 or out_w < 1:
        raise ZeroTargetSize(f"target size {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    sy = _source_coords(out_h, h)
    sx = _source_coords(out_w, w)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; keeps binary masks binary."""
    if out_h < 1 or out_w < 1:
        raise ZeroTargetSize(f"target size {out_h}x{out_w}")
    mask = np.asarray(mask)
    h, w = mask.shape
    iy = np.floor(_source_coords(out_h, h) + 0.5).astype(int).clip(0, h - 1)
    ix = np.floor(_source_coords(out_w, w) + 0.5).astype(int).clip(0, w - 1)
    return mask[np.ix_(iy, ix)]


def minmax_normalize(img: np.ndarray) -> np.ndarray:
    """Affine rescale to [0,1]; constant images map to all zeros."""
    img = np.asarray(img, dtype=np.float32)
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _sample_at(img: np.ndarray, sy: np.ndarray, sx: np.ndarray, order: int) -> np.ndarray:
    """Sample img at fractional (sy, sx); zero outside. order 1 bilinear, 0 nearest."""
    h, w = img.shape
    if order == 0:
        yr = np.floor(sy + 0.5).astype(int)
        xr = np.floor(sx + 0.5).astype(int)
        valid = (yr >= 0) & (yr < h) & (xr >= 0) & (xr < w)
        out = np.zeros(sy.shape, dtype=img.dtype)
        out[valid] = img[yr[valid], xr[valid]]
        return out
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    acc = np.zeros(sy.shape, dtype=np.float64)
    for yc, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xc, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            vals = img[yc.clip(0, h - 1), xc.clip(0, w - 1)]
            acc += wy * wx * np.where(valid, vals, 0.0)
    return acc.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


def rigid_transform(img: np.ndarray, angle_deg: float, dx: float, dy: float,
                    order: int = 1) -> np.ndarray:
    """Rotate about the image center then translate by (dx, dy) pixels.

    Resamples with zero fill; order 1 is bilinear (images), 0 nearest (masks).
    angle 0 with zero shift reproduces the input exactly.
    """
    img = np.asarray(img)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    rx = xx - cx - dx
    ry = yy - cy - dy
    sx = cos_t * rx + sin_t * ry + cx
    sy = -sin_t * rx + cos_t * ry + cy
    return _sample_at(img, sy, sx, order)


def max_translation(width: int) -> int:
    """Largest integer shift strictly below 0.1 * width."""
    return max(0, math.ceil(0.1 * width) - 1)


def augment_sample(s: Sample, rng: np.random.Generator) -> list[Sample]:
    """Four randomly rotated/translated copies of a sample.

    Angles are uniform in [0, 180] degrees; integer shifts satisfy
    |dx|, |dy| < 0.1 * width. The image is resampled bilinearly, masks with
    nearest neighbor, and the identical transform is applied to all of them.
    """
    out = []
    limit = max_translation(s.width)
    for _ in range(4):
        angle = float(rng.uniform(0.0, 180.0))
        dx = int(rng.integers(-limit, limit + 1))
        dy = int(rng.integers(-limit, limit + 1))
        image = rigid_transform(s.image[0], angle, dx, dy, order=1)[None]
        la = None if s.la_mask is None else rigid_transform(s.la_mask, angle, dx, dy, order=0)
        scar = None if s.scar_mask is None else rigid_transform(s.scar_mask, angle, dx, dy, order=0)
        meta = dict(s.meta, angle=angle, dx=dx, dy=dy)
        out.append(Sample(image.astype(np.float32), la, scar, meta))
    return out


def preprocess(img: np.ndarray, masks: list[np.ndarray] | None = None,
               out_h: int = 224, out_w: int = 224):
    """Margin crop, bilinear resize, min-max normalize; masks follow with
    the same crop and a nearest-neighbor resize."""
    cropped, (r0, c0) = crop_black_margins(img)
    ch, cw = cropped.shape
    image = minmax_normalize(resize_bilinear(cropped, out_h, out_w))
    resized_masks = None
    if masks is not None:
        resized_masks = [
            resize_nearest(m[r0:r0 + ch, c0:c0 + cw], out_h, out_w) for m in masks]
    return image, resized_masks


def compute_roi(la_mask: np.ndarray, tolerance: int = 30) -> Roi:
    """Bounding box of the mask expanded by the tolerance, clamped to bounds."""
    la_mask = np.asarray(la_mask)
    ys, xs = np.nonzero(la_mask)
    if ys.size == 0:
        raise EmptyMask("cannot compute an ROI from an empty mask")
    h, w = la_mask.shape
    return Roi(
        x_min=max(int(xs.min()) - tolerance, 0),
        y_min=max(int(ys.min()) - tolerance, 0),
        x_max=min(int(xs.max()) + tolerance, w - 1),
        y_max=min(int(ys.max()) + tolerance, h - 1),
        tolerance=tolerance,
        orig_h=h,
        orig_w=w,
    )


def crop_to_roi(img: np.ndarray, roi: Roi) -> np.ndarray:
    """Extract the inclusive ROI rectangle."""
    img = np.asarray(img)
    h, w = img.shape
    if not (0 <= roi.x_min <= roi.x_max < w and 0 <= roi.y_min <= roi.y_max < h):
        raise RoiOutOfBounds(f"roi {roi} outside {h}x{w} image")
    return img[roi.y_min:roi.y_max + 1, roi.x_min:roi.x_max + 1]


def restore_zero_pad(patch: np.ndarray, roi: Roi) -> np.ndarray:
    """Place a patch back into a zero canvas of the ROI's original frame size."""
    patch = np.asarray(patch)
    if patch.shape != (roi.height, roi.width):
        raise PatchRoiMismatch(f"patch {patch.shape} vs roi {roi.height}x{roi.width}")
    canvas = np.zeros((roi.orig_h, roi.orig_w), dtype=patch.dtype)
    canvas[roi.y_min:roi.y_max + 1, roi.x_min:roi.x_max + 1] = patch
    return canvas


@dataclass
class TwoStageResult:
    """Outputs of the coarse-to-fine prediction, one frame at a time."""

    la_mask: np.ndarray
    scar_mask: np.ndarray
    roi: Optional[Roi]
    patch: Optional[np.ndarray]     # resized model input for the scar stage
    empty_la: bool = False


def _predict_prob(model, image: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image[None], dtype=np.float32))
            prob = torch.sigmoid(model(x))[0, 0].numpy()
    finally:
        model.train(was_training)
    return prob


def two_stage_predict(image: np.ndarray, la_model, scar_model,
                      threshold: float = 0.5, tolerance: int = 30,
                      patch_size: int = 96) -> TwoStageResult:
    """Predict the cavity, crop its tolerance-expanded ROI, predict scars
    inside it, and restore the scar map to the full frame with zero padding.

    An empty first-stage mask short-circuits to an all-zero scar mask with
    the empty_la flag set instead of raising.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    h, w = image.shape[-2:]
    la_mask = (_predict_prob(la_model, image) > threshold).astype(np.uint8)
    if la_mask.sum() == 0:
        return TwoStageResult(la_mask, np.zeros((h, w), dtype=np.uint8),
                              roi=None, patch=None, empty_la=True)
    roi = compute_roi(la_mask, tolerance)
    patch = resize_bilinear(crop_to_roi(image[0], roi), patch_size, patch_size)
    scar_prob = _predict_prob(scar_model, patch[None])
    # resize probabilities (bounded values), then threshold back in ROI space
    prob_roi = resize_bilinear(scar_prob, roi.height, roi.width)
    scar_roi = (prob_roi > threshold).astype(np.uint8)
    scar_mask = restore_zero_pad(scar_roi, roi)
    return TwoStageResult(la_mask, scar_mask, roi=roi, patch=patch, empty_la=False)


def roi_patch_pairs(samples, tolerance: int = 30, patch_size: int = 96):
    """(patch_image [1,P,P], patch_scar_mask [P,P]) pairs for scar training.

    The ROI comes from each sample's reference cavity mask; slices with an
    empty cavity are skipped because they define no ROI.
    """
    pairs = []
    for s in samples:
        if s.la_mask.sum() == 0:
            continue
        roi = compute_roi(s.la_mask, tolerance)
        patch = resize_bilinear(crop_to_roi(s.image[0], roi), patch_size, patch_size)
        mask = resize_nearest(crop_to_roi(s.scar_mask, roi), patch_size, patch_size)
        pairs.append((patch[None], mask))
    return pairs
