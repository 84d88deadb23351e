"""Training-time image augmentations on the cylindrical grid.

Yaw rotation of the sensor is exactly a cyclic column shift of the image, so
the shift is the one augmentation that must be bit-exact.  The three mask
families knock pixels out (data zeroed, validity cleared): random squares up
to a total area budget, one contiguous wrap-around column band, and thin
horizontal line rectangles imitating projection artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .riv import RivImage


@dataclass(frozen=True)
class AugmentSpec:
    """Augmentation caps; all randomness is driven by `rng_seed`."""

    yaw_shift: int = 0
    square_mask_ratio_max: float = 0.4
    cyl_mask_width_max: float = 0.3
    line_mask_count_max: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.square_mask_ratio_max <= 0.4):
            raise ValueError("square_mask_ratio_max must be in [0, 0.4]")
        if not (0.0 <= self.cyl_mask_width_max <= 0.3):
            raise ValueError("cyl_mask_width_max must be in [0, 0.3]")
        if self.line_mask_count_max < 0:
            raise ValueError("line_mask_count_max must be >= 0")


def yaw_shift(img: RivImage, s: int) -> RivImage:
    """Cyclic column shift: output column q holds input column (q - s) mod W."""
    s = int(s) % img.width
    if s == 0:
        return img
    return RivImage(np.roll(img.data, s, axis=1), np.roll(img.valid_mask, s, axis=1), img.config)


def cylindrical_mask_columns(width: int, start: int, band: int) -> np.ndarray:
    """Column indices of a contiguous band of `band` columns from `start`, wrapping."""
    return (start + np.arange(band)) % width


def build_mask(spec: AugmentSpec, shape: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of pixels to knock out, deterministic in the seed.

    Square masks are added while the union stays within the sampled area
    budget (never above ``square_mask_ratio_max`` of the image); the
    cylindrical band is at most ``cyl_mask_width_max`` of the width; line
    masks are 1-3 rows tall and at least a quarter of the width long.
    """
    H, W = shape
    rng = np.random.default_rng(spec.rng_seed)
    mask = np.zeros((H, W), dtype=bool)

    budget = int(np.floor(rng.uniform(0.0, spec.square_mask_ratio_max) * H * W))
    if budget > 0:
        side_hi = max(2, min(H, W) // 2)
        for _ in range(16):
            if mask.sum() >= budget:
                break
            side = int(rng.integers(1, side_hi + 1))
            r = int(rng.integers(0, max(H - side, 0) + 1))
            c = int(rng.integers(0, max(W - side, 0) + 1))
            trial = mask.copy()
            trial[r : r + side, c : c + side] = True
            if trial.sum() <= budget:
                mask = trial

    band = int(np.floor(rng.uniform(0.0, spec.cyl_mask_width_max) * W))
    if band > 0:
        start = int(rng.integers(0, W))
        mask[:, cylindrical_mask_columns(W, start, band)] = True

    n_lines = int(rng.integers(0, spec.line_mask_count_max + 1)) if spec.line_mask_count_max else 0
    for _ in range(n_lines):
        h = int(rng.integers(1, 4))
        r = int(rng.integers(0, max(H - h, 0) + 1))
        w = int(rng.integers(W // 4, W + 1))
        c = int(rng.integers(0, W))
        cols = (c + np.arange(w)) % W
        mask[r : r + h][:, cols] = True
    return mask


def apply_pixel_mask(img: RivImage, mask: np.ndarray) -> RivImage:
    """Zero all channels and clear validity where `mask` is set."""
    if mask.shape != (img.height, img.width):
        raise ValueError("mask shape must match image")
    data = img.data.copy()
    data[mask] = 0.0
    return RivImage(data, img.valid_mask & ~mask, img.config)


def apply_masks(img: RivImage, spec: AugmentSpec) -> RivImage:
    """Apply the seeded square, cylindrical and line masks of `spec`."""
    return apply_pixel_mask(img, build_mask(spec, (img.height, img.width)))


def augment(img: RivImage, spec: AugmentSpec) -> RivImage:
    """Full augmentation: yaw column shift, then the mask families."""
    return apply_masks(yaw_shift(img, spec.yaw_shift), spec)
