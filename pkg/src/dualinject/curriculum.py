"""Easy-to-hard crop schedule for the image-adapter input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, nearest_indices


@dataclass(frozen=True)
class CurriculumParams:
    r_min: float = 0.1
    r_max: float = 1.0
    lambda_curr: float = 0.025
    iterations: int = 800

    def __post_init__(self):
        if not 0 < self.r_min < self.r_max <= 1:
            raise ContractError(f"need 0 < r_min < r_max <= 1, got {self.r_min}, {self.r_max}")
        if not 0 < self.lambda_curr <= 1:
            raise ContractError(f"need 0 < lambda <= 1, got {self.lambda_curr}")
        if self.iterations < 1:
            raise ContractError("curriculum needs at least one iteration")


def crop_lower_bound(i: int, p: CurriculumParams) -> float:
    """``lambda^(i/I) * (r_max - r_min) + r_min``; iterations past ``I`` clamp to ``I``."""
    if i < 0:
        raise ContractError(f"iteration must be non-negative, got {i}")
    i = min(i, p.iterations)
    if i == 0:
        return p.r_max
    return p.lambda_curr ** (i / p.iterations) * (p.r_max - p.r_min) + p.r_min


def sample_crop_scale(rng: np.random.Generator, r_i: float, r_max: float) -> float:
    if r_i > r_max:
        raise ContractError(f"crop interval is empty: [{r_i}, {r_max}]")
    if r_i == r_max:
        return float(r_max)
    return float(rng.uniform(r_i, r_max))


def crop_box(shape: tuple[int, int], r_crop: float, rng: np.random.Generator) -> tuple[int, int, int]:
    """``(top, left, side)`` of a square crop placed uniformly inside the image."""
    if not 0 < r_crop <= 1:
        raise ContractError(f"crop scale must be in (0, 1], got {r_crop}")
    h, w = shape
    side = max(1, min(math.ceil(r_crop * min(h, w) - 1e-9), min(h, w)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return top, left, side


def random_crop(image: np.ndarray, r_crop: float, rng: np.random.Generator,
                interpolation: str = "nearest") -> np.ndarray:
    """Square crop of side ``ceil(r_crop * min(H, W))`` resized back to ``H x W``."""
    c, h, w = image.shape
    top, left, side = crop_box((h, w), r_crop, rng)
    patch = image[:, top : top + side, left : left + side]
    if side == h and side == w:
        return patch.copy()
    if interpolation == "nearest":
        ri, ci = nearest_indices(side, h), nearest_indices(side, w)
        return np.ascontiguousarray(patch[:, ri][:, :, ci])
    if interpolation == "bilinear":
        return _bilinear(patch, h, w)
    raise ContractError(f"unknown interpolation {interpolation!r}")


def _bilinear(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    c, ph, pw = patch.shape
    ys = np.clip((np.arange(h) + 0.5) * ph / h - 0.5, 0, ph - 1)
    xs = np.clip((np.arange(w) + 0.5) * pw / w - 0.5, 0, pw - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, ph - 1), np.minimum(x0 + 1, pw - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = patch[:, y0][:, :, x0] * (1 - wx) + patch[:, y0][:, :, x1] * wx
    bot = patch[:, y1][:, :, x0] * (1 - wx) + patch[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(patch.dtype)
