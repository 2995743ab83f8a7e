"""Perceptual and adversarial objectives for the one-step generator.

The generator is trained only with weak reconstruction terms: a DISTS-style
distance and SSIM in image space plus a non-saturating adversarial term in
latent space. There is deliberately no pixel-wise L2 term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import ContractError, ShapeError, Tensor

# The generator objective consists of exactly these terms.
GENERATOR_LOSS_TERMS = ("dist", "ssim", "adv_g")

SSIM_K1, SSIM_K2 = 0.01, 0.03
DISTS_C1, DISTS_C2 = 1e-6, 1e-6
PYRAMID_SEED = 20_240_601


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # DIST
    lambda2: float = 0.2  # SSIM
    lambda3: float = 0.1  # adversarial

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ContractError(f"loss weights must be non-negative: {self}")


def _batched(x: Tensor) -> Tensor:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"expected an image [C,H,W] or batch [B,C,H,W], got {x.shape}")
    return x


def softplus(x: Tensor) -> Tensor:
    return -T.log_sigmoid(-x)


# -- SSIM ---------------------------------------------------------------------------

def _window(kind: str, size: int, dtype) -> np.ndarray:
    if kind == "uniform":
        w = np.full((size, size), 1.0 / (size * size))
    elif kind == "gaussian":
        ax = np.arange(size) - (size - 1) / 2
        g = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
        w = np.outer(g, g)
        w /= w.sum()
    else:
        raise ContractError(f"unknown SSIM window {kind!r}")
    return w.reshape(1, 1, size, size).astype(dtype)


def ssim_map(x: Tensor, y: Tensor, data_range: float = 1.0, window: str = "uniform",
             win_size: int = 8, stride: int = 4) -> Tensor:
    """Per-window SSIM values, ``[B*C, 1, Ho, Wo]``."""
    x, y = _batched(x), _batched(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    b, c, h, w = x.shape
    if window == "gaussian" and win_size == 8:
        win_size, stride = 11, 1
    k = Tensor(_window(window, win_size, x.dtype))
    xs = T.reshape(x, (b * c, 1, h, w))
    ys = T.reshape(y, (b * c, 1, h, w))
    pool = lambda v: T.conv2d(v, k, stride=stride)
    mx, my = pool(xs), pool(ys)
    exx, eyy, exy = pool(xs * xs), pool(ys * ys), pool(xs * ys)
    mx2, my2, mxy = mx * mx, my * my, mx * my
    vx, vy, cxy = exx - mx2, eyy - my2, exy - mxy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (mxy * 2.0 + c1) * (cxy * 2.0 + c2)
    den = (mx2 + my2 + c1) * (vx + vy + c2)
    return num / den


def ssim(x: Tensor, y: Tensor, **kw) -> Tensor:
    """Mean SSIM over sliding windows (8x8, stride 4 by default), channels and batch."""
    return T.mean(ssim_map(x, y, **kw))


# -- DISTS-style distance ---------------------------------------------------------------

class FeaturePyramid(Module):
    """Frozen seeded conv stack; stage 0 is the image itself, then two stride-2 stages."""

    def __init__(self, seed: int = PYRAMID_SEED, channels: tuple[int, ...] = (3, 16, 32)):
        rng = np.random.default_rng(seed)
        self.convs = [Conv2d(rng, channels[i], channels[i + 1], k=3, stride=2, bias=True,
                             std=math.sqrt(2.0 / (9 * channels[i])))
                      for i in range(len(channels) - 1)]
        for conv in self.convs:
            conv.b.data[:] = rng.normal(0, 0.1, conv.b.shape).astype(np.float32)
        self.channels = channels

    def __call__(self, x: Tensor) -> list[Tensor]:
        x = _batched(x)
        feats = [x]
        h = x
        for conv in self.convs:
            h = softplus(conv(h))
            feats.append(h)
        return feats

    @property
    def total_channels(self) -> int:
        return sum(self.channels)


def _channel_stats(fx: Tensor, fy: Tensor):
    b, c, h, w = fx.shape
    fx = T.reshape(fx, (b, c, h * w))
    fy = T.reshape(fy, (b, c, h * w))
    mx = T.mean(fx, axis=2, keepdims=True)
    my = T.mean(fy, axis=2, keepdims=True)
    dx = fx - T.expand(mx, fx.shape)
    dy = fy - T.expand(my, fy.shape)
    vx = T.mean(dx * dx, axis=2)
    vy = T.mean(dy * dy, axis=2)
    cxy = T.mean(dx * dy, axis=2)
    return T.reshape(mx, (b, c)), T.reshape(my, (b, c)), vx, vy, cxy


def dist_terms(x: Tensor, y: Tensor, pyramid: FeaturePyramid):
    """Per-stage ``(texture, structure)`` similarity terms, each ``[B, C_stage]``."""
    x, y = _batched(x), _batched(y)
    if x.shape != y.shape:
        raise ShapeError(f"dist_loss: shape mismatch {x.shape} vs {y.shape}")
    terms = []
    for fx, fy in zip(pyramid(x), pyramid(y)):
        mx, my, vx, vy, cxy = _channel_stats(fx, fy)
        tex = (mx * my * 2.0 + DISTS_C1) / (mx * mx + my * my + DISTS_C1)
        struct = (cxy * 2.0 + DISTS_C2) / (vx + vy + DISTS_C2)
        terms.append((tex, struct))
    return terms


def dist_loss(x: Tensor, y: Tensor, pyramid: FeaturePyramid) -> Tensor:
    """``1 - sum(alpha * texture + beta * structure)`` with uniform weights summing to 1."""
    terms = dist_terms(x, y, pyramid)
    weight = 1.0 / (2 * pyramid.total_channels)
    total = None
    for tex, struct in terms:
        s = T.sum_(tex + struct, axis=1)
        total = s if total is None else total + s
    return 1.0 - T.mean(total) * weight


# -- combined objectives ------------------------------------------------------------------

def perceptual_loss(x_ref: Tensor, x_rec: Tensor, w: LossWeights, pyramid: FeaturePyramid,
                    parts: dict | None = None) -> Tensor:
    """``lambda1 * DIST + lambda2 * (1 - SSIM)``."""
    d = dist_loss(x_ref, x_rec, pyramid)
    s = 1.0 - ssim(x_ref, x_rec)
    if parts is not None:
        parts["dist"], parts["ssim"] = d, s
    return d * w.lambda1 + s * w.lambda2


def adv_d(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """``-[log D(real) + log(1 - D(fake))]``, averaged over the batch."""
    return -T.mean(T.log_sigmoid(logit_real) + T.log_sigmoid(-logit_fake))


def adv_g(logit_fake: Tensor) -> Tensor:
    """Non-saturating generator term ``-log D(fake)``."""
    return -T.mean(T.log_sigmoid(logit_fake))


def total_generator_loss(x_ref: Tensor, x_rec: Tensor, logit_fake: Tensor | None, w: LossWeights,
                         pyramid: FeaturePyramid, parts: dict | None = None) -> Tensor:
    """Perceptual loss plus ``lambda3 * adv_g``. ``logit_fake=None`` drops the adversarial term."""
    parts = {} if parts is None else parts
    loss = perceptual_loss(x_ref, x_rec, w, pyramid, parts)
    if logit_fake is not None:
        g = adv_g(logit_fake)
        parts["adv_g"] = g
        loss = loss + g * w.lambda3
    return loss
