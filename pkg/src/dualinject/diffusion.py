"""Variance-preserving noise schedule and the forward perturbation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule: ``alpha(t)^2 = f(t)/f(0)``, ``f(t) = cos^2(((t/T)+s)/(1+s) * pi/2)``."""

    T: int = 1000
    offset: float = 0.008

    def _abar(self, t: float) -> float:
        f = lambda u: math.cos((u / self.T + self.offset) / (1 + self.offset) * math.pi / 2) ** 2
        return min(max(f(t) / f(0), 0.0), 1.0)

    def check(self, t) -> None:
        if not 0 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T}]")

    def alpha(self, t) -> float:
        self.check(t)
        if t == 0:
            return 1.0
        return math.sqrt(self._abar(t))

    def sigma(self, t) -> float:
        self.check(t)
        if t == 0:
            return 0.0
        return math.sqrt(1.0 - self._abar(t))

    def sample_timestep(self, rng: np.random.Generator) -> int:
        return int(rng.integers(0, self.T + 1))


def forward_perturb(z: Tensor, t: int, eps, schedule: NoiseSchedule) -> Tensor:
    """``alpha(t) z + sigma(t) eps``; differentiable in ``z``."""
    a, s = schedule.alpha(t), schedule.sigma(t)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if eps_arr.shape != z.shape:
        raise ContractError(f"noise shape {eps_arr.shape} does not match latent {z.shape}")
    if t == 0:
        return z * 1.0
    return z * a + Tensor(eps_arr.astype(z.dtype)) * s


def forward_perturb_batch(z: Tensor, ts, eps, schedule: NoiseSchedule) -> Tensor:
    """Per-sample timesteps for a batched latent ``[B, ...]``."""
    ts = list(ts)
    if len(ts) != z.shape[0]:
        raise ContractError(f"{len(ts)} timesteps for batch of {z.shape[0]}")
    for t in ts:
        schedule.check(t)
    extra = (1,) * (z.ndim - 1)
    a = np.array([schedule.alpha(t) for t in ts], dtype=z.dtype).reshape((-1,) + extra)
    s = np.array([schedule.sigma(t) for t in ts], dtype=z.dtype).reshape((-1,) + extra)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    a_full = Tensor(np.broadcast_to(a, z.shape).copy())
    noise = Tensor((np.broadcast_to(s, z.shape) * eps_arr).astype(z.dtype))
    return z * a_full + noise
