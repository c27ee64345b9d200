"""Laplace-mechanism perturbation of model weights.

Weights are clamped to ``[-C, C]`` per coordinate, so any coordinate can change
by at most ``2C``; that bound is the sensitivity used to calibrate the noise
scale ``sensitivity / epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .nn import ParamVector


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = 0.5
    clip_bound: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise InputError("clip_bound must be > 0")
        if self.enabled and not self.epsilon > 0:
            raise InputError("epsilon must be > 0 when LDP is enabled")

    @property
    def sensitivity(self) -> float:
        return sensitivity(self)

    @property
    def scale(self) -> float:
        return laplace_scale(self.sensitivity, self.epsilon)


def clip(params: ParamVector, bound: float) -> ParamVector:
    if not bound > 0:
        raise InputError(f"clip bound must be > 0, got {bound}")
    return params.with_values(np.clip(params.values, -bound, bound))


def sensitivity(config: PrivacyConfig) -> float:
    return 2.0 * config.clip_bound


def laplace_scale(theta: float, epsilon: float) -> float:
    if not epsilon > 0:
        raise InputError(f"epsilon must be > 0, got {epsilon}")
    if not theta > 0:
        raise InputError(f"sensitivity must be > 0, got {theta}")
    return theta / epsilon


def laplace_from_uniform(u: np.ndarray, scale: float) -> np.ndarray:
    """Inverse CDF of Laplace(0, scale) for ``u`` in (-1/2, 1/2)."""
    u = np.asarray(u, dtype=np.float64)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(stream: np.random.Generator, scale: float, n: int) -> np.ndarray:
    if not scale > 0:
        raise InputError(f"scale must be > 0, got {scale}")
    u = stream.uniform(-0.5, 0.5, size=n)
    # uniform() is half-open; keep u strictly inside (-1/2, 1/2).
    u[u == -0.5] = 0.0
    return laplace_from_uniform(u, scale)


def perturb(params: ParamVector, config: PrivacyConfig, stream: np.random.Generator) -> ParamVector:
    if not config.enabled:
        return params
    clipped = clip(params, config.clip_bound)
    noise = sample_laplace(stream, config.scale, len(clipped))
    return clipped.with_values(clipped.values + noise)
