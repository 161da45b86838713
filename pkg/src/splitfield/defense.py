"""Gradient-noise defense with a norm-adaptive, exponentially decaying scale, and the
label-noise baseline."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

MODES = ("off", "s2nerf", "noisy-label")


@dataclass
class NoiseSchedule:
    c: float
    r: float
    total: int

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("noise scale c must be non-negative")
        if not 0 < self.r <= 1:
            raise ValueError("decay ratio r must lie in (0, 1]")
        if self.total < 1:
            raise ValueError("total iterations must be positive")


def noise_std(t: float, max_norm: float, schedule: NoiseSchedule) -> float:
    """sigma_t = c * max_norm * r ** (t / T)."""
    if max_norm < 0:
        raise ValueError("max_norm must be non-negative")
    return schedule.c * max_norm * schedule.r ** (t / schedule.total)


def perturb_gradients(grads: np.ndarray, t: float, schedule: NoiseSchedule,
                      rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Add N(0, sigma_t^2 I_d) to each per-point gradient row of ``grads`` (B, d).

    The scale uses the largest row norm in this batch. Returns the noisy copy and sigma_t.
    """
    grads = np.asarray(grads, dtype=float)
    if grads.ndim != 2 or grads.shape[0] < 1:
        raise ValueError(f"expected a (B, d) gradient batch, got {grads.shape}")
    sigma = noise_std(t, float(np.sqrt((grads * grads).sum(axis=1)).max()), schedule)
    if sigma == 0.0:
        return grads.copy(), 0.0
    return grads + rng.normal(0.0, sigma, size=grads.shape), sigma


@dataclass
class LabelNoiseConfig:
    sigma_l: float

    def __post_init__(self):
        if not np.isfinite(self.sigma_l) or self.sigma_l < 0:
            raise ValueError("sigma_l must be finite and non-negative")


def perturb_labels(labels: np.ndarray, cfg: LabelNoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel Gaussian noise on pixel labels. Not clamped to [0, 1]."""
    labels = np.asarray(labels, dtype=float)
    if cfg.sigma_l == 0:
        return labels.copy()
    return labels + rng.normal(0.0, cfg.sigma_l, size=labels.shape)


@dataclass
class DefenseConfig:
    mode: str = "off"
    c: float = 1.2
    r: float = 1e-4
    sigma_l: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"defense mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "DefenseConfig":
        d = d or {}
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_BEST = DefenseConfig("s2nerf", c=1.2, r=1e-4)
