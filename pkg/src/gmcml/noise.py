"""Coupled adaptive input corruption for the two sub-networks.

Both ratios are driven by one scalar, the variance of the reconstructed
masks relative to the variance of the true masks. A poor (flat)
reconstruction leaves the reconstruction input clean and floods the
classifier's image channels with noise; as reconstructions gain contrast the
balance tips the other way.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

ALPHA = 0.25
BETA = 2.0
M_NOISE = 1e-6
NOISE_MEAN = 0.5
NOISE_SD = 0.25


@dataclass(frozen=True)
class NoiseState:
    alpha: float = ALPHA
    beta: float = BETA
    m_noise: float = M_NOISE
    var_ratio: float = 0.0
    r_rec: float = 0.0
    r_cls: float = float(np.tanh(1.0))

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.m_noise <= 0:
            raise ValueError("alpha, beta and m_noise must be positive")

    @classmethod
    def initial(cls, alpha: float = ALPHA, beta: float = BETA, m_noise: float = M_NOISE) -> "NoiseState":
        return cls(alpha, beta, m_noise).with_ratio(0.0)

    def with_ratio(self, var_ratio: float) -> "NoiseState":
        r_rec, r_cls = ratios(var_ratio, self.alpha, self.beta)
        return replace(self, var_ratio=float(var_ratio), r_rec=r_rec, r_cls=r_cls)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("alpha", "beta", "m_noise", "var_ratio", "r_rec", "r_cls")}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseState":
        return cls(**{k: float(v) for k, v in d.items()})


def ratios(var_ratio: float, alpha: float = ALPHA, beta: float = BETA) -> tuple[float, float]:
    """``(tanh(alpha v), tanh(1 - tanh(beta v)))``."""
    if var_ratio < 0:
        raise ValueError("variance ratio must be non-negative")
    return float(np.tanh(alpha * var_ratio)), float(np.tanh(1.0 - np.tanh(beta * var_ratio)))


def batch_variance(images) -> float:
    """Population variance of every value in the batch, pooled."""
    arr = np.asarray(images.data if hasattr(images, "data") else images, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("batch_variance of an empty batch")
    return float(arr.var())


def update_ratios(state: NoiseState, m_pred_batch, m_true_batch) -> NoiseState:
    pred = np.asarray(getattr(m_pred_batch, "data", m_pred_batch), dtype=np.float64)
    true = np.asarray(getattr(m_true_batch, "data", m_true_batch), dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    ratio = batch_variance(pred) / (batch_variance(true) + state.m_noise)
    return state.with_ratio(ratio)


def noise_field(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    return np.clip(rng.normal(NOISE_MEAN, NOISE_SD, size=tuple(shape)), 0.0, 1.0)


def corrupt(x, ratio: float, rng: np.random.Generator | None = None, field: np.ndarray | None = None) -> np.ndarray:
    """Blend ``ratio * noise + (1 - ratio) * x``, clamped to [0, 1].

    A fresh clamped Gaussian field is drawn from ``rng`` unless ``field`` is
    given.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio {ratio} outside [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if ratio == 0.0:
        return x.copy()
    if field is None:
        if rng is None:
            raise ValueError("corrupt needs an rng or an explicit noise field")
        field = noise_field(x.shape, rng)
    elif field.shape != x.shape:
        raise ValueError(f"noise field shape {field.shape} does not match {x.shape}")
    return np.clip(ratio * field + (1.0 - ratio) * x, 0.0, 1.0)


def coupling_check(state: NoiseState) -> float:
    """Residual of the closed-form link between the two ratios."""
    if state.r_rec >= 1.0:
        raise ValueError("r_rec must be below 1 for arctanh")
    predicted = np.tanh(1.0 - np.tanh(state.beta / state.alpha * np.arctanh(state.r_rec)))
    return float(abs(state.r_cls - predicted))
