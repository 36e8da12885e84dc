"""Fractional-order preconditioning of local SGD steps.

The preconditioner scales each gradient coordinate by
``(|current - previous| + delta)^(1-alpha) / gamma(2-alpha)``, a
constant-overhead surrogate for non-integer-order update dynamics.
``alpha = 1`` makes it an exact all-ones vector, recovering plain SGD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import gamma


@dataclass(frozen=True)
class FracConfig:
    """Order, stabilizer and safeguard bounds for the preconditioner."""

    alpha: float = 0.8
    delta: float = 1e-6
    clip_enabled: bool = True
    p_min: float = 0.2
    p_max: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if not 0.0 < self.p_min <= self.p_max:
            raise ValueError("need 0 < p_min <= p_max")


@dataclass
class FracState:
    """Previous local iterate; absent exactly at the first local step."""

    prev_params: np.ndarray | None = None


def preconditioner(state: FracState, current: np.ndarray, cfg: FracConfig,
                   damping: float = 0.0) -> np.ndarray:
    """Element-wise gradient scaling from the latest displacement.

    Returns all-ones when no previous iterate exists (first local step)
    or when ``alpha == 1``.  ``damping`` is the optional spectral-gate
    denominator term (``beta_kappa * kappa``); it divides the raw
    preconditioner *before* the safeguard clip, preserving the update
    order gate-then-clip.
    """
    if state.prev_params is None or cfg.alpha == 1.0:
        return np.ones_like(current)
    if state.prev_params.shape != current.shape:
        raise ValueError(
            f"length mismatch: {state.prev_params.shape} vs {current.shape}")
    disp = np.abs(current - state.prev_params) + cfg.delta
    p = disp ** (1.0 - cfg.alpha) / gamma(2.0 - cfg.alpha)
    if damping != 0.0:
        p /= 1.0 + damping
    if cfg.clip_enabled:
        np.clip(p, cfg.p_min, cfg.p_max, out=p)
    return p


def fo_step(params: np.ndarray, grad: np.ndarray, p: np.ndarray,
            eta: float) -> np.ndarray:
    """One preconditioned descent step: ``params - eta * (grad * p)``."""
    if params.shape != grad.shape or params.shape != p.shape:
        raise ValueError("length mismatch between params, grad and preconditioner")
    return params - eta * (grad * p)
