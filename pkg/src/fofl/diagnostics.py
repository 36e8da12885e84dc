"""Client-side stability signals.

Two diagnostics: a geometric roughness index built from 1-D random
slices of the local loss surface (coefficient of variation of the
slices' normalized total variations), and an optional spectral flatness
ratio of a designated weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RngStream, population_std


@dataclass(frozen=True)
class RoughnessConfig:
    """Probe geometry: direction count, radius, grid, stabilizers."""

    n_directions: int = 10
    radius: float = 0.01
    n_segments: int = 100
    probe_batch_size: int = 128
    eps_amplitude: float = 1e-8
    eps_mean: float = 1e-8

    def __post_init__(self):
        if self.n_directions < 1 or self.n_segments < 1:
            raise ValueError("need at least one direction and one grid segment")
        if self.radius <= 0.0:
            raise ValueError("probe radius must be positive")
        if self.eps_amplitude <= 0.0 or self.eps_mean <= 0.0:
            raise ValueError("stabilizers must be positive")


@dataclass(frozen=True)
class SpectralConfig:
    """Spectral-gate strength and the power-iteration budget."""

    beta_kappa: float = 0.0
    eps_frob: float = 1e-12
    power_iters: int = 10

    def __post_init__(self):
        if self.beta_kappa < 0.0:
            raise ValueError("beta_kappa must be non-negative")
        if self.eps_frob <= 0.0 or self.power_iters < 1:
            raise ValueError("eps_frob must be positive, power_iters >= 1")


def slice_values(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                 direction: np.ndarray, radius: float,
                 n_segments: int) -> np.ndarray:
    """Loss along ``params + s * direction`` on an even grid over [-r, r]."""
    grid = -radius + np.arange(n_segments + 1) * (2.0 * radius / n_segments)
    return np.array([loss_fn(params + s * direction) for s in grid])


def normalized_total_variation(values: np.ndarray, radius: float,
                               eps_amplitude: float) -> float:
    """Discrete total variation over the slice, normalized by span and amplitude."""
    tv = float(np.sum(np.abs(np.diff(values))))
    amplitude = float(values.max() - values.min())
    return tv / (2.0 * radius * (amplitude + eps_amplitude))


def roughness_index(params: np.ndarray,
                    loss_fn: Callable[[np.ndarray], float],
                    cfg: RoughnessConfig, rng: RngStream,
                    slice_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Coefficient of variation of normalized total variations across
    random unit directions around ``params``.

    ``loss_fn`` evaluates the probe loss at a perturbed parameter vector;
    ``slice_fn`` (direction -> grid of loss values) can be injected to
    stub out the slice evaluation in tests.
    """
    gen = rng.generator()
    tvs = np.empty(cfg.n_directions)
    for i in range(cfg.n_directions):
        d = gen.standard_normal(params.size)
        d /= np.linalg.norm(d)
        if slice_fn is not None:
            values = np.asarray(slice_fn(d), dtype=np.float64)
        else:
            values = slice_values(loss_fn, params, d, cfg.radius, cfg.n_segments)
        tvs[i] = normalized_total_variation(values, cfg.radius, cfg.eps_amplitude)
    return population_std(tvs) / (float(np.mean(tvs)) + cfg.eps_mean)


def spectral_norm_estimate(w: np.ndarray, power_iters: int) -> float:
    """Largest singular value via power iteration on ``w.T @ w``.

    The start vector is a fixed pseudorandom draw, so the estimate is
    deterministic for a given shape.
    """
    gen = RngStream(0, "spectral-power-start").generator()
    v = gen.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(power_iters):
        z = w.T @ (w @ v)
        norm = np.linalg.norm(z)
        if norm == 0.0:
            return 0.0
        v = z / norm
    return float(np.linalg.norm(w @ v))


def spectral_flatness(w: np.ndarray, cfg: SpectralConfig) -> float:
    """Spectral-to-Frobenius norm ratio ``sigma / (fro + eps)`` in (0, 1].

    Zero matrices map to 0 by convention.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    fro = float(np.linalg.norm(w))
    if fro == 0.0:
        return 0.0
    sigma = spectral_norm_estimate(w, cfg.power_iters)
    return sigma / (fro + cfg.eps_frob)
