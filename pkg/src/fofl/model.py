"""The deployed predictor: a two-hidden-layer ReLU MLP mapping a
flattened feature window to a scalar energy value, with analytic
mean-squared-error gradients.

Parameters live in one flat float64 vector (layer weights then biases,
input to output); :func:`unpack` returns zero-copy views, so the hot
kernels in :mod:`fofl._kernels` operate directly on the training vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import RngStream


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the regressor: input width and two hidden widths."""

    input_dim: int
    hidden_dims: tuple[int, int] = (64, 32)

    def __post_init__(self):
        if self.input_dim < 1 or min(self.hidden_dims) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        h1, h2 = self.hidden_dims
        return [(h1, self.input_dim), (h2, h1), (1, h2)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


def unpack(spec: MlpSpec, params: np.ndarray):
    """Split the flat parameter vector into (w1, b1, w2, b2, w3, b3) views."""
    if params.shape != (spec.n_params,):
        raise ValueError(
            f"parameter vector has length {params.shape}, expected ({spec.n_params},)")
    views = []
    offset = 0
    for out_dim, in_dim in spec.layer_shapes:
        w = params[offset:offset + out_dim * in_dim].reshape(out_dim, in_dim)
        offset += out_dim * in_dim
        b = params[offset:offset + out_dim]
        offset += out_dim
        views.extend((w, b))
    return tuple(views)


def init_params(spec: MlpSpec, rng: RngStream) -> np.ndarray:
    """Glorot-uniform initialization drawn from the experiment stream."""
    gen = rng.generator()
    params = np.zeros(spec.n_params)
    w1, b1, w2, b2, w3, b3 = unpack(spec, params)
    for w in (w1, w2, w3):
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[:] = gen.uniform(-limit, limit, size=w.shape)
    return params


def _as_batch(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray | float:
    """Deterministic forward pass; scalar for a single sample, else (n,)."""
    batch = _as_batch(x)
    if batch.shape[1] != spec.input_dim:
        raise ValueError(f"feature width {batch.shape[1]} != input_dim {spec.input_dim}")
    out = _kernels.mlp_forward(batch, *unpack(spec, params))
    if np.ndim(x) == 1:
        return float(out[0])
    return out


def loss_and_grad(spec: MlpSpec, params: np.ndarray, x, y) -> tuple[float, np.ndarray]:
    """Mean squared error over the batch and its exact analytic gradient."""
    batch = _as_batch(x)
    targets = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.shape[0] != targets.shape[0]:
        raise ValueError("batch/target size mismatch")
    loss, dw1, db1, dw2, db2, dw3, db3 = _kernels.mlp_loss_grad(
        batch, targets, *unpack(spec, params))
    grad = np.concatenate(
        [dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3])
    return float(loss), grad


def probe_loss(spec: MlpSpec, params: np.ndarray, x, y) -> float:
    """Forward-only loss evaluation (no gradient work)."""
    batch = _as_batch(x)
    targets = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return float(_kernels.mlp_loss(batch, targets, *unpack(spec, params)))


def final_layer_matrix(spec: MlpSpec, params: np.ndarray) -> np.ndarray:
    """Weight matrix of the output layer (used by the spectral diagnostic)."""
    w3 = unpack(spec, params)[4]
    return w3
