"""Shared numeric primitives: parameter-vector arithmetic, the Gamma
function, counter-addressed RNG streams, and correlation statistics.

Parameter vectors are plain 1-D float64 numpy arrays throughout the
package; this module provides the length-checked element-wise operations
the rest of the code builds on.  The standard-deviation convention
everywhere is population std (divide by N), which is well defined for a
single sample.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_U64 = (1 << 64) - 1


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for a constant input."""


def gamma(x: float) -> float:
    """Gamma function on (0, inf); only (0, 3] is exercised here.

    Backed by ``math.gamma`` (a Lanczos-class implementation accurate to
    ~1 ulp); the test suite cross-checks it against an independently
    coded Lanczos series.
    """
    if not x > 0.0:
        raise ValueError(f"gamma requires x > 0, got {x}")
    return math.gamma(x)


def as_param_vector(values) -> np.ndarray:
    """Coerce to a 1-D float64 array and reject non-finite entries."""
    vec = np.ascontiguousarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"parameter vector must be 1-D, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("parameter vector contains non-finite entries")
    return vec


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Length-checked element-wise arithmetic on parameter vectors.

    ``op`` is one of add/sub/mul (b: vector), pow_scalar/scale (b:
    scalar), abs (no b), clip (b: (lo, hi) pair).
    """
    a = np.asarray(a, dtype=np.float64)
    if op in ("add", "sub", "mul"):
        b = np.asarray(b, dtype=np.float64)
        _check_same_length(a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "abs":
        return np.abs(a)
    if op == "pow_scalar":
        return a ** float(b)
    if op == "scale":
        return a * float(b)
    if op == "clip":
        lo, hi = b
        return np.clip(a, lo, hi)
    raise ValueError(f"unknown element-wise op {op!r}")


# ---------------------------------------------------------------------------
# Counter-addressed RNG streams
# ---------------------------------------------------------------------------


def _purpose_tag(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Deterministic random stream addressed by (seed, purpose, round, client).

    Streams with identical addresses always reproduce the same sequence;
    distinct addresses are statistically independent.  Because the address
    alone determines the stream, per-client work can be scheduled in any
    order (or in parallel) without changing a single draw.
    """

    def __init__(self, seed: int, purpose: str, round: int = 0, client: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.purpose = purpose
        self.round = int(round)
        self.client = int(client)

    def generator(self) -> np.random.Generator:
        """A fresh Generator positioned at the start of this stream."""
        entropy = (
            self.seed & _U64,
            _purpose_tag(self.purpose),
            self.round & _U64,
            self.client & _U64,
        )
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (f"RngStream(seed={self.seed}, purpose={self.purpose!r}, "
                f"round={self.round}, client={self.client})")


# ---------------------------------------------------------------------------
# Correlation statistics
# ---------------------------------------------------------------------------


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_length(x, y)
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.dot(dx, dy)) / math.sqrt(sxx * syy)


def ranks(x) -> np.ndarray:
    """Ranks starting at 1, ties resolved by average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    out = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        out[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return out


def spearman(x, y) -> float:
    """Rank correlation: Pearson on average-tie ranks."""
    return pearson(ranks(x), ranks(y))


def population_std(x) -> float:
    """Population (divide-by-N) standard deviation; 0 for a singleton."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("population_std of empty sequence")
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))
