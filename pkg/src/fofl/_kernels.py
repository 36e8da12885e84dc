"""Hot numeric kernels, JIT-compiled with numba when available.

Every kernel is plain numpy code; the package works without a compiler.
Set ``FOFL_NUMBA=0`` to force the pure-numpy/interpreted path.  When a
kernel is jitted, ``<kernel>.py_func`` exposes the uncompiled original
(used by ``benchmarks/bench_kernels.py`` to compare both paths).

fastmath stays off: the simulator promises bitwise-reproducible runs and
exact algebraic reductions (e.g. multiplying a gradient by an all-ones
preconditioner must be an identity).
"""

from __future__ import annotations

import os

import numpy as np


def _flag_enabled() -> bool:
    raw = os.environ.get("FOFL_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "no", "off")


NUMBA_ENABLED = False
if _flag_enabled():
    try:
        import numba

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None


def maybe_njit(fn):
    """Apply ``numba.njit`` unless disabled via FOFL_NUMBA."""
    if NUMBA_ENABLED:
        return numba.njit(cache=True, fastmath=False)(fn)
    return fn


# ---------------------------------------------------------------------------
# MLP forward / backward (two hidden ReLU layers, scalar output)
# ---------------------------------------------------------------------------


@maybe_njit
def mlp_forward(x, w1, b1, w2, b2, w3, b3):
    # x: (n, d_in) C-contiguous; weight matrices are (out, in) views.
    a1 = np.maximum(np.dot(x, w1.T) + b1, 0.0)
    a2 = np.maximum(np.dot(a1, w2.T) + b2, 0.0)
    return np.dot(a2, w3.T)[:, 0] + b3[0]


@maybe_njit
def mlp_loss(x, y, w1, b1, w2, b2, w3, b3):
    a1 = np.maximum(np.dot(x, w1.T) + b1, 0.0)
    a2 = np.maximum(np.dot(a1, w2.T) + b2, 0.0)
    err = (np.dot(a2, w3.T)[:, 0] + b3[0]) - y
    return np.mean(err * err)


@maybe_njit
def mlp_loss_grad(x, y, w1, b1, w2, b2, w3, b3):
    # Mean-squared-error loss and its exact gradient w.r.t. every layer.
    n = x.shape[0]
    z1 = np.dot(x, w1.T) + b1
    a1 = np.maximum(z1, 0.0)
    z2 = np.dot(a1, w2.T) + b2
    a2 = np.maximum(z2, 0.0)
    pred = np.dot(a2, w3.T)[:, 0] + b3[0]

    err = pred - y
    loss = np.mean(err * err)

    dpred = (2.0 / n) * err                       # dL/dpred, shape (n,)
    dw3 = np.dot(dpred, a2).reshape(1, -1)
    db3 = np.sum(dpred) * np.ones(1)
    da2 = np.outer(dpred, w3[0])
    dz2 = np.where(z2 > 0.0, da2, 0.0)
    dw2 = np.dot(dz2.T, a1)
    db2 = np.sum(dz2, axis=0)
    da1 = np.dot(dz2, w2)
    dz1 = np.where(z1 > 0.0, da1, 0.0)
    dw1 = np.dot(dz1.T, x)
    db1 = np.sum(dz1, axis=0)
    return loss, dw1, db1, dw2, db2, dw3, db3


# ---------------------------------------------------------------------------
# Equivalent-circuit battery integration (forward Euler, one RC pair)
# ---------------------------------------------------------------------------


@maybe_njit
def _interp1(x, xs, ys):
    # Piecewise-linear lookup on a sorted knot table; clamps at the ends.
    if x <= xs[0]:
        return ys[0]
    if x >= xs[-1]:
        return ys[-1]
    j = np.searchsorted(xs, x)
    x0 = xs[j - 1]
    w = (x - x0) / (xs[j] - x0)
    return ys[j - 1] * (1.0 - w) + ys[j] * w


@maybe_njit
def ecm_current_loop(i_cell, dt, soc0, q_as, knots, voc_v, r0_ohm, r1_ohm, c1_f):
    """Integrate SoC and the RC branch under a prescribed cell current.

    Outputs are sampled at the input instants (state before the step is
    applied); the post-trajectory state is returned separately so callers
    can chain segments.  Returns (v_cell, soc, v1, soc_end, v1_end,
    n_clamped).
    """
    n = i_cell.shape[0]
    v_cell = np.empty(n)
    soc_out = np.empty(n)
    v1_out = np.empty(n)
    soc = soc0
    v1 = 0.0
    clamped = 0
    for r in range(n):
        if soc < 0.0:
            soc = 0.0
            clamped += 1
        elif soc > 1.0:
            soc = 1.0
            clamped += 1
        i = i_cell[r]
        voc = _interp1(soc, knots, voc_v)
        r0 = _interp1(soc, knots, r0_ohm)
        r1 = _interp1(soc, knots, r1_ohm)
        c1 = _interp1(soc, knots, c1_f)
        v_cell[r] = voc - v1 - r0 * i
        soc_out[r] = soc
        v1_out[r] = v1
        soc = soc - i * dt / q_as
        v1 = v1 + dt * (i - v1 / r1) / c1
    if soc < 0.0:
        soc = 0.0
        clamped += 1
    elif soc > 1.0:
        soc = 1.0
        clamped += 1
    return v_cell, soc_out, v1_out, soc, v1, clamped


@maybe_njit
def ecm_power_loop(p_cell_w, dt, soc0, q_as, knots, voc_v, r0_ohm, r1_ohm, c1_f):
    """Integrate the ECM under a per-cell electrical power demand.

    At each step the cell current solves (voc - v1 - r0*i)*i = p exactly
    (discharge-positive root); infeasible demand is clamped to the
    maximum-power current.  Returns (i_cell, v_cell, soc, v1, n_clamped).
    """
    n = p_cell_w.shape[0]
    i_out = np.empty(n)
    v_cell = np.empty(n)
    soc_out = np.empty(n)
    v1_out = np.empty(n)
    soc = soc0
    v1 = 0.0
    clamped = 0
    for r in range(n):
        if soc < 0.0:
            soc = 0.0
            clamped += 1
        elif soc > 1.0:
            soc = 1.0
            clamped += 1
        voc = _interp1(soc, knots, voc_v)
        r0 = _interp1(soc, knots, r0_ohm)
        r1 = _interp1(soc, knots, r1_ohm)
        c1 = _interp1(soc, knots, c1_f)
        v_open = voc - v1
        disc = v_open * v_open - 4.0 * r0 * p_cell_w[r]
        if disc < 0.0:
            i = v_open / (2.0 * r0)
            clamped += 1
        else:
            i = (v_open - np.sqrt(disc)) / (2.0 * r0)
        i_out[r] = i
        v_cell[r] = voc - v1 - r0 * i
        soc_out[r] = soc
        v1_out[r] = v1
        soc = soc - i * dt / q_as
        v1 = v1 + dt * (i - v1 / r1) / c1
    return i_out, v_cell, soc_out, v1_out, clamped


# ---------------------------------------------------------------------------
# Synthetic drive-cycle generation (Markov regime mixture)
# ---------------------------------------------------------------------------


@maybe_njit
def drive_cycle_loop(u_regime, u_stop, xi_accel, xi_grade, regime_targets,
                     p_stay, p_stop, stop_dwell, gain, noise_levels,
                     grade_rho, grade_sigma, v_max, dt):
    """Generate one trip's speed/accel/grade traces.

    All randomness comes in as pre-drawn arrays so the kernel itself is
    pure and the result is independent of the compilation path.
    """
    n = xi_accel.shape[0]
    speed = np.empty(n)
    accel = np.empty(n)
    grade = np.empty(n)
    v = 0.0
    g = 0.0
    regime = 0
    stopped = 0
    for r in range(n):
        u = u_regime[r]
        if u > p_stay[regime]:
            # leftover mass picks the next regime uniformly
            frac = (u - p_stay[regime]) / (1.0 - p_stay[regime])
            regime = min(int(frac * 3.0), 2)
        if stopped > 0:
            stopped -= 1
            target = 0.0
        elif regime == 0 and u_stop[r] < p_stop:
            stopped = stop_dwell
            target = 0.0
        else:
            target = regime_targets[regime]
        a = gain * (target - v) + noise_levels[regime] * xi_accel[r]
        if a > 2.5:
            a = 2.5
        elif a < -3.5:
            a = -3.5
        v_new = v + a * dt
        if v_new < 0.0:
            v_new = 0.0
        elif v_new > v_max:
            v_new = v_max
        accel[r] = (v_new - v) / dt
        v = v_new
        speed[r] = v
        g = grade_rho * g + grade_sigma * xi_grade[r]
        if g > 0.08:
            g = 0.08
        elif g < -0.08:
            g = -0.08
        grade[r] = g
    return speed, accel, grade
