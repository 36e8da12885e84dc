"""Evaluation engine: utility metrics on the physical Wh scale,
convergence/efficiency measures, drift statistics, roughness-drift
coupling, stratification, and diagnostic-overhead accounting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (UndefinedCorrelationError, pearson, population_std,
                       spearman)

NOT_REACHED = None   # sentinel for rounds_to_threshold; rendered as "NR"


@dataclass
class RoundRecord:
    """Per-round telemetry captured by the federated loop."""

    round: int
    participant_ids: list[int]
    n_available: int
    n_samples: dict[int, int]
    drift_l2: dict[int, float]
    roughness: dict[int, float]
    kappa: float | None
    rmse: float | None
    mae: float | None
    mape: float | None
    t_train_s: float
    t_diag_s: float
    client_params: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class MetricConfig:
    """Stabilizers, thresholds, and evaluation cadence."""

    eps_dispersion: float = 1e-8
    thresholds: tuple[float, ...] = ()
    eval_every: int = 1
    coupling_round: int | None = None   # default: mid-training

    def __post_init__(self):
        if self.eps_dispersion <= 0.0:
            raise ValueError("eps_dispersion must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


def _check_eval_inputs(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return preds, labels


def rmse(preds, labels) -> float:
    preds, labels = _check_eval_inputs(preds, labels)
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def mae(preds, labels) -> float:
    preds, labels = _check_eval_inputs(preds, labels)
    return float(np.mean(np.abs(preds - labels)))


def mape(preds, labels, eps) -> float:
    """Percentage error with a stabilizer against near-zero labels.

    ``eps`` may be a scalar or a per-sample array (per-client stabilizers
    on a pooled evaluation set).
    """
    preds, labels = _check_eval_inputs(preds, labels)
    return float(100.0 * np.mean(np.abs(preds - labels)
                                 / (np.abs(labels) + np.asarray(eps))))


def rounds_to_threshold(series, theta: float):
    """First index with value <= theta, or NOT_REACHED."""
    for t, value in enumerate(series):
        if value is not None and value <= theta:
            return t
    return NOT_REACHED


def best_so_far(series) -> list[float]:
    """Running minimum of a metric series."""
    out = []
    best = math.inf
    for value in series:
        best = min(best, value)
        out.append(best)
    return out


def drift_stats(drifts, eps_dispersion: float) -> tuple[float, float]:
    """Mean drift magnitude and its coefficient of variation
    (population std / (mean + eps))."""
    drifts = np.asarray(drifts, dtype=np.float64)
    if drifts.size == 0:
        raise ValueError("drift_stats needs at least one participant")
    mean = float(drifts.mean())
    return mean, population_std(drifts) / (mean + eps_dispersion)


def roughness_drift_coupling(records: list[RoundRecord], round_t: int):
    """(pearson, spearman) between roughness and drift across the
    participants of round ``round_t``; (None, None) when degenerate."""
    record = next((r for r in records if r.round == round_t), None)
    if record is None:
        return None, None
    pairs = [(record.roughness[k], record.drift_l2[k])
             for k in record.participant_ids
             if k in record.roughness and not math.isnan(record.roughness[k])]
    if len(pairs) < 3:
        return None, None
    rough = [p[0] for p in pairs]
    drift = [p[1] for p in pairs]
    try:
        return pearson(rough, drift), spearman(rough, drift)
    except UndefinedCorrelationError:
        return None, None


def early_drift_predictor(records: list[RoundRecord], probe_round: int,
                          window: tuple[int, int]) -> dict[int, tuple[float, float]]:
    """Per-client (roughness at ``probe_round``, mean drift over the
    client's actual participation rounds inside ``window``).

    Clients that never participate in the window, or have no roughness
    at the probe round, are omitted.
    """
    probe = next((r for r in records if r.round == probe_round), None)
    if probe is None:
        return {}
    a, b = window
    sums: dict[int, list[float]] = {}
    for record in records:
        if a <= record.round <= b:
            for k in record.participant_ids:
                sums.setdefault(k, []).append(record.drift_l2[k])
    out = {}
    for k, rough in probe.roughness.items():
        if math.isnan(rough) or k not in sums:
            continue
        out[k] = (rough, float(np.mean(sums[k])))
    return out


def stratify_tertiles(values: dict[int, float]) -> dict[str, list[int]]:
    """Partition clients into Low/Med/High thirds by value.

    Remainder clients go to the lower strata first; ties break by id for
    a stable, deterministic split.
    """
    ordered = [k for k, _ in sorted(values.items(), key=lambda kv: (kv[1], kv[0]))]
    n = len(ordered)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if rem >= 1 else 0), base + (1 if rem >= 2 else 0), base]
    low = ordered[:sizes[0]]
    med = ordered[sizes[0]:sizes[0] + sizes[1]]
    high = ordered[sizes[0] + sizes[1]:]
    return {"low": low, "med": med, "high": high}


def amortized_round_time(t_nonprobe: float, t_probe: float,
                         r_probe: int) -> float:
    """Amortized per-round client time when probing every ``r_probe`` rounds:
    ``((r_probe - 1) * t_nonprobe + t_probe) / r_probe``."""
    if r_probe < 1:
        raise ValueError("r_probe must be >= 1")
    return ((r_probe - 1) * t_nonprobe + t_probe) / r_probe


def overhead_report(records: list[RoundRecord], r_probe: int,
                    reference_time: float | None = None) -> dict:
    """Amortized per-round time, per-round diagnostic fraction, and the
    percentage overhead against a reference method's time."""
    probe_rounds = [r for r in records if r.round % r_probe == 0]
    other_rounds = [r for r in records if r.round % r_probe != 0]
    total = lambda r: r.t_train_s + r.t_diag_s
    t_probe = float(np.mean([total(r) for r in probe_rounds])) if probe_rounds else 0.0
    t_nonprobe = (float(np.mean([total(r) for r in other_rounds]))
                  if other_rounds else t_probe)
    amortized = amortized_round_time(t_nonprobe, t_probe, r_probe)
    diag_fraction = [r.t_diag_s / total(r) if total(r) > 0.0 else 0.0
                     for r in records]
    report = {
        "t_probe_s": t_probe,
        "t_nonprobe_s": t_nonprobe,
        "amortized_round_s": amortized,
        "diag_fraction": diag_fraction,
    }
    if reference_time is not None and reference_time > 0.0:
        report["overhead_pct"] = 100.0 * (amortized - reference_time) / reference_time
    return report


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

CSV_HEADER = ("seed", "round", "algorithm", "rmse", "mae", "mape",
              "d_mean", "d_cv", "n_participants", "t_train_s", "t_diag_s")


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_metrics_csv(path, records: list[RoundRecord], seed: int,
                      algorithm: str, eps_dispersion: float) -> None:
    """Per-round series; byte-stable except for the two timing columns."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for record in records:
            drifts = [record.drift_l2[k] for k in record.participant_ids]
            d_mean, d_cv = drift_stats(drifts, eps_dispersion)
            writer.writerow([
                seed, record.round, algorithm,
                _fmt(record.rmse), _fmt(record.mae), _fmt(record.mape),
                _fmt(d_mean), _fmt(d_cv), len(record.participant_ids),
                _fmt(record.t_train_s), _fmt(record.t_diag_s),
            ])


def build_summary(records: list[RoundRecord], cfg: MetricConfig, seed: int,
                  algorithm: str, r_probe: int, config_hash: str) -> dict:
    """Run-level summary with stable keys (written as summary.json)."""
    rmse_series = [r.rmse for r in records if r.rmse is not None]
    eval_rounds = [r.round for r in records if r.rmse is not None]
    final = records[-1] if records else None
    coupling_round = cfg.coupling_round
    if coupling_round is None and records:
        coupling_round = records[len(records) // 2].round
    coupling = roughness_drift_coupling(records, coupling_round) \
        if records else (None, None)
    drift_summary = None
    if final is not None and final.participant_ids:
        drifts = [final.drift_l2[k] for k in final.participant_ids]
        d_mean, d_cv = drift_stats(drifts, cfg.eps_dispersion)
        drift_summary = {"d_mean": d_mean, "d_cv": d_cv}
    thresholds = {}
    for theta in cfg.thresholds:
        t_star = rounds_to_threshold(rmse_series, theta)
        thresholds[repr(float(theta))] = ("NR" if t_star is NOT_REACHED
                                          else eval_rounds[t_star])
    return {
        "algorithm": algorithm,
        "seed": seed,
        "config_hash": config_hash,
        "final_metrics": {
            "rmse": final.rmse if final else None,
            "mae": final.mae if final else None,
            "mape": final.mape if final else None,
        },
        "best_rmse": min(rmse_series) if rmse_series else None,
        "rounds_to_threshold": thresholds,
        "drift_stats": drift_summary,
        "roughness_drift_coupling": {
            "round": coupling_round,
            "pearson": coupling[0],
            "spearman": coupling[1],
        },
        "overhead_report": overhead_report(records, r_probe) if records else None,
        "n_rounds": len(records),
    }


def write_summary_json(path, summary: dict) -> None:
    with Path(path).open("w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
