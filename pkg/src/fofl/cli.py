"""Command-line front end: data generation, experiment execution, and
report aggregation.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
error.  ``FOFL_THREADS`` bounds per-round client parallelism (0 = auto),
``FOFL_NUMBA=0`` disables JIT compilation of the hot kernels.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import struct
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .bevdata import (DataError, EcmParams, FleetConfig, SchemaError,
                      assign_splits, ingest_csv, split_and_normalize,
                      synth_fleet, write_trip_csv)
from .diagnostics import RoughnessConfig, SpectralConfig
from .fedcore import (ALGORITHMS, ChurnConfig, ConfigError, FedConfig,
                      canonical_algorithm, run_experiment)
from .fracopt import FracConfig
from .metrics import (MetricConfig, build_summary, write_metrics_csv,
                      write_summary_json)
from .numerics import RngStream

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Windowing, split ratios, and the fleet-generation seed."""

    l_win: int = 60
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 7

    def __post_init__(self):
        if self.l_win < 1:
            raise ConfigError("l_win must be positive")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ConfigError("split_ratios must be non-negative and sum to 1")
        if self.seed < 0:
            raise ConfigError("data seed must be non-negative")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs: federation, fleet, data, metrics."""

    fed: FedConfig = dataclasses.field(default_factory=FedConfig)
    fleet: FleetConfig = dataclasses.field(default_factory=FleetConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    metrics: MetricConfig = dataclasses.field(default_factory=MetricConfig)
    data_dir: str = "data"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if self.fleet.n_clients != self.fed.n_clients:
            raise ConfigError(
                f"fleet.n_clients ({self.fleet.n_clients}) must match "
                f"fed.n_clients ({self.fed.n_clients})")
        if not self.seeds:
            raise ConfigError("seeds list must not be empty")


# ---------------------------------------------------------------------------
# Config (de)serialization
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {
    "hidden_dims": int, "seeds": int, "thresholds": float,
    "split_ratios": float, "trips_per_client": int, "trip_steps": int,
    "mass_kg": float, "drag_area_m2": float, "c_rr": float,
    "aux_base_w": float, "motor_eff": float, "regen_eff": float,
    "urban_speed_mps": float, "suburban_speed_mps": float,
    "highway_speed_mps": float, "ambient_c": float, "soc0": float,
    "regime_stickiness": float, "soc_knots": float, "voc_v": float,
    "r0_ohm": float, "r1_ohm": float, "c1_f": float,
}

_NESTED = {
    "fed": FedConfig, "fleet": FleetConfig, "data": DataConfig,
    "metrics": MetricConfig, "frac": FracConfig, "rough": RoughnessConfig,
    "spectral": SpectralConfig, "churn": ChurnConfig, "ecm": EcmParams,
}


def _from_dict(cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {payload!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(
            f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in payload.items():
        if name in _NESTED and isinstance(value, dict):
            kwargs[name] = _from_dict(_NESTED[name], value)
        elif name in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(_TUPLE_FIELDS[name](v) for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, payload)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the experiment identity: everything except the run seed,
    the algorithm selection, and output plumbing."""
    payload = config_to_dict(cfg)
    payload["fed"].pop("seed", None)
    payload["fed"].pop("algorithm", None)
    payload.pop("seeds", None)
    payload.pop("data_dir", None)
    canonical = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def paper_default_config() -> ExperimentConfig:
    """The reference recipe: 100 clients, 30% participation, 300 rounds,
    one local epoch of batch-64 SGD at eta0=0.05/sqrt(t+1), alpha=0.8,
    lambda=0.1, 10x100-point probes on 128 samples every 5 rounds."""
    return ExperimentConfig(
        fed=FedConfig(
            n_clients=100, participation=0.3, rounds=300, batch_size=64,
            local_epochs=1.0, eta0=0.05, lr_schedule="inv_sqrt",
            prox_lambda=0.1, algorithm="FO-RI-FedAvg", probe_every=5,
            frac=FracConfig(alpha=0.8, delta=1e-6, clip_enabled=True,
                            p_min=0.2, p_max=5.0),
            rough=RoughnessConfig(n_directions=10, radius=0.01, n_segments=100,
                                  probe_batch_size=128, eps_amplitude=1e-8,
                                  eps_mean=1e-8),
            spectral=SpectralConfig(beta_kappa=0.0, power_iters=10),
            seed=1),
        fleet=FleetConfig(n_clients=100),
        data=DataConfig(l_win=60, split_ratios=(0.7, 0.1, 0.2)),
        seeds=(1, 2, 3, 4, 5),
    )


PRESETS = {"paper-default": paper_default_config}


def resolve_config(args) -> ExperimentConfig:
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; "
                              f"available: {', '.join(sorted(PRESETS))}")
        return PRESETS[args.preset]()
    if getattr(args, "config", None):
        return load_config(args.config)
    raise ConfigError("provide --config PATH or --preset NAME")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    """Materialize the synthetic fleet: per-client trip CSVs plus a
    manifest recording the trip-level split assignment."""
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    fleet = synth_fleet(cfg.fleet, cfg.data.seed)
    manifest = {
        "version": 1,
        "data_seed": cfg.data.seed,
        "dt": cfg.fleet.dt,
        "l_win": cfg.data.l_win,
        "split_ratios": list(cfg.data.split_ratios),
        "n_clients": cfg.fleet.n_clients,
        "config_hash": config_hash(cfg),
        "clients": [],
    }
    for k, trips in enumerate(fleet):
        filename = f"client_{k:03d}.csv"
        write_trip_csv(out / filename, trips)
        splits = assign_splits([t.trip_id for t in trips], cfg.data.split_ratios,
                               RngStream(cfg.data.seed, "split", client=k))
        manifest["clients"].append(
            {"client_id": k, "file": filename, "splits": splits})
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.fleet.n_clients} client files and manifest.json to {out}")
    return EXIT_OK


def load_datasets(data_dir: Path, l_win: int):
    """Rebuild every ClientDataset from the manifest's files and splits."""
    manifest_path = Path(data_dir) / "manifest.json"
    if not manifest_path.exists():
        raise DataError(
            f"dataset manifest not found: {manifest_path} "
            f"(run `fofl generate-data` first)")
    manifest = json.loads(manifest_path.read_text())
    datasets = []
    for entry in sorted(manifest["clients"], key=lambda e: e["client_id"]):
        trips = ingest_csv(Path(data_dir) / entry["file"])
        datasets.append(split_and_normalize(
            entry["client_id"], trips, l_win, rng=None,
            assignment=entry["splits"]))
    return datasets, manifest


def write_model_bin(path, params: np.ndarray) -> None:
    """Length-prefixed little-endian float64 vector."""
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.astype("<f8").tobytes())


def read_model_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (count,) = struct.unpack_from("<Q", raw)
    return np.frombuffer(raw, dtype="<f8", count=count, offset=8).copy()


def cmd_run(args) -> int:
    """Execute one (config, seed) experiment and write its artifacts."""
    cfg = resolve_config(args)
    data_dir = Path(args.data) if args.data else Path(cfg.data_dir)
    datasets, _ = load_datasets(data_dir, cfg.data.l_win)

    fed_cfg = replace(cfg.fed, seed=int(args.seed))
    if args.algorithm:
        fed_cfg = replace(fed_cfg, algorithm=canonical_algorithm(args.algorithm))

    final_params, records = run_experiment(fed_cfg, datasets, cfg.metrics)

    out = Path(args.out) / f"seed_{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics_round.csv", records, fed_cfg.seed,
                      fed_cfg.algorithm, cfg.metrics.eps_dispersion)
    summary = build_summary(records, cfg.metrics, fed_cfg.seed,
                            fed_cfg.algorithm, fed_cfg.probe_every,
                            config_hash(cfg))
    write_summary_json(out / "summary.json", summary)
    write_model_bin(out / "model_final.bin", final_params)
    final_rmse = summary["final_metrics"]["rmse"]
    print(f"{fed_cfg.algorithm} seed={fed_cfg.seed}: "
          f"final RMSE {final_rmse if final_rmse is None else round(final_rmse, 4)} "
          f"({len(records)} rounds) -> {out}")
    return EXIT_OK


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def cmd_report(args) -> int:
    """Aggregate summary.json files (mean +/- std over seeds) per algorithm.

    Refuses to mix runs whose configuration hashes disagree.
    """
    summaries = []
    for run_dir in args.runs:
        found = sorted(Path(run_dir).rglob("summary.json"))
        if not found:
            raise DataError(f"no summary.json found under {run_dir}")
        for path in found:
            summaries.append(json.loads(path.read_text()))

    hashes = {s["config_hash"] for s in summaries}
    if len(hashes) > 1:
        raise DataError(
            f"refusing to aggregate runs with different configs: {sorted(hashes)}")

    by_algorithm: dict[str, list[dict]] = {}
    for s in summaries:
        by_algorithm.setdefault(s["algorithm"], []).append(s)

    rows = []
    for algorithm in sorted(by_algorithm):
        group = by_algorithm[algorithm]
        row = {"algorithm": algorithm, "n_seeds": len(group)}
        for metric in ("rmse", "mae", "mape"):
            values = [s["final_metrics"][metric] for s in group
                      if s["final_metrics"][metric] is not None]
            if values:
                mean, std = _mean_std(values)
                row[f"{metric}_mean"] = mean
                row[f"{metric}_std"] = std
        d_cv = [s["drift_stats"]["d_cv"] for s in group if s.get("drift_stats")]
        if d_cv:
            row["d_cv_mean"], row["d_cv_std"] = _mean_std(d_cv)
        thresholds = {}
        for theta in group[0].get("rounds_to_threshold", {}):
            reached = [s["rounds_to_threshold"][theta] for s in group
                       if s["rounds_to_threshold"][theta] != "NR"]
            thresholds[theta] = {
                "mean_rounds": float(np.mean(reached)) if reached else "NR",
                "n_not_reached": len(group) - len(reached),
            }
        row["rounds_to_threshold"] = thresholds
        rows.append(row)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"config_hash": hashes.pop(), "algorithms": rows}
    out.with_suffix(".json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")

    csv_path = out.with_suffix(".csv")
    scalar_keys = ["algorithm", "n_seeds", "rmse_mean", "rmse_std", "mae_mean",
                   "mae_std", "mape_mean", "mape_std", "d_cv_mean", "d_cv_std"]
    with csv_path.open("w") as fh:
        fh.write(",".join(scalar_keys) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(k, "")) for k in scalar_keys) + "\n")
    print(f"aggregated {len(summaries)} runs -> {out.with_suffix('.json')} "
          f"and {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fofl",
        description="Deterministic federated-learning simulator for BEV "
                    "window-energy prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="synthesize fleet telemetry CSVs")
    gen.add_argument("--config", help="experiment config JSON")
    gen.add_argument("--preset", help="named preset (paper-default)")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cmd_generate_data)

    run = sub.add_parser("run", help="run one (config, seed) experiment")
    run.add_argument("--config", help="experiment config JSON")
    run.add_argument("--preset", help="named preset (paper-default)")
    run.add_argument("--seed", required=True, type=int)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--data", help="override the config's data_dir")
    run.add_argument("--algorithm", help="override the config's algorithm "
                                         f"({', '.join(ALGORITHMS)})")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate run summaries over seeds")
    rep.add_argument("--runs", nargs="+", required=True,
                     help="directories containing summary.json files")
    rep.add_argument("--out", required=True, help="output file base path")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
