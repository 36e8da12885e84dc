"""Data layer: synthetic BEV fleet generation (drive cycles -> battery
model -> pack power -> window energy labels), telemetry CSV ingestion,
windowing, trip-disjoint splits, and per-client normalization.

Sign convention: positive current means discharge, so positive pack
power is consumption and regenerative braking produces negative energy
increments.  Window labels are signed Wh per window.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .numerics import RngStream

logger = logging.getLogger(__name__)

GRAVITY = 9.81          # m/s^2
AIR_DENSITY = 1.20      # kg/m^3


class SchemaError(ValueError):
    """Telemetry file does not match the declared column schema."""


class DataError(ValueError):
    """Dataset files are missing or structurally unusable."""


# ---------------------------------------------------------------------------
# Equivalent-circuit battery model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EcmParams:
    """First-order equivalent-circuit cell (V_oc, R0, one RC pair).

    Parameter curves are piecewise-linear lookup tables on shared SoC
    knots.  Capacity is configured in Ah and converted to A*s internally.
    """

    q_cell_ah: float
    n_s: int
    n_p: int
    soc0: float = 0.9
    soc_knots: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                    0.6, 0.7, 0.8, 0.9, 1.0)
    voc_v: tuple[float, ...] = (3.00, 3.35, 3.48, 3.56, 3.62, 3.68,
                                3.75, 3.84, 3.94, 4.06, 4.20)
    r0_ohm: tuple[float, ...] = (0.0240, 0.0205, 0.0185, 0.0172, 0.0163,
                                 0.0156, 0.0150, 0.0145, 0.0140, 0.0136,
                                 0.0132)
    r1_ohm: tuple[float, ...] = (0.0160, 0.0143, 0.0132, 0.0124, 0.0118,
                                 0.0114, 0.0110, 0.0107, 0.0104, 0.0102,
                                 0.0100)
    c1_f: tuple[float, ...] = (1500.0, 1650.0, 1780.0, 1890.0, 1990.0,
                               2080.0, 2160.0, 2240.0, 2320.0, 2410.0,
                               2500.0)

    def __post_init__(self):
        if self.q_cell_ah <= 0.0 or self.n_s < 1 or self.n_p < 1:
            raise ValueError("capacity and cell counts must be positive")
        if not 0.0 <= self.soc0 <= 1.0:
            raise ValueError("soc0 must lie in [0, 1]")
        knots = np.asarray(self.soc_knots)
        if np.any(np.diff(knots) <= 0.0):
            raise ValueError("SoC knots must be strictly increasing")
        for name in ("voc_v", "r0_ohm", "r1_ohm", "c1_f"):
            vals = np.asarray(getattr(self, name))
            if vals.shape != knots.shape:
                raise ValueError(f"{name} must have one value per SoC knot")
            if name != "voc_v" and np.any(vals <= 0.0):
                raise ValueError(f"{name} must be positive everywhere")
        if np.any(np.diff(np.asarray(self.voc_v)) < 0.0):
            raise ValueError("open-circuit voltage must be non-decreasing in SoC")

    @property
    def q_cell_as(self) -> float:
        return self.q_cell_ah * 3600.0

    def tables(self):
        return (np.asarray(self.soc_knots), np.asarray(self.voc_v),
                np.asarray(self.r0_ohm), np.asarray(self.r1_ohm),
                np.asarray(self.c1_f))


@dataclass
class EcmResult:
    """Per-step cell trajectory plus the post-trajectory state."""

    v_cell: np.ndarray
    soc: np.ndarray
    v1: np.ndarray
    p_pack_w: np.ndarray
    soc_end: float
    v1_end: float
    n_clamped: int


def ecm_simulate(params: EcmParams, current_a, dt: float) -> EcmResult:
    """Forward-Euler integration of the cell under a prescribed current.

    SoC is Coulomb-counted and clamped to [0, 1] (clamp events are
    counted and logged, not fatal); pack power uses the series/parallel
    mapping ``P = (n_s V_cell)(n_p I_cell)``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    i_cell = np.ascontiguousarray(current_a, dtype=np.float64)
    v_cell, soc, v1, soc_end, v1_end, clamped = _kernels.ecm_current_loop(
        i_cell, float(dt), params.soc0, params.q_cell_as, *params.tables())
    if clamped:
        logger.warning("SoC clamped to [0, 1] on %d steps", clamped)
    p_pack = (params.n_s * v_cell) * (params.n_p * i_cell)
    return EcmResult(v_cell, soc, v1, p_pack, float(soc_end), float(v1_end),
                     int(clamped))


def energy_increments(p_pack_w, dt: float) -> np.ndarray:
    """Per-step energy in Wh: ``P * dt / 3600``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return np.asarray(p_pack_w, dtype=np.float64) * (dt / 3600.0)


# ---------------------------------------------------------------------------
# Trips and windowing
# ---------------------------------------------------------------------------


@dataclass
class TripTrace:
    """Uniformly sampled telemetry for one trip of one vehicle."""

    vehicle_id: int
    trip_id: str
    dt: float
    speed_mps: np.ndarray
    accel_mps2: np.ndarray
    grade_rad: np.ndarray
    ambient_c: np.ndarray
    aux_w: np.ndarray
    pack_power_w: np.ndarray

    def __len__(self) -> int:
        return int(self.speed_mps.shape[0])


FEATURE_NAMES = ("speed_mps", "accel_mps2", "grade_rad", "ambient_c", "aux_w")


def default_features(trip: TripTrace) -> np.ndarray:
    """Per-step feature matrix (n, 5): speed, accel, grade, ambient, aux."""
    return np.stack([getattr(trip, name) for name in FEATURE_NAMES], axis=1)


def make_windows(trip: TripTrace, l_win: int,
                 feature_fn=default_features) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows: flattened features of ``l_win`` consecutive steps
    paired with the window's summed energy in Wh.

    Trips shorter than the window yield an empty sample set.
    """
    feats = np.asarray(feature_fn(trip), dtype=np.float64)
    n, d_x = feats.shape
    if n < l_win:
        logger.warning("trip %s shorter than window (%d < %d); skipped",
                       trip.trip_id, n, l_win)
        return np.empty((0, l_win * d_x)), np.empty(0)
    e = energy_increments(trip.pack_power_w, trip.dt)
    csum = np.concatenate([[0.0], np.cumsum(e)])
    labels = csum[l_win:] - csum[:-l_win]
    windows = np.lib.stride_tricks.sliding_window_view(feats, l_win, axis=0)
    x = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(-1, l_win * d_x)
    return x, labels


# ---------------------------------------------------------------------------
# Synthetic fleet generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FleetConfig:
    """Population size and the per-client heterogeneity ranges."""

    n_clients: int = 20
    trips_per_client: tuple[int, int] = (4, 8)
    trip_steps: tuple[int, int] = (240, 600)
    dt: float = 1.0
    ecm: EcmParams = field(default_factory=lambda: EcmParams(q_cell_ah=5.0, n_s=96, n_p=46))
    mass_kg: tuple[float, float] = (1300.0, 2600.0)
    drag_area_m2: tuple[float, float] = (0.55, 0.85)
    c_rr: tuple[float, float] = (0.007, 0.012)
    aux_base_w: tuple[float, float] = (300.0, 1500.0)
    motor_eff: tuple[float, float] = (0.84, 0.93)
    regen_eff: tuple[float, float] = (0.55, 0.75)
    urban_speed_mps: tuple[float, float] = (8.0, 14.0)
    suburban_speed_mps: tuple[float, float] = (14.0, 22.0)
    highway_speed_mps: tuple[float, float] = (24.0, 33.0)
    ambient_c: tuple[float, float] = (-5.0, 35.0)
    soc0: tuple[float, float] = (0.55, 0.95)
    regime_stickiness: tuple[float, float] = (0.95, 0.995)
    stop_prob: float = 0.01
    stop_dwell_steps: int = 20
    accel_gain: float = 0.12
    v_max_mps: float = 36.0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        for name in ("trips_per_client", "trip_steps", "mass_kg", "drag_area_m2",
                     "c_rr", "aux_base_w", "motor_eff", "regen_eff",
                     "urban_speed_mps", "suburban_speed_mps", "highway_speed_mps",
                     "soc0", "regime_stickiness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
            if name not in ("trips_per_client", "trip_steps") and lo <= 0.0 \
                    and name != "soc0":
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class VehicleParams:
    """One client's physical configuration, sampled from FleetConfig ranges."""

    mass_kg: float
    drag_area_m2: float
    c_rr: float
    aux_base_w: float
    motor_eff: float
    regen_eff: float
    regime_targets: tuple[float, float, float]
    regime_stay: tuple[float, float, float]


def _uniform(gen, bounds) -> float:
    lo, hi = bounds
    return float(gen.uniform(lo, hi))


def sample_vehicle(cfg: FleetConfig, seed: int, client: int) -> VehicleParams:
    gen = RngStream(seed, "vehicle", client=client).generator()
    targets = (_uniform(gen, cfg.urban_speed_mps),
               _uniform(gen, cfg.suburban_speed_mps),
               _uniform(gen, cfg.highway_speed_mps))
    # Dirichlet regime preference: sticky favourite regime makes duty
    # cycles (hence labels) genuinely non-iid across clients.
    pref = gen.dirichlet(np.ones(3))
    lo, hi = cfg.regime_stickiness
    stay = tuple(float(lo + (hi - lo) * p) for p in pref)
    return VehicleParams(
        mass_kg=_uniform(gen, cfg.mass_kg),
        drag_area_m2=_uniform(gen, cfg.drag_area_m2),
        c_rr=_uniform(gen, cfg.c_rr),
        aux_base_w=_uniform(gen, cfg.aux_base_w),
        motor_eff=_uniform(gen, cfg.motor_eff),
        regen_eff=_uniform(gen, cfg.regen_eff),
        regime_targets=targets,
        regime_stay=stay,
    )


def mechanical_power(v, a, grade, vehicle: VehicleParams) -> np.ndarray:
    """Longitudinal traction power demand at the wheels (W)."""
    m = vehicle.mass_kg
    force = (m * a
             + 0.5 * AIR_DENSITY * vehicle.drag_area_m2 * v * v
             + vehicle.c_rr * m * GRAVITY
             + m * GRAVITY * np.sin(grade))
    return force * v


def synth_trip(cfg: FleetConfig, vehicle: VehicleParams, seed: int,
               client: int, trip_index: int) -> TripTrace:
    """Generate one trip: drive cycle -> power demand -> battery loop."""
    gen = RngStream(seed, "trip", round=trip_index, client=client).generator()
    n = int(gen.integers(cfg.trip_steps[0], cfg.trip_steps[1] + 1))
    u_regime = gen.random(n)
    u_stop = gen.random(n)
    xi_accel = gen.standard_normal(n)
    xi_grade = gen.standard_normal(n)
    speed, accel, grade = _kernels.drive_cycle_loop(
        u_regime, u_stop, xi_accel, xi_grade,
        np.asarray(vehicle.regime_targets), np.asarray(vehicle.regime_stay),
        cfg.stop_prob, cfg.stop_dwell_steps, cfg.accel_gain,
        np.array([0.55, 0.40, 0.25]), 0.995, 0.002, cfg.v_max_mps, cfg.dt)

    ambient = np.full(n, _uniform(gen, cfg.ambient_c))
    hvac_w = 28.0 * np.abs(ambient - 20.0)
    aux = np.full(n, vehicle.aux_base_w) + hvac_w

    p_mech = mechanical_power(speed, accel, grade, vehicle)
    p_elec = np.where(p_mech >= 0.0, p_mech / vehicle.motor_eff,
                      p_mech * vehicle.regen_eff) + aux
    p_cell = p_elec / (cfg.ecm.n_s * cfg.ecm.n_p)

    soc0 = _uniform(gen, cfg.soc0)
    i_cell, v_cell, _, _, clamped = _kernels.ecm_power_loop(
        np.ascontiguousarray(p_cell), cfg.dt, soc0, cfg.ecm.q_cell_as,
        *cfg.ecm.tables())
    if clamped:
        logger.debug("trip c%03d_t%03d: %d clamped battery steps",
                     client, trip_index, clamped)
    pack_power = (cfg.ecm.n_s * v_cell) * (cfg.ecm.n_p * i_cell)
    return TripTrace(
        vehicle_id=client,
        trip_id=f"c{client:03d}_t{trip_index:03d}",
        dt=cfg.dt,
        speed_mps=speed, accel_mps2=accel, grade_rad=grade,
        ambient_c=ambient, aux_w=aux, pack_power_w=pack_power)


def synth_fleet(cfg: FleetConfig, seed: int) -> list[list[TripTrace]]:
    """Per-client trip lists; identical (cfg, seed) gives identical fleets."""
    fleet = []
    for k in range(cfg.n_clients):
        vehicle = sample_vehicle(cfg, seed, k)
        count_gen = RngStream(seed, "trip-count", client=k).generator()
        n_trips = int(count_gen.integers(cfg.trips_per_client[0],
                                         cfg.trips_per_client[1] + 1))
        fleet.append([synth_trip(cfg, vehicle, seed, k, q)
                      for q in range(n_trips)])
    return fleet


# ---------------------------------------------------------------------------
# Telemetry CSV interface
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("vehicle_id", "trip_id", "timestamp_s", "speed_mps",
               "accel_mps2", "grade_rad", "ambient_c", "aux_w", "pack_power_w")

_OPTIONAL_CHANNELS = ("accel_mps2", "grade_rad", "ambient_c", "aux_w")


@dataclass(frozen=True)
class SchemaConfig:
    """Column mapping and resampling rules for telemetry ingestion.

    ``columns`` maps canonical channel names to the file's header names;
    unmapped canonical names default to themselves.  Power may come in
    directly (pack_power_w) or as voltage and current.
    """

    columns: dict = field(default_factory=dict)
    dt: float = 1.0
    gap_factor: float = 5.0

    def resolve(self, canonical: str) -> str:
        return self.columns.get(canonical, canonical)


def write_trip_csv(path: Path, trips: list[TripTrace]) -> None:
    """Write trips in the canonical telemetry layout (ingest_csv round-trips)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for trip in trips:
            times = np.arange(len(trip)) * trip.dt
            for r in range(len(trip)):
                writer.writerow([
                    trip.vehicle_id, trip.trip_id, repr(float(times[r])),
                    repr(float(trip.speed_mps[r])),
                    repr(float(trip.accel_mps2[r])),
                    repr(float(trip.grade_rad[r])),
                    repr(float(trip.ambient_c[r])),
                    repr(float(trip.aux_w[r])),
                    repr(float(trip.pack_power_w[r])),
                ])


def _resample(times: np.ndarray, values: np.ndarray,
              grid: np.ndarray) -> np.ndarray:
    if times.size == 1:
        return np.full(grid.size, values[0])
    return np.interp(grid, times, values)


def ingest_csv(path, schema: SchemaConfig | None = None) -> list[TripTrace]:
    """Parse a telemetry CSV into uniformly resampled trips.

    Rows are grouped by (vehicle, trip) and sorted by timestamp; gaps
    longer than ``gap_factor * dt`` split a trip into separate trips,
    shorter irregularities are linearly interpolated onto the uniform
    grid.  Unparseable rows are skipped and counted; a missing required
    column raises ``SchemaError`` naming the column.
    """
    schema = schema or SchemaConfig()
    path = Path(path)
    if not path.exists():
        raise DataError(f"telemetry file not found: {path}")

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = ["vehicle_id", "trip_id", "timestamp_s", "speed_mps"]
        for canonical in required:
            if schema.resolve(canonical) not in header:
                raise SchemaError(f"missing required column "
                                  f"{schema.resolve(canonical)!r}")
        has_power = schema.resolve("pack_power_w") in header
        has_vi = (schema.resolve("pack_voltage_v") in header
                  and schema.resolve("pack_current_a") in header)
        if not has_power and not has_vi:
            raise SchemaError(
                f"need column {schema.resolve('pack_power_w')!r} or both "
                f"{schema.resolve('pack_voltage_v')!r} and "
                f"{schema.resolve('pack_current_a')!r}")

        groups: dict[tuple[str, str], list] = {}
        skipped = 0
        for row in reader:
            try:
                vid = row[schema.resolve("vehicle_id")]
                tid = row[schema.resolve("trip_id")]
                t = float(row[schema.resolve("timestamp_s")])
                speed = float(row[schema.resolve("speed_mps")])
                if has_power:
                    power = float(row[schema.resolve("pack_power_w")])
                else:
                    power = (float(row[schema.resolve("pack_voltage_v")])
                             * float(row[schema.resolve("pack_current_a")]))
                extras = {}
                for name in _OPTIONAL_CHANNELS:
                    col = schema.resolve(name)
                    if col in header and row[col] not in ("", None):
                        extras[name] = float(row[col])
                groups.setdefault((vid, tid), []).append((t, speed, power, extras))
            except (TypeError, ValueError, KeyError):
                skipped += 1
    if skipped:
        logger.warning("%s: skipped %d unparseable rows", path.name, skipped)

    trips: list[TripTrace] = []
    for (vid, tid), rows in groups.items():
        rows.sort(key=lambda item: item[0])
        times = np.array([r[0] for r in rows])
        segments = np.split(np.arange(times.size),
                            np.where(np.diff(times) > schema.gap_factor * schema.dt)[0] + 1)
        for seg_no, idx in enumerate(segments):
            if idx.size == 0:
                continue
            seg_times = times[idx]
            grid = np.arange(seg_times[0], seg_times[-1] + 0.5 * schema.dt,
                             schema.dt)
            speed = _resample(seg_times, np.array([rows[i][1] for i in idx]), grid)
            power = _resample(seg_times, np.array([rows[i][2] for i in idx]), grid)
            chan = {}
            for name in _OPTIONAL_CHANNELS:
                raw = [rows[i][3].get(name) for i in idx]
                if all(v is not None for v in raw):
                    chan[name] = _resample(seg_times, np.array(raw), grid)
            if "accel_mps2" not in chan:
                chan["accel_mps2"] = (np.gradient(speed, schema.dt)
                                      if grid.size > 1 else np.zeros(grid.size))
            for name in ("grade_rad", "ambient_c", "aux_w"):
                chan.setdefault(name, np.zeros(grid.size))
            trip_id = tid if len(segments) == 1 else f"{tid}_g{seg_no}"
            try:
                vehicle_id = int(vid)
            except ValueError:
                vehicle_id = abs(hash(vid)) % (10 ** 9)
            trips.append(TripTrace(
                vehicle_id=vehicle_id, trip_id=trip_id, dt=schema.dt,
                speed_mps=speed, accel_mps2=chan["accel_mps2"],
                grade_rad=chan["grade_rad"], ambient_c=chan["ambient_c"],
                aux_w=chan["aux_w"], pack_power_w=power))
    return trips


# ---------------------------------------------------------------------------
# Per-client datasets
# ---------------------------------------------------------------------------


@dataclass
class ClientDataset:
    """Trip-disjoint train/val/test windows with the client's own
    normalization statistics (computed on the train split only)."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    label_mean: float
    label_scale: float
    mape_eps_wh: float
    split_map: dict

    @property
    def n_train(self) -> int:
        return int(self.train_y.shape[0])

    def labels_to_wh(self, normalized) -> np.ndarray:
        return np.asarray(normalized) * self.label_scale + self.label_mean


def assign_splits(trip_ids: list[str], ratios: tuple[float, float, float],
                  rng: RngStream) -> dict[str, str]:
    """Trip-level shuffle and partition; floor rule sends remainders to test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if len(trip_ids) < 3:
        logger.warning("fewer than 3 trips; falling back to all-train split")
        return {tid: "train" for tid in trip_ids}
    order = rng.generator().permutation(len(trip_ids))
    n = len(trip_ids)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    n_train = max(n_train, 1)
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[trip_ids[idx]] = split
    return assignment


def split_and_normalize(client_id: int, trips: list[TripTrace],
                        l_win: int, rng: RngStream | None = None,
                        ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
                        assignment: dict[str, str] | None = None,
                        feature_fn=default_features) -> ClientDataset:
    """Build a ClientDataset: window every trip, split at trip granularity,
    z-score features and labels with train-split statistics.

    An explicit ``assignment`` (trip_id -> split) overrides the seeded
    shuffle, which is how runs reuse the split recorded in a manifest.
    """
    if assignment is None:
        if rng is None:
            raise ValueError("need an RngStream when no explicit assignment is given")
        assignment = assign_splits([t.trip_id for t in trips], ratios, rng)
    buckets = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for trip in trips:
        split = assignment.get(trip.trip_id)
        if split not in buckets:
            raise DataError(f"trip {trip.trip_id} has unknown split {split!r}")
        x, y = make_windows(trip, l_win, feature_fn)
        if x.shape[0]:
            buckets[split][0].append(x)
            buckets[split][1].append(y)

    d = None
    parts = {}
    for split, (xs, ys) in buckets.items():
        if xs:
            parts[split] = (np.concatenate(xs), np.concatenate(ys))
            d = parts[split][0].shape[1]
    if "train" not in parts:
        raise DataError(f"client {client_id}: no usable training windows")
    for split in ("val", "test"):
        parts.setdefault(split, (np.empty((0, d)), np.empty(0)))

    train_x, train_y = parts["train"]
    feature_mean = train_x.mean(axis=0)
    feature_scale = train_x.std(axis=0)
    feature_scale[feature_scale == 0.0] = 1.0
    label_mean = float(train_y.mean())
    label_scale = float(train_y.std())
    if label_scale == 0.0:
        label_scale = 1.0
    mape_eps = max(1e-3 * float(np.median(np.abs(train_y))), 1e-12)

    def norm(x, y):
        return (np.ascontiguousarray((x - feature_mean) / feature_scale),
                (y - label_mean) / label_scale)

    nx_train, ny_train = norm(train_x, train_y)
    nx_val, ny_val = norm(*parts["val"])
    nx_test, ny_test = norm(*parts["test"])
    return ClientDataset(
        client_id=client_id,
        train_x=nx_train, train_y=ny_train,
        val_x=nx_val, val_y=ny_val,
        test_x=nx_test, test_y=ny_test,
        feature_mean=feature_mean, feature_scale=feature_scale,
        label_mean=label_mean, label_scale=label_scale,
        mape_eps_wh=mape_eps, split_map=dict(assignment))
