"""Federated orchestration: proximal local training with optional
fractional-order preconditioning and roughness-informed control, server
aggregation, partial participation, availability churn, and the
baseline algorithms (FedAvg, FedProx, SCAFFOLD, FedNova, FedAdam).

Determinism contract: every random decision draws from a counter-
addressed stream keyed by (seed, purpose, round, client), so results are
bitwise reproducible and independent of client scheduling order.  The
algorithm variants share one local-update routine, which makes the
reduction identities (e.g. the full method with alpha=1 and zero
proximal strength equals FedAvg) exact rather than approximate.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bevdata import ClientDataset
from .diagnostics import (RoughnessConfig, SpectralConfig, roughness_index,
                          spectral_flatness)
from .fracopt import FracConfig, FracState, fo_step, preconditioner
from .metrics import MetricConfig, RoundRecord, mae, mape, rmse
from .model import (MlpSpec, final_layer_matrix, forward, init_params,
                    loss_and_grad, probe_loss)
from .numerics import RngStream

logger = logging.getLogger(__name__)

ALGORITHMS = ("FedAvg", "FedProx", "SCAFFOLD", "FedNova", "FedAdam",
              "RI-FedAvg", "FO-FedAvg", "FO-RI-FedAvg")

_ALGO_LOOKUP = {name.lower(): name for name in ALGORITHMS}


class ConfigError(ValueError):
    """Invalid experiment configuration (reported before any compute)."""


def canonical_algorithm(name: str) -> str:
    try:
        return _ALGO_LOOKUP[name.strip().lower()]
    except KeyError:
        raise ConfigError(
            f"unknown algorithm {name!r}; valid names: {', '.join(ALGORITHMS)}")


def uses_roughness(algorithm: str) -> bool:
    return algorithm in ("RI-FedAvg", "FO-RI-FedAvg")


def uses_preconditioner(algorithm: str) -> bool:
    return algorithm in ("FO-FedAvg", "FO-RI-FedAvg")


@dataclass(frozen=True)
class ChurnConfig:
    """Two-state Markov availability: leave/join probabilities per round."""

    p_leave: float = 0.0
    p_join: float = 0.0
    initial_available_fraction: float = 1.0

    def __post_init__(self):
        for name in ("p_leave", "p_join"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if not 0.0 < self.initial_available_fraction <= 1.0:
            raise ConfigError("initial_available_fraction must be in (0, 1]")


@dataclass(frozen=True)
class FedConfig:
    """Full experiment specification for one federated run."""

    n_clients: int = 20
    participation: float = 0.3
    rounds: int = 100
    batch_size: int = 64
    local_epochs: float = 1.0
    local_steps: int | None = None
    eta0: float = 0.05
    lr_schedule: str = "inv_sqrt"          # or "constant"
    prox_lambda: float = 0.1
    tau_response: float = 0.5
    fedprox_mu: float = 0.01
    fedadam_lr: float = 0.1
    fedadam_beta1: float = 0.9
    fedadam_beta2: float = 0.99
    fedadam_eps: float = 1e-3
    algorithm: str = "FO-RI-FedAvg"
    probe_every: int = 5
    hidden_dims: tuple[int, int] = (64, 32)
    frac: FracConfig = field(default_factory=FracConfig)
    rough: RoughnessConfig = field(default_factory=RoughnessConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    seed: int = 1
    log_roughness: bool = False
    log_client_vectors: bool = False

    def __post_init__(self):
        object.__setattr__(self, "algorithm", canonical_algorithm(self.algorithm))
        if self.n_clients < 1:
            raise ConfigError("n_clients must be positive")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must be in (0, 1]")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.local_epochs <= 0.0 and self.local_steps is None:
            raise ConfigError("need positive local_epochs or explicit local_steps")
        if self.local_steps is not None and self.local_steps < 1:
            raise ConfigError("local_steps must be positive")
        if self.eta0 <= 0.0:
            raise ConfigError("eta0 must be positive")
        if self.lr_schedule not in ("constant", "inv_sqrt"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.prox_lambda < 0.0 or self.fedprox_mu < 0.0:
            raise ConfigError("regularization strengths must be non-negative")
        if self.tau_response <= 0.0:
            raise ConfigError("tau_response must be positive")
        if self.probe_every < 1:
            raise ConfigError("probe_every must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class ClientState:
    """Per-client persistent state across rounds."""

    dataset: ClientDataset
    cached_roughness: float | None = None
    scaffold_control: np.ndarray | None = None
    local_step_counter: int = 0


@dataclass
class ServerState:
    """Server-side state: global model, availability, optimizer moments."""

    global_params: np.ndarray
    round: int = 0
    availability: np.ndarray = None
    fedadam_m: np.ndarray | None = None
    fedadam_v: np.ndarray | None = None
    scaffold_control: np.ndarray | None = None


def learning_rate(cfg: FedConfig, round_t: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.eta0
    return cfg.eta0 / math.sqrt(round_t + 1.0)


def roughness_response(i_k: float, tau: float) -> float:
    """Saturating map of the roughness index into [0, 1)."""
    if i_k < 0.0:
        raise ValueError("roughness index must be non-negative")
    return i_k / (i_k + tau)


def proximal_gradient(base_grad: np.ndarray, w: np.ndarray, w_anchor: np.ndarray,
                      lambda_t: float, r_of_i: float) -> np.ndarray:
    """Gradient of the proximally regularized local objective."""
    if base_grad.shape != w.shape or w.shape != w_anchor.shape:
        raise ValueError("length mismatch in proximal gradient")
    coeff = lambda_t * r_of_i
    if coeff == 0.0:
        return base_grad
    return base_grad + coeff * (w - w_anchor)


def _robust_ceil(x: float) -> int:
    # ceil that tolerates float noise like 0.3 * 10 == 3.0000000000000004
    snapped = round(x)
    if abs(x - snapped) < 1e-9:
        return int(snapped)
    return int(math.ceil(x))


def sample_participants(server: ServerState, cfg: FedConfig,
                        rng: RngStream) -> np.ndarray:
    """Uniform sample (without replacement) of max(ceil(C*|A_t|), 1)
    clients from the available pool; an empty pool force-joins one
    uniformly chosen client."""
    gen = rng.generator()
    available = np.flatnonzero(server.availability)
    if available.size == 0:
        forced = int(gen.integers(cfg.n_clients))
        server.availability[forced] = True
        available = np.array([forced])
        logger.warning("no available clients at round %d; force-joined %d",
                       server.round, forced)
    size = max(_robust_ceil(cfg.participation * available.size), 1)
    chosen = gen.choice(available, size=size, replace=False)
    return np.sort(chosen)


def advance_churn(server: ServerState, churn: ChurnConfig,
                  rng: RngStream) -> None:
    """Independent leave/join transitions for every client."""
    if churn.p_leave == 0.0 and churn.p_join == 0.0:
        return
    u = rng.generator().random(server.availability.size)
    avail = server.availability
    server.availability = np.where(avail, u >= churn.p_leave, u < churn.p_join)


def local_step_count(cfg: FedConfig, n_train: int) -> int:
    if cfg.local_steps is not None:
        return cfg.local_steps
    return max(_robust_ceil(cfg.local_epochs * n_train / cfg.batch_size), 1)


def client_round(client: ClientState, w_t: np.ndarray, spec: MlpSpec,
                 cfg: FedConfig, round_t: int, eta_t: float,
                 kappa: float | None) -> tuple[np.ndarray, dict]:
    """One client's local training for one round.

    The first local step is always plain proximal SGD; fractional
    preconditioning (when the algorithm uses it) applies from the second
    step on, gated by the spectral indicator and then clipped.  Returns
    the final local parameters and a stats dict (loss trace, drift,
    roughness, step count, timings).
    """
    ds = client.dataset
    algorithm = cfg.algorithm

    t_diag = 0.0
    i_k = float("nan")
    need_rough = (uses_roughness(algorithm) and cfg.prox_lambda > 0.0) \
        or cfg.log_roughness
    if need_rough:
        tic = time.perf_counter()
        if round_t % cfg.probe_every == 0 or client.cached_roughness is None:
            px = ds.train_x[:cfg.rough.probe_batch_size]
            py = ds.train_y[:cfg.rough.probe_batch_size]
            client.cached_roughness = roughness_index(
                w_t, lambda w: probe_loss(spec, w, px, py), cfg.rough,
                RngStream(cfg.seed, "probe", round=round_t, client=ds.client_id))
        i_k = client.cached_roughness
        t_diag += time.perf_counter() - tic

    if algorithm == "FedProx":
        prox_coeff = cfg.fedprox_mu
    elif uses_roughness(algorithm) and cfg.prox_lambda > 0.0:
        prox_coeff = cfg.prox_lambda * roughness_response(i_k, cfg.tau_response)
    else:
        prox_coeff = 0.0

    fractional = uses_preconditioner(algorithm) and cfg.frac.alpha < 1.0
    damping = cfg.spectral.beta_kappa * kappa if (kappa is not None) else 0.0

    n_train = ds.n_train
    steps = local_step_count(cfg, n_train)
    batch_gen = RngStream(cfg.seed, "batch", round=round_t,
                          client=ds.client_id).generator()

    tic = time.perf_counter()
    w = w_t.copy()
    state = FracState()
    losses = []
    for h in range(steps):
        if n_train > cfg.batch_size:
            idx = batch_gen.choice(n_train, size=cfg.batch_size, replace=False)
            bx, by = ds.train_x[idx], ds.train_y[idx]
        else:
            bx, by = ds.train_x, ds.train_y
        loss, grad = loss_and_grad(spec, w, bx, by)
        losses.append(loss)
        if prox_coeff != 0.0:
            grad = grad + prox_coeff * (w - w_t)
        if h >= 1 and fractional:
            p = preconditioner(state, w, cfg.frac, damping=damping)
            state.prev_params = w
            w = fo_step(w, grad, p, eta_t)
        else:
            state.prev_params = w
            w = w - eta_t * grad
        client.local_step_counter += 1
    t_train = time.perf_counter() - tic

    if not np.all(np.isfinite(w)):
        raise FloatingPointError(
            f"client {ds.client_id} produced non-finite parameters at round {round_t}")

    stats = {
        "losses": losses,
        "drift_l2": float(np.linalg.norm(w - w_t)),
        "roughness": i_k,
        "kappa": kappa,
        "n_steps": steps,
        "n_samples": n_train,
        "t_train_s": t_train,
        "t_diag_s": t_diag,
    }
    return w, stats


def _scaffold_client_round(client: ClientState, w_t: np.ndarray, spec: MlpSpec,
                           cfg: FedConfig, round_t: int, eta_t: float,
                           server_c: np.ndarray) -> tuple[np.ndarray, dict]:
    """SCAFFOLD local run: plain SGD on the corrected gradient, then the
    option-II control update c_k <- c_k - c + (w_t - w_out)/(H eta)."""
    ds = client.dataset
    if client.scaffold_control is None:
        client.scaffold_control = np.zeros_like(w_t)
    c_k = client.scaffold_control
    correction = server_c - c_k

    n_train = ds.n_train
    steps = local_step_count(cfg, n_train)
    batch_gen = RngStream(cfg.seed, "batch", round=round_t,
                          client=ds.client_id).generator()
    tic = time.perf_counter()
    w = w_t.copy()
    losses = []
    for _ in range(steps):
        if n_train > cfg.batch_size:
            idx = batch_gen.choice(n_train, size=cfg.batch_size, replace=False)
            bx, by = ds.train_x[idx], ds.train_y[idx]
        else:
            bx, by = ds.train_x, ds.train_y
        loss, grad = loss_and_grad(spec, w, bx, by)
        losses.append(loss)
        w = w - eta_t * (grad + correction)
        client.local_step_counter += 1
    t_train = time.perf_counter() - tic

    c_k_new = c_k - server_c + (w_t - w) / (steps * eta_t)
    delta_c = c_k_new - c_k
    client.scaffold_control = c_k_new

    stats = {
        "losses": losses,
        "drift_l2": float(np.linalg.norm(w - w_t)),
        "roughness": float("nan"),
        "kappa": None,
        "n_steps": steps,
        "n_samples": n_train,
        "t_train_s": t_train,
        "t_diag_s": 0.0,
        "scaffold_delta_c": delta_c,
    }
    return w, stats


def aggregate(updates: list[tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Data-weighted average of client models, summed in ascending
    client-id order."""
    if not updates:
        raise ValueError("empty update set")
    updates = sorted(updates, key=lambda u: u[0])
    shape = updates[0][2].shape
    n_total = float(sum(u[1] for u in updates))
    out = np.zeros(shape)
    for _, n_k, w_k in updates:
        if w_k.shape != shape:
            raise ValueError("length mismatch among client updates")
        out += (n_k / n_total) * w_k
    return out


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("FOFL_THREADS", "0")
    try:
        threads = int(raw)
    except ValueError:
        threads = 0
    if threads <= 0:
        threads = min(4, os.cpu_count() or 1)
    return max(1, min(threads, n_tasks))


def evaluate_global(spec: MlpSpec, params: np.ndarray,
                    datasets: list[ClientDataset], split: str = "test"):
    """Micro-averaged RMSE/MAE/MAPE on the pooled split, on the Wh scale
    (labels inverse-transformed per client)."""
    preds, labels, eps = [], [], []
    for ds in datasets:
        x = getattr(ds, f"{split}_x")
        y = getattr(ds, f"{split}_y")
        if y.size == 0:
            continue
        yhat = forward(spec, params, x)
        preds.append(ds.labels_to_wh(yhat))
        labels.append(ds.labels_to_wh(y))
        eps.append(np.full(y.size, ds.mape_eps_wh))
    if not preds:
        return None, None, None
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    eps = np.concatenate(eps)
    return rmse(preds, labels), mae(preds, labels), mape(preds, labels, eps)


def run_experiment(cfg: FedConfig, datasets: list[ClientDataset],
                   metric_cfg: MetricConfig | None = None
                   ) -> tuple[np.ndarray, list[RoundRecord]]:
    """Run the full federated loop and return the final global model plus
    per-round telemetry.

    Each round: sample participants from the available pool, broadcast,
    run local training (in parallel when FOFL_THREADS allows), apply the
    algorithm's server update, evaluate global metrics at the configured
    cadence, then advance availability churn.  The metric snapshot in
    round t's record refers to the post-aggregation model of that round.
    """
    if len(datasets) != cfg.n_clients:
        raise ConfigError(
            f"got {len(datasets)} client datasets for n_clients={cfg.n_clients}")
    metric_cfg = metric_cfg or MetricConfig()
    input_dim = datasets[0].train_x.shape[1]
    for ds in datasets:
        if ds.train_x.shape[1] != input_dim:
            raise ConfigError("clients disagree on feature width")
    spec = MlpSpec(input_dim=input_dim, hidden_dims=cfg.hidden_dims)

    clients = [ClientState(dataset=ds) for ds in datasets]
    params = init_params(spec, RngStream(cfg.seed, "init"))

    availability = np.ones(cfg.n_clients, dtype=bool)
    frac_avail = cfg.churn.initial_available_fraction
    if frac_avail < 1.0:
        n_avail = max(_robust_ceil(frac_avail * cfg.n_clients), 1)
        gen = RngStream(cfg.seed, "availability").generator()
        availability = np.zeros(cfg.n_clients, dtype=bool)
        availability[gen.choice(cfg.n_clients, size=n_avail, replace=False)] = True

    server = ServerState(global_params=params, availability=availability)
    if cfg.algorithm == "SCAFFOLD":
        server.scaffold_control = np.zeros_like(params)
    if cfg.algorithm == "FedAdam":
        server.fedadam_m = np.zeros_like(params)
        server.fedadam_v = np.zeros_like(params)

    records: list[RoundRecord] = []
    for t in range(cfg.rounds):
        server.round = t
        eta_t = learning_rate(cfg, t)
        participants = sample_participants(
            server, cfg, RngStream(cfg.seed, "participants", round=t))

        kappa = None
        t_diag_server = 0.0
        if cfg.spectral.beta_kappa > 0.0:
            tic = time.perf_counter()
            kappa = spectral_flatness(final_layer_matrix(spec, server.global_params),
                                      cfg.spectral)
            t_diag_server = time.perf_counter() - tic

        w_t = server.global_params

        def run_client(k: int):
            client = clients[k]
            if client.dataset.n_train == 0:
                logger.warning("client %d has no training data; skipped", k)
                return k, None, None
            if cfg.algorithm == "SCAFFOLD":
                w_out, stats = _scaffold_client_round(
                    client, w_t, spec, cfg, t, eta_t, server.scaffold_control)
            else:
                w_out, stats = client_round(client, w_t, spec, cfg, t, eta_t, kappa)
            return k, w_out, stats

        workers = _worker_count(len(participants))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_client, participants))
        else:
            results = [run_client(k) for k in participants]
        results = [(k, w, s) for k, w, s in results if w is not None]
        if not results:
            raise RuntimeError(f"round {t}: every sampled client was skipped")

        updates = [(k, clients[k].dataset.n_train, w) for k, w, _ in results]
        stats_by_client = {k: s for k, _, s in results}

        if cfg.algorithm == "FedNova":
            n_total = float(sum(n for _, n, _ in updates))
            tau_eff = sum((n / n_total) * stats_by_client[k]["n_steps"]
                          for k, n, _ in updates)
            normalized = np.zeros_like(w_t)
            for k, n, w_k in sorted(updates, key=lambda u: u[0]):
                normalized += (n / n_total) * (w_k - w_t) / stats_by_client[k]["n_steps"]
            server.global_params = w_t + tau_eff * normalized
        elif cfg.algorithm == "FedAdam":
            delta = aggregate(updates) - w_t
            b1, b2 = cfg.fedadam_beta1, cfg.fedadam_beta2
            server.fedadam_m = b1 * server.fedadam_m + (1.0 - b1) * delta
            server.fedadam_v = b2 * server.fedadam_v + (1.0 - b2) * delta * delta
            server.global_params = w_t + cfg.fedadam_lr * server.fedadam_m / (
                np.sqrt(server.fedadam_v) + cfg.fedadam_eps)
        else:
            server.global_params = aggregate(updates)
            if cfg.algorithm == "SCAFFOLD":
                deltas = [stats_by_client[k]["scaffold_delta_c"]
                          for k, _, _ in sorted(updates, key=lambda u: u[0])]
                server.scaffold_control = server.scaffold_control + \
                    sum(deltas) / len(deltas)

        if not np.all(np.isfinite(server.global_params)):
            raise FloatingPointError(f"non-finite global model after round {t}")

        do_eval = (t % metric_cfg.eval_every == 0) or (t == cfg.rounds - 1)
        m_rmse = m_mae = m_mape = None
        if do_eval:
            m_rmse, m_mae, m_mape = evaluate_global(
                spec, server.global_params, datasets)

        record = RoundRecord(
            round=t,
            participant_ids=[int(k) for k in participants],
            n_available=int(server.availability.sum()),
            n_samples={int(k): clients[k].dataset.n_train for k in participants},
            drift_l2={k: s["drift_l2"] for k, s in stats_by_client.items()},
            roughness={k: s["roughness"] for k, s in stats_by_client.items()},
            kappa=kappa,
            rmse=m_rmse, mae=m_mae, mape=m_mape,
            t_train_s=sum(s["t_train_s"] for s in stats_by_client.values()),
            t_diag_s=t_diag_server + sum(s["t_diag_s"]
                                         for s in stats_by_client.values()),
        )
        if cfg.log_client_vectors:
            record.client_params = {k: w.copy() for k, w, _ in results}
            record.client_params[-1] = w_t.copy()   # broadcast model
        records.append(record)

        advance_churn(server, cfg.churn, RngStream(cfg.seed, "churn", round=t))

    return server.global_params, records
