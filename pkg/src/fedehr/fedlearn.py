"""In-process federated averaging.

A round broadcasts the global parameters, lets every selected client run
:func:`fedehr.models.local_step` on its own shard, averages the returned
displacements and adds the average to the global parameters. Training stops
when the largest absolute coordinate of the averaged update drops below
``convergence_tol`` or after ``rounds_max`` rounds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import IO, Mapping, Sequence

import numpy as np

from .dataset import ClientShard
from .errors import ArityMismatch, EmptyShard, EmptyUpdates, NonFinite
from .models import LossKind, ModelParams, TrainConfig, local_step, loss_value, mlp_init, predict

METRICS_HEADER = ("round", "loss_mae", "metric_mse", "delta_inf_norm")


class Aggregation(str, Enum):
    UNIFORM = "uniform"
    SAMPLE_WEIGHTED = "sample_weighted"


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 3
    rounds_max: int = 100
    convergence_tol: float = 1e-4
    aggregation: Aggregation = Aggregation.UNIFORM
    selection_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    hidden: tuple[int, int] = (10, 10)

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds_max < 1:
            raise ValueError("rounds_max must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError("selection_fraction must lie in (0, 1]")

    @property
    def clients_per_round(self) -> int:
        return max(1, _round_half_up(self.selection_fraction * self.num_clients))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregation"] = self.aggregation.value
        d["hidden"] = list(self.hidden)
        d["train"]["loss"] = self.train.loss.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> FederationConfig:
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown federation config field(s): {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> FederationConfig:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss_mae: float
    metric_mse: float
    delta_inf_norm: float
    participating: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: str
    delta: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass(frozen=True, eq=False)
class ServerState:
    """Global model plus the per-round history.

    ``baseline`` holds the metrics of the initial parameters (round 0),
    which are not part of ``history``.
    """

    global_params: ModelParams
    round_index: int = 0
    history: tuple[RoundMetrics, ...] = ()
    baseline: RoundMetrics | None = None

    def mae_curve(self) -> list[float]:
        head = [self.baseline.loss_mae] if self.baseline else []
        return head + [h.loss_mae for h in self.history]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def initialize(cfg: FederationConfig, d_in: int) -> ServerState:
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    h1, h2 = cfg.hidden
    return ServerState(mlp_init(d_in, h1, h2, cfg.seed))


def broadcast(state: ServerState, n: int) -> list[ModelParams]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [state.global_params.copy() for _ in range(n)]


def select_clients(cfg: FederationConfig, round_: int) -> list[int]:
    """Indices of the clients taking part in ``round_``, seeded by (seed, round)."""
    k = cfg.clients_per_round
    if k >= cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = np.random.default_rng([cfg.seed, round_])
    return sorted(rng.choice(cfg.num_clients, size=k, replace=False).tolist())


def aggregate(updates: Sequence[ClientUpdate], mode: Aggregation | str = Aggregation.UNIFORM) -> np.ndarray:
    """Combine client deltas into one global update.

    Per-coordinate terms are sorted before summation, which makes the result
    independent of the order in which updates arrive.
    """
    if not updates:
        raise EmptyUpdates("no client updates to aggregate")
    arity = {u.delta.shape for u in updates}
    if len(arity) != 1:
        raise ArityMismatch(f"client deltas have differing shapes {sorted(arity)}")
    stacked = np.stack([np.asarray(u.delta, dtype=float) for u in updates])
    if Aggregation(mode) is Aggregation.UNIFORM:
        return np.sort(stacked, axis=0).sum(axis=0) / len(updates)
    counts = np.array([u.sample_count for u in updates], dtype=float)
    terms = stacked * (counts / counts.sum())[:, None]
    return np.sort(terms, axis=0).sum(axis=0)


def apply_update(state: ServerState, delta) -> ServerState:
    w = state.global_params.flat()
    delta = np.asarray(delta, dtype=float)
    if delta.shape != w.shape:
        raise ArityMismatch(f"update arity {delta.size} vs parameter arity {w.size}")
    updated = w + delta
    if not np.all(np.isfinite(updated)):
        raise NonFinite(f"non-finite parameters after round {state.round_index + 1}")
    return replace(
        state,
        global_params=state.global_params.with_flat(updated),
        round_index=state.round_index + 1,
    )


def _evaluate(params: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    pred = predict(params, X)
    return loss_value(pred, y, LossKind.MAE), loss_value(pred, y, LossKind.MSE)


def run_rounds(
    cfg: FederationConfig,
    shards: Sequence[ClientShard],
    state: ServerState | None = None,
) -> ServerState:
    if len(shards) != cfg.num_clients:
        raise ValueError(f"{len(shards)} shards for num_clients={cfg.num_clients}")
    for s in shards:
        if s.sample_count == 0:
            raise EmptyShard(s.client_id)
    X_all = np.concatenate([s.features for s in shards])
    y_all = np.concatenate([s.target for s in shards])

    if state is None:
        state = initialize(cfg, X_all.shape[1])
    if state.baseline is None:
        mae, mse = _evaluate(state.global_params, X_all, y_all)
        state = replace(state, baseline=RoundMetrics(0, mae, mse, 0.0))

    while state.round_index < cfg.rounds_max:
        round_ = state.round_index + 1
        chosen = select_clients(cfg, round_)
        local = broadcast(state, len(chosen))
        updates = [
            ClientUpdate(
                shards[i].client_id,
                local_step(params, shards[i].features, shards[i].target, cfg.train),
                shards[i].sample_count,
            )
            for i, params in zip(chosen, local)
        ]
        delta = aggregate(updates, cfg.aggregation)
        state = apply_update(state, delta)
        mae, mse = _evaluate(state.global_params, X_all, y_all)
        norm = float(np.max(np.abs(delta)))
        metrics = RoundMetrics(round_, mae, mse, norm, tuple(shards[i].client_id for i in chosen))
        state = replace(state, history=state.history + (metrics,))
        if norm < cfg.convergence_tol:
            break
    return state


def write_metrics_csv(history: Sequence[RoundMetrics], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for h in history:
        writer.writerow([h.round, f"{h.loss_mae:.9g}", f"{h.metric_mse:.9g}", f"{h.delta_inf_norm:.9g}"])
