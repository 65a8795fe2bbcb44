"""Additive-noise differential privacy for a single numeric column."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..dataset import Dataset, Kind
from ..errors import NonNumericColumn


@dataclass(frozen=True)
class DPConfig:
    epsilon: float = 1.0
    sensitivity: float = 1.0
    mechanism: str = "laplace"
    delta: float | None = None  # gaussian only
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be > 0")
        if self.mechanism not in ("laplace", "gaussian"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "gaussian" and not (self.delta is not None and 0 < self.delta < 1):
            raise ValueError("the gaussian mechanism needs 0 < delta < 1")

    @property
    def scale(self) -> float:
        """Laplace scale b, or Gaussian standard deviation."""
        if self.mechanism == "laplace":
            return self.sensitivity / self.epsilon
        return self.sensitivity * math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.epsilon


def laplace_sample(scale: float, rng: np.random.Generator, size=None):
    """Laplace(0, scale) draws by inverse CDF.

    ``u`` is uniform on [-1/2, 1/2); the single endpoint u = -1/2 (where the
    log diverges) is redrawn.
    """
    if not scale > 0:
        raise ValueError("scale must be > 0")
    u = rng.random(size) - 0.5
    bad = u == -0.5
    while np.any(bad):
        if np.ndim(u) == 0:
            u = rng.random() - 0.5
        else:
            u[bad] = rng.random(int(np.count_nonzero(bad))) - 0.5
        bad = u == -0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def noise(cfg: DPConfig, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if cfg.mechanism == "laplace":
        return laplace_sample(cfg.scale, rng, size)
    return rng.normal(0.0, cfg.scale, size)


def dp_perturb_column(ds: Dataset, column: str, cfg: DPConfig) -> Dataset:
    """Add independent noise to every value of ``column``.

    Results are not clamped, so perturbed charges can go negative.
    """
    if ds.kind(column) not in (Kind.NUMERIC, Kind.TARGET):
        raise NonNumericColumn(f"column {column!r} is not numeric")
    x = ds.column(column).astype(float)
    return ds.with_column(column, x + noise(cfg, len(x)))


def observed_range(ds: Dataset, column: str) -> float:
    x = ds.column(column).astype(float)
    return float(x.max() - x.min())
