"""
Gumbel-Softmax sampling on the probability simplex.
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import gammaln, logsumexp, softmax

from errors import DimensionError, DomainError

logger = logging.getLogger(__name__)

PI_FLOOR = 1e-12
SIMPLEX_TOL = 1e-12


class DensityMode(str, Enum):
    """Which log q(z) the bound uses; "surrogate" is accepted for paper"""
    PAPER = "paper"
    EXACT = "exact"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.lower() == "surrogate":
            return cls.PAPER
        return None


class TemperatureSchedule(BaseModel):
    """Softmax temperature with multiplicative annealing and a floor"""
    tau0: float = Field(1.0, gt=0.0)
    tau_min: float = Field(0.3, gt=0.0)
    beta: float = Field(1e-4, ge=0.0)
    tau: Optional[float] = None

    @model_validator(mode="after")
    def check_bounds(self):
        if self.tau_min > self.tau0:
            raise ValueError(f"tau_min {self.tau_min} exceeds tau0 {self.tau0}")
        if self.tau is None:
            self.tau = self.tau0
        elif not self.tau_min <= self.tau <= self.tau0:
            raise ValueError(f"tau {self.tau} outside [{self.tau_min}, {self.tau0}]")
        return self


def anneal(sched: TemperatureSchedule, t: int) -> float:
    """τ ← max(τ·exp(-β·t), τ_min); updates sched in place and returns τ"""
    if t < 1:
        raise DomainError(f"annealing step index must be >= 1, got {t}")
    sched.tau = max(sched.tau * float(np.exp(-sched.beta * t)), sched.tau_min)
    return sched.tau


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Inverse CDF: -log(-log u), with u kept inside (0, 1)"""
    eps = np.finfo(np.float64).eps
    u = np.clip(np.asarray(u, dtype=np.float64), eps, 1.0 - eps)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, v: int, count: Optional[int] = None) -> np.ndarray:
    """One noise vector of width v, or a (count, v) bank"""
    if v < 1:
        raise DomainError(f"Gumbel noise width must be >= 1, got {v}")
    shape = (v,) if count is None else (count, v)
    return gumbel_from_uniform(rng.random(shape))


def as_simplex(pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or pi.size == 0:
        raise DimensionError(f"a simplex vector must be 1-d and non-empty, got shape {pi.shape}")
    if np.any(pi < 0.0) or abs(pi.sum() - 1.0) > 1e-9:
        raise DomainError(f"not on the probability simplex: {pi}")
    return pi


def reparameterize(pi: np.ndarray, sigma: np.ndarray, tau: float) -> np.ndarray:
    """
    z = softmax((log π + σ) / τ).

    sigma may be a single noise vector or a (s, v) bank; z has the same shape.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    pi = np.asarray(pi, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape[-1] != pi.shape[-1]:
        raise DimensionError(f"noise width {sigma.shape[-1]} != simplex width {pi.shape[-1]}")
    logits = (np.log(np.maximum(pi, PI_FLOOR)) + sigma) / tau
    return softmax(logits, axis=-1)


def log_density(pi: np.ndarray, z: np.ndarray, mode: DensityMode = DensityMode.PAPER,
                tau: Optional[float] = None) -> np.ndarray:
    """
    log q_π(z) for one sample or a (s, v) batch.

    paper (alias surrogate): ⟨π, z⟩ - max π - log Σ exp(π - max π), treating π as logits.
    exact: the Gumbel-Softmax density, which needs τ.
    """
    pi = np.asarray(pi, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != pi.shape[-1]:
        raise DimensionError(f"sample width {z.shape[-1]} != simplex width {pi.shape[-1]}")
    mode = DensityMode(mode)
    if mode is DensityMode.PAPER:
        top = pi.max()
        return z @ pi - top - np.log(np.exp(pi - top).sum())

    if tau is None or tau <= 0:
        raise DomainError("the exact density needs a positive temperature")
    v = pi.shape[-1]
    log_pi = np.log(np.maximum(pi, PI_FLOOR))
    log_z = np.log(np.maximum(z, np.finfo(np.float64).tiny))
    return (gammaln(v) + (v - 1) * np.log(tau)
            + np.sum(log_pi - (tau + 1.0) * log_z, axis=-1)
            - v * logsumexp(log_pi - tau * log_z, axis=-1))


def on_simplex(z: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    z = np.asarray(z, dtype=np.float64)
    return bool(np.all(z >= 0.0) and np.all(np.abs(z.sum(axis=-1) - 1.0) <= tol))
