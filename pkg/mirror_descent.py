"""
Entropic mirror descent: maximization over the probability simplex with
multiplicative (exponentiated-gradient) updates.
"""

import logging
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field

from errors import OptimizerError
from gumbel_sampler import PI_FLOOR, as_simplex
from importance_bound import Objective

logger = logging.getLogger(__name__)


class EmdConfig(BaseModel):
    max_iters: int = Field(300, ge=1)
    gamma0: float = Field(1.0, gt=0.0)
    epsilon: float = Field(1e-5, gt=0.0)


def _evaluate(objective: Objective, pi: np.ndarray, iteration: int) -> Tuple[float, np.ndarray]:
    value, grad = objective(pi)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        logger.error(f"EMD objective not finite at iteration {iteration} (value={value})")
        raise OptimizerError(f"objective returned a non-finite value at iteration {iteration}", last_pi=pi.copy())
    return float(value), grad


def exponentiated_step(pi: np.ndarray, grad: np.ndarray, gamma: float) -> np.ndarray:
    """r = π·exp(γ∇ - max γ∇), normalized, then floored and renormalized"""
    step = gamma * grad
    r = pi * np.exp(step - step.max())
    pi = r / r.sum()
    if np.any(pi < PI_FLOOR):
        logger.debug(f"pi floor hit on {int(np.sum(pi < PI_FLOOR))} components")
        pi = np.maximum(pi, PI_FLOOR)
        pi = pi / pi.sum()
    return pi


def maximize(objective: Objective, pi0: np.ndarray, cfg: EmdConfig) -> Tuple[np.ndarray, float, int]:
    """
    Maximize objective(π) from pi0 with step γ_i = γ0/√i.

    Stops once two consecutive objective values differ by less than ε, or
    after max_iters updates. Returns (π*, objective(π*), iterations used).
    """
    pi = as_simplex(pi0).copy()
    previous = np.inf
    for i in range(1, cfg.max_iters + 1):
        value, grad = _evaluate(objective, pi, i)
        if abs(value - previous) < cfg.epsilon:
            return pi, value, i
        previous = value
        pi = exponentiated_step(pi, grad, cfg.gamma0 / np.sqrt(i))

    value, _ = _evaluate(objective, pi, cfg.max_iters + 1)
    logger.debug(f"EMD reached {cfg.max_iters} iterations without meeting epsilon={cfg.epsilon}")
    return pi, value, cfg.max_iters
