"""
Monte Carlo estimates of the s-sample importance-weighted lower bound

    L_s = log (1/s) Σ_j exp(⟨ψ, z_j⟩ - log q_π(z_j))

and its pathwise gradient with respect to π with the noise held fixed.
"""

import logging
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp, softmax

from errors import DimensionError, DomainError
from gumbel_sampler import PI_FLOOR, DensityMode, log_density, reparameterize, sample_gumbel

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class NoiseMode(str, Enum):
    """Whether the optimizer sees one noise bank or a new one per evaluation"""
    FROZEN = "frozen"
    FRESH = "fresh"


class BoundEstimate(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    value: float
    sample_count: int
    log_weights: np.ndarray


def _bound_from_log_weights(log_weights: np.ndarray) -> BoundEstimate:
    s = log_weights.shape[0]
    value = float(logsumexp(log_weights) - np.log(s))
    return BoundEstimate(value=value, sample_count=s, log_weights=log_weights)


def _check_inputs(psi: np.ndarray, pi: np.ndarray, noises: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    psi = np.asarray(psi, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    noises = np.atleast_2d(np.asarray(noises, dtype=np.float64))
    if psi.shape != pi.shape:
        raise DimensionError(f"score width {psi.shape} != simplex width {pi.shape}")
    if noises.shape[0] == 0 or noises.size == 0:
        raise DomainError("the bound needs at least one sample")
    if noises.shape[1] != pi.shape[0]:
        raise DimensionError(f"noise width {noises.shape[1]} != simplex width {pi.shape[0]}")
    return psi, pi, noises


def log_importance_weight(psi: np.ndarray, pi: np.ndarray, z: np.ndarray,
                          density: DensityMode = DensityMode.PAPER, tau: Optional[float] = None) -> np.ndarray:
    """log w = ⟨ψ, z⟩ - log q_π(z); z may be one sample or a batch"""
    psi = np.asarray(psi, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != psi.shape[0]:
        raise DimensionError(f"sample width {z.shape[-1]} != score width {psi.shape[0]}")
    return z @ psi - log_density(pi, z, density, tau)


def estimate(psi: np.ndarray, pi: np.ndarray, noises: np.ndarray, tau: float,
             density: DensityMode = DensityMode.PAPER) -> BoundEstimate:
    """L_s over the relaxed samples reparameterize(π, σ_j, τ)"""
    psi, pi, noises = _check_inputs(psi, pi, noises)
    z = reparameterize(pi, noises, tau)
    return _bound_from_log_weights(log_importance_weight(psi, pi, z, density, tau))


def estimate_categorical_exact(psi: np.ndarray, pi: np.ndarray, rng: np.random.Generator, s: int) -> BoundEstimate:
    """L_s with exact one-hot samples k ~ π, so log w = ψ_k - log π_k"""
    psi = np.asarray(psi, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if psi.shape != pi.shape:
        raise DimensionError(f"score width {psi.shape} != simplex width {pi.shape}")
    if s < 1:
        raise DomainError("the bound needs at least one sample")
    if np.any(pi <= 0.0):
        raise DomainError("categorical-exact sampling needs a strictly positive π")
    ks = rng.choice(pi.shape[0], size=s, p=pi / pi.sum())
    return _bound_from_log_weights(psi[ks] - np.log(pi[ks]))


def _density_partials(pi: np.ndarray, z: np.ndarray, density: DensityMode, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """(∂ log q / ∂π at fixed z, ∂ log q / ∂z), one row per sample"""
    if density is DensityMode.PAPER:
        d_pi = z - softmax(pi)
        d_z = np.broadcast_to(pi, z.shape)
        return d_pi, d_z

    v = pi.shape[0]
    tiny = np.finfo(np.float64).tiny
    live_pi = pi > PI_FLOOR
    live_z = z > tiny
    log_pi = np.log(np.maximum(pi, PI_FLOOR))
    log_z = np.log(np.maximum(z, tiny))
    r = softmax(log_pi - tau * log_z, axis=-1)
    d_pi = np.where(live_pi, (1.0 - v * r) / np.maximum(pi, PI_FLOOR), 0.0)
    d_z = np.where(live_z, (-(tau + 1.0) + v * tau * r) / np.maximum(z, tiny), 0.0)
    return d_pi, d_z


def grad_pi(psi: np.ndarray, pi: np.ndarray, noises: np.ndarray, tau: float,
            density: DensityMode = DensityMode.PAPER) -> np.ndarray:
    """
    ∂ estimate / ∂π in ambient coordinates, noise fixed.

    Per sample, log w_j depends on π directly through log q and through
    z_j = softmax((log π + σ_j)/τ); the total is the softmax(log w)-weighted
    sum of the per-sample gradients.
    """
    psi, pi, noises = _check_inputs(psi, pi, noises)
    density = DensityMode(density)
    z = reparameterize(pi, noises, tau)
    log_w = log_importance_weight(psi, pi, z, density, tau)
    d_pi, d_z = _density_partials(pi, z, density, tau)

    g_z = psi - d_z
    through_z = z * (g_z - np.sum(g_z * z, axis=-1, keepdims=True))
    dlogit_dpi = np.where(pi > PI_FLOOR, 1.0 / (tau * np.maximum(pi, PI_FLOOR)), 0.0)
    per_sample = through_z * dlogit_dpi - d_pi
    return softmax(log_w) @ per_sample


def bound_objective(psi: np.ndarray, noises: np.ndarray, tau: float,
                    density: DensityMode = DensityMode.PAPER, noise: NoiseMode = NoiseMode.FROZEN,
                    rng: Optional[np.random.Generator] = None) -> Objective:
    """
    π -> (L_s, ∂L_s/∂π) for the mirror-descent maximizer.

    Frozen mode reuses `noises` for every evaluation; fresh mode draws a new
    bank of the same size from rng each call.
    """
    noises = np.atleast_2d(np.asarray(noises, dtype=np.float64))
    noise = NoiseMode(noise)
    if noise is NoiseMode.FRESH and rng is None:
        raise DomainError("fresh noise needs a random generator")

    def evaluate(pi: np.ndarray) -> Tuple[float, np.ndarray]:
        bank = noises if noise is NoiseMode.FROZEN else sample_gumbel(rng, noises.shape[1], noises.shape[0])
        value = estimate(psi, pi, bank, tau, density).value
        return value, grad_pi(psi, pi, bank, tau, density)

    return evaluate
