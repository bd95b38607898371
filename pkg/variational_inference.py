"""
Per-node constrained variational inference and posterior readout.

For each labelled node the bound L_s(π) is maximized over the simplex by
mirror descent; the optimum turns ψ into surrogate logits φ = ψ - L_s*,
which LogSumExp normalizes into a log posterior.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from errors import DomainError
from gumbel_sampler import DensityMode, sample_gumbel
from importance_bound import NoiseMode, bound_objective
from marginal_scores import MarginalScoreTable
from mirror_descent import EmdConfig, maximize

logger = logging.getLogger(__name__)


class ReadoutMode(str, Enum):
    POSTERIOR = "posterior"
    VARIATIONAL = "variational"


class PiInit(str, Enum):
    UNIFORM = "uniform"
    RANDOM = "random"


class InferenceConfig(BaseModel):
    samples_infer: int = Field(50, ge=1)
    tau: float = Field(1.0, gt=0.0)
    emd: EmdConfig = Field(default_factory=EmdConfig)
    readout: ReadoutMode = ReadoutMode.POSTERIOR
    pi_init: PiInit = PiInit.UNIFORM
    density: DensityMode = DensityMode.PAPER
    noise: NoiseMode = NoiseMode.FROZEN
    seed: int = 0


class NodePosterior(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    surrogate_logit: np.ndarray
    log_posterior: np.ndarray
    pi_star: np.ndarray
    bound: float
    iterations: int = 0


def initial_pi(v: int, mode: PiInit, rng: np.random.Generator) -> np.ndarray:
    if PiInit(mode) is PiInit.RANDOM:
        return rng.dirichlet(np.ones(v))
    return np.full(v, 1.0 / v)


def _infer(psi: np.ndarray, cfg: InferenceConfig, rng: np.random.Generator) -> Tuple[np.ndarray, float, int]:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 1 or psi.size == 0 or not np.all(np.isfinite(psi)):
        raise DomainError(f"marginal scores must be a finite non-empty vector, got {psi}")
    v = psi.shape[0]
    pi0 = initial_pi(v, cfg.pi_init, rng)
    noises = sample_gumbel(rng, v, cfg.samples_infer)
    objective = bound_objective(psi, noises, cfg.tau, cfg.density, cfg.noise, rng)
    return maximize(objective, pi0, cfg.emd)


def infer_node(psi: np.ndarray, cfg: InferenceConfig, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Maximize L_s over π for one node; returns (π*, L_s*)"""
    pi_star, bound, _ = _infer(psi, cfg, rng)
    return pi_star, bound


def surrogate_logit(psi: np.ndarray, bound: float) -> np.ndarray:
    return np.asarray(psi, dtype=np.float64) - bound


def log_posterior(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    return phi - logsumexp(phi)


def readout(node: NodePosterior, mode: ReadoutMode = ReadoutMode.POSTERIOR) -> int:
    """Argmax label; np.argmax keeps the lowest index on ties"""
    if ReadoutMode(mode) is ReadoutMode.VARIATIONAL:
        return int(np.argmax(node.pi_star))
    return int(np.argmax(node.log_posterior))


def node_posterior(psi: np.ndarray, cfg: InferenceConfig, rng: np.random.Generator) -> NodePosterior:
    pi_star, bound, iterations = _infer(psi, cfg, rng)
    phi = surrogate_logit(psi, bound)
    return NodePosterior(surrogate_logit=phi, log_posterior=log_posterior(phi),
                         pi_star=pi_star, bound=bound, iterations=iterations)


def node_rng(seed: int, key: Sequence[int], node_index: int) -> np.random.Generator:
    """Independent stream per (seed, key, node) so results ignore scheduling"""
    return np.random.default_rng(np.random.SeedSequence([seed, *key, node_index]))


def infer_instance(table: MarginalScoreTable, cfg: InferenceConfig, seed_key: Sequence[int] = (),
                   workers: int = 1) -> List[NodePosterior]:
    """NodePosteriors for every labelled node, canonical order"""
    psis = table.ordered()

    def run(item: Tuple[int, np.ndarray]) -> NodePosterior:
        idx, psi = item
        return node_posterior(psi, cfg, node_rng(cfg.seed, seed_key, idx))

    if workers > 1 and len(psis) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, enumerate(psis)))
    return [run(item) for item in enumerate(psis)]
