"""
Brute-force enumeration over every joint labelling of a small scene graph:
exact log partition, per-node marginals and MAP labelling.

Labellings are visited in row-major order over node indices (objects, then
predicates), so the first maximizer found is the lowest in lexicographic order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp

from marginal_scores import PotentialTables, check_enumeration_guard, label_sizes
from scene_graph import SceneGraph

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1 << 16

ChunkResult = Tuple[float, List[np.ndarray], float, int]


class ExactSummary(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    log_partition: float
    marginals: List[np.ndarray]
    marginal_scores: List[np.ndarray]


def exact_log_partition_node(psi: np.ndarray) -> float:
    """log Σ_k exp(ψ_k), the per-node partition of a factorized score"""
    return float(logsumexp(np.asarray(psi, dtype=np.float64)))


def batch_joint_scores(tables: PotentialTables, g: SceneGraph, labels: np.ndarray) -> np.ndarray:
    """joint_log_score for each row of a (C, m + n) label matrix"""
    t = tables.tables
    obj, pred = labels[:, :g.m], labels[:, g.m:]
    total = np.zeros(labels.shape[0])
    for i in range(g.m):
        total += t[f"u_o:{i}"][obj[:, i]] + t[f"og:{i}"][obj[:, i], 0]
    for j, (s, o) in enumerate(g.predicate_endpoints):
        total += t[f"u_p:{j}"][pred[:, j]] + t[f"pg:{j}"][pred[:, j], 0]
        for i in (s, o):
            total += t[f"op:{j}:{i}"][obj[:, i], pred[:, j]]
    for a, b in g.object_pairs:
        total += t[f"oo:{a}:{b}"][obj[:, a], obj[:, b]]
    return -total


def _enumerate_chunk(tables: PotentialTables, g: SceneGraph, sizes: Tuple[int, ...],
                     start: int, stop: int) -> ChunkResult:
    flat = np.arange(start, stop)
    labels = np.stack(np.unravel_index(flat, sizes), axis=1)
    scores = batch_joint_scores(tables, g, labels)
    grouped = []
    for axis, v in enumerate(sizes):
        column = labels[:, axis]
        grouped.append(np.array([logsumexp(scores[column == k]) if np.any(column == k) else -np.inf
                                 for k in range(v)]))
    best = int(np.argmax(scores))
    return float(logsumexp(scores)), grouped, float(scores[best]), start + best


def _enumerate(tables: PotentialTables, g: SceneGraph, workers: int = 1) -> ChunkResult:
    tables.check_against(g)
    total = check_enumeration_guard(g, tables.v_o, tables.v_p)
    sizes = label_sizes(g, tables.v_o, tables.v_p)
    bounds = [(start, min(start + CHUNK_SIZE, total)) for start in range(0, total, CHUNK_SIZE)]

    def run(span: Tuple[int, int]) -> ChunkResult:
        return _enumerate_chunk(tables, g, sizes, *span)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, bounds))
    else:
        chunks = [run(span) for span in bounds]

    log_z, grouped, best_score, best_index = chunks[0]
    for chunk_z, chunk_grouped, chunk_best, chunk_index in chunks[1:]:
        log_z = float(np.logaddexp(log_z, chunk_z))
        grouped = [np.logaddexp(a, b) for a, b in zip(grouped, chunk_grouped)]
        if chunk_best > best_score:
            best_score, best_index = chunk_best, chunk_index
    logger.debug(f"Enumerated {total} labellings in {len(bounds)} chunks")
    return log_z, grouped, best_score, best_index


def exact_joint(tables: PotentialTables, g: SceneGraph, workers: int = 1) -> ExactSummary:
    log_z, grouped, _, _ = _enumerate(tables, g, workers)
    marginals = [np.exp(scores - log_z) for scores in grouped]
    return ExactSummary(log_partition=log_z, marginals=marginals, marginal_scores=grouped)


def exact_map(tables: PotentialTables, g: SceneGraph, workers: int = 1) -> List[int]:
    """Highest-scoring labelling, lowest lexicographic on ties"""
    _, _, _, best_index = _enumerate(tables, g, workers)
    sizes = label_sizes(g, tables.v_o, tables.v_p)
    return [int(k) for k in np.unravel_index(best_index, sizes)]
