"""
Variational structure learning: cross-entropy on the per-node log
posteriors, backpropagation into the seven feature networks, the training
loop with temperature annealing, and desk-scale evaluation metrics.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import log_softmax, softmax

from errors import DimensionError, DomainError, NumericalError, OptimizerError
from gumbel_sampler import TemperatureSchedule, anneal
from marginal_scores import MarginalScoreTable, compute_marginal_scores, score_backward
from mlp_networks import ThetaGrads, ThetaParams, init_theta, merge_grads, scale_grads, sgd_step, zero_grads
from scene_graph import SyntheticInstance, label_counts
from variational_inference import InferenceConfig, NodePosterior, ReadoutMode, infer_instance, readout

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class LearnConfig(BaseModel):
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(0.01, ge=0.0)
    iterations: int = Field(2000, ge=1)
    samples_learn: int = Field(5000, ge=1)
    schedule: TemperatureSchedule = Field(default_factory=TemperatureSchedule)
    hidden: List[int] = Field(default_factory=lambda: [64])
    seed: int = 0
    workers: int = Field(1, ge=1)


class TrainRecord(BaseModel):
    iteration: int
    loss: float
    tau: float
    mean_bound: float


class Metrics(BaseModel):
    object_mean_recall: float
    predicate_mean_recall: Optional[float]
    combined_mean_recall: float
    overall_accuracy: float
    object_recall: List[Optional[float]]
    predicate_recall: List[Optional[float]]
    top_k: int
    object_topk_mean_recall: float
    predicate_topk_mean_recall: Optional[float]
    predicate_group_recall: Dict[str, Optional[float]]
    combined_recall_at: Dict[int, float] = {}
    loss_trace: List[float] = []


class EvaluationReport(BaseModel):
    posterior: Metrics
    variational: Metrics
    mean_bound: float


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """map that keeps input order whether or not it runs on a thread pool"""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def instance_labels(inst: SyntheticInstance) -> List[int]:
    """Ground-truth labels in canonical node order"""
    return [int(k) for k in inst.object_labels] + [int(k) for k in inst.predicate_labels]


# --- LOSS AND GRADIENT ---

def cross_entropy(log_posteriors: Sequence[Sequence[np.ndarray]], labels: Sequence[Sequence[int]]) -> float:
    """-(1/c) Σ_instances Σ_nodes log p(label); c is the batch size"""
    if len(log_posteriors) != len(labels) or not labels:
        raise DomainError(f"{len(log_posteriors)} posterior sets for {len(labels)} label sets")
    total = 0.0
    for k, (node_posts, node_labels) in enumerate(zip(log_posteriors, labels)):
        if len(node_posts) != len(node_labels):
            raise DomainError(f"instance {k}: {len(node_posts)} nodes but {len(node_labels)} labels")
        for lp, label in zip(node_posts, node_labels):
            if label is None or not 0 <= int(label) < len(lp):
                raise DomainError(f"instance {k}: label {label} missing or outside vocabulary")
            total -= float(lp[int(label)])
    return total / len(labels)


def grad_theta(inst: SyntheticInstance, theta: ThetaParams,
               table: Optional[MarginalScoreTable] = None) -> Tuple[ThetaGrads, float]:
    """
    θ-gradient and loss of one instance.

    φ = ψ - L_s* loses its shift under LogSumExp, so the log posterior is
    log_softmax(ψ) and ∂loss/∂ψ_i = softmax(ψ_i) - onehot(label_i) whatever
    the optimized bound was.
    """
    table = table if table is not None else compute_marginal_scores(theta, inst)
    d_psi, loss = [], 0.0
    for psi, label in zip(table.ordered(), instance_labels(inst)):
        delta = softmax(psi)
        delta[label] -= 1.0
        d_psi.append(delta)
        loss -= float(log_softmax(psi)[label])
    return score_backward(theta, inst, d_psi), loss


def instance_loss(theta: ThetaParams, inst: SyntheticInstance) -> float:
    """Cross-entropy of one instance under log_softmax(ψ)"""
    table = compute_marginal_scores(theta, inst)
    return -sum(float(log_softmax(psi)[label]) for psi, label in zip(table.ordered(), instance_labels(inst)))


# --- TRAINING ---

def _all_finite(theta: ThetaParams) -> bool:
    return all(np.all(np.isfinite(p)) for p in theta.parameters())


def _instance_step(theta: ThetaParams, inst: SyntheticInstance, inf_cfg: InferenceConfig,
                   seed_key: Tuple[int, ...]) -> Tuple[ThetaGrads, List[np.ndarray], List[float]]:
    table = compute_marginal_scores(theta, inst)
    if not all(np.all(np.isfinite(psi)) for psi in table.ordered()):
        raise NumericalError(f"marginal scores became non-finite on batch item {seed_key}")
    posteriors = infer_instance(table, inf_cfg, seed_key)
    grads, _ = grad_theta(inst, theta, table)
    return grads, [p.log_posterior for p in posteriors], [p.bound for p in posteriors]


def train(dataset: Sequence[SyntheticInstance], cfg: LearnConfig, inf_cfg: InferenceConfig,
          v_o: int, v_p: int, theta: Optional[ThetaParams] = None) -> Tuple[ThetaParams, float, List[TrainRecord]]:
    """
    Run cfg.iterations rounds of: scores, per-node inference with
    samples_learn samples, cross-entropy, SGD, temperature annealing.

    Returns the final θ, the final τ and one TrainRecord per iteration.
    Divergence raises NumericalError carrying the θ from before the step
    that broke it, and the current τ.
    """
    if not dataset:
        raise DomainError("cannot train on an empty dataset")
    d = dataset[0].feature_dim
    theta = theta.copy() if theta is not None else init_theta(d, v_o, v_p, cfg.hidden, cfg.seed)
    theta.check_widths(d, v_o, v_p)
    sched = cfg.schedule.model_copy(update={"tau": cfg.schedule.tau0})
    rng = np.random.default_rng(cfg.seed)
    c = min(cfg.batch_size, len(dataset))
    report_every = max(1, cfg.iterations // 20)

    def diverged(t: int, reason: str) -> NumericalError:
        logger.error(f"Training diverged at iteration {t} ({reason}); keeping the last finite parameters")
        return NumericalError(f"training diverged at iteration {t}: {reason}",
                              last_theta=previous, iteration=t, tau=float(sched.tau))

    previous = theta
    trace: List[TrainRecord] = []
    for t in range(1, cfg.iterations + 1):
        batch = rng.choice(len(dataset), size=c, replace=False)
        step_cfg = inf_cfg.model_copy(update={"samples_infer": cfg.samples_learn, "tau": sched.tau})
        try:
            results = ordered_map(lambda k: _instance_step(theta, dataset[k], step_cfg, (t, int(k))),
                                  [int(k) for k in batch], cfg.workers)
        except (NumericalError, OptimizerError) as e:
            raise diverged(t, str(e)) from e

        grads = zero_grads(theta)
        for inst_grads, _, _ in results:
            merge_grads(grads, inst_grads)
        scale_grads(grads, 1.0 / c)
        loss = cross_entropy([r[1] for r in results], [instance_labels(dataset[int(k)]) for k in batch])
        bounds = [b for r in results for b in r[2]]

        if not np.isfinite(loss):
            raise diverged(t, "non-finite loss")

        trace.append(TrainRecord(iteration=t, loss=loss, tau=sched.tau, mean_bound=float(np.mean(bounds))))
        previous = theta
        theta = sgd_step(theta, grads, cfg.learning_rate)
        if not _all_finite(theta):
            raise diverged(t, "non-finite parameters after the update")
        anneal(sched, t)
        if t % report_every == 0 or t == cfg.iterations:
            logger.info(f"Iteration {t}/{cfg.iterations}: loss={loss:.6f} tau={sched.tau:.4f}")

    return theta, float(sched.tau), trace


# --- EVALUATION ---

def per_class_recall(true: np.ndarray, hit: np.ndarray, v: int) -> List[Optional[float]]:
    """Recall per class; None where the class has no support"""
    recalls: List[Optional[float]] = []
    for k in range(v):
        support = true == k
        recalls.append(float(hit[support].mean()) if support.any() else None)
    return recalls


def _mean_supported(recalls: Sequence[Optional[float]]) -> Optional[float]:
    values = [r for r in recalls if r is not None]
    return float(np.mean(values)) if values else None


def _top_k_hits(true: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.any(ranked == true[:, None], axis=1)


def frequency_groups(counts: np.ndarray) -> Dict[str, List[int]]:
    """Classes ranked by frequency (ties to lower index) cut into head/body/tail"""
    order = np.argsort(-np.asarray(counts), kind="stable")
    head, body, tail = np.array_split(order, 3)
    return {"head": head.tolist(), "body": body.tolist(), "tail": tail.tolist()}


def compute_metrics(object_true: np.ndarray, object_scores: np.ndarray,
                    predicate_true: np.ndarray, predicate_scores: np.ndarray,
                    v_o: int, v_p: int, top_k: int = 2,
                    predicate_counts: Optional[np.ndarray] = None,
                    loss_trace: Sequence[float] = (), recall_ks: Sequence[int] = ()) -> Metrics:
    """
    Recall metrics from per-node score rows (log posteriors or π*).

    The predicted label is the row argmax; top-K ranks rows with ties going
    to the lower class index.
    """
    object_true = np.asarray(object_true, dtype=np.int64)
    predicate_true = np.asarray(predicate_true, dtype=np.int64)
    object_scores = np.asarray(object_scores, dtype=np.float64).reshape(-1, v_o)
    predicate_scores = np.asarray(predicate_scores, dtype=np.float64).reshape(-1, v_p)
    if object_scores.shape[0] != object_true.shape[0] or predicate_scores.shape[0] != predicate_true.shape[0]:
        raise DimensionError("score rows and labels disagree")
    if object_true.size == 0:
        raise DomainError("metrics need at least one labelled object")

    object_hit = np.argmax(object_scores, axis=1) == object_true
    predicate_hit = (np.argmax(predicate_scores, axis=1) == predicate_true
                     if predicate_true.size else np.zeros(0, dtype=bool))
    object_recall = per_class_recall(object_true, object_hit, v_o)
    predicate_recall = per_class_recall(predicate_true, predicate_hit, v_p)

    object_topk = per_class_recall(object_true, _top_k_hits(object_true, object_scores, top_k), v_o)
    predicate_topk = per_class_recall(predicate_true, _top_k_hits(predicate_true, predicate_scores, top_k), v_p)

    if predicate_counts is None:
        predicate_counts = np.bincount(predicate_true, minlength=v_p)
    groups = frequency_groups(predicate_counts)
    group_recall = {name: _mean_supported([predicate_recall[k] for k in members])
                    for name, members in groups.items()}

    # mean per-class recall over objects and predicates at every requested K
    recall_at = {}
    for k in sorted(set(recall_ks)):
        if k < 1:
            raise DomainError(f"recall cutoffs must be >= 1, got {k}")
        recall_at[k] = _mean_supported(
            per_class_recall(object_true, _top_k_hits(object_true, object_scores, k), v_o)
            + per_class_recall(predicate_true, _top_k_hits(predicate_true, predicate_scores, k), v_p))

    correct = int(object_hit.sum() + predicate_hit.sum())
    total = object_true.size + predicate_true.size
    return Metrics(
        object_mean_recall=_mean_supported(object_recall),
        predicate_mean_recall=_mean_supported(predicate_recall),
        combined_mean_recall=_mean_supported(object_recall + predicate_recall),
        overall_accuracy=correct / total,
        object_recall=object_recall,
        predicate_recall=predicate_recall,
        top_k=top_k,
        object_topk_mean_recall=_mean_supported(object_topk),
        predicate_topk_mean_recall=_mean_supported(predicate_topk),
        predicate_group_recall=group_recall,
        combined_recall_at=recall_at,
        loss_trace=list(loss_trace),
    )


def _readout_scores(posteriors: List[NodePosterior], mode: ReadoutMode) -> np.ndarray:
    rows = [p.pi_star if mode is ReadoutMode.VARIATIONAL else p.log_posterior for p in posteriors]
    return np.array(rows) if rows else np.zeros((0, 0))


def evaluate(dataset: Sequence[SyntheticInstance], theta: ThetaParams, inf_cfg: InferenceConfig,
             v_o: int, v_p: int, top_k: int = 2, reference_counts: Optional[np.ndarray] = None,
             loss_trace: Sequence[float] = (), workers: int = 1,
             recall_ks: Sequence[int] = ()) -> EvaluationReport:
    """
    Inference with θ and τ frozen, scored under both readouts.

    reference_counts ranks predicate classes for the head/body/tail split;
    by default the evaluated split's own counts are used.
    """
    if not dataset:
        raise DomainError("cannot evaluate an empty dataset")

    def infer(k: int) -> List[NodePosterior]:
        return infer_instance(compute_marginal_scores(theta, dataset[k]), inf_cfg, (k,))

    all_posteriors = ordered_map(infer, list(range(len(dataset))), workers)
    if reference_counts is None:
        _, reference_counts = label_counts(dataset, v_o, v_p)

    object_true = np.concatenate([inst.object_labels for inst in dataset])
    predicate_true = np.concatenate([inst.predicate_labels for inst in dataset])
    reports = {}
    for mode in ReadoutMode:
        object_rows, predicate_rows = [], []
        for inst, posteriors in zip(dataset, all_posteriors):
            m = inst.graph.m
            object_rows.append(_readout_scores(posteriors[:m], mode).reshape(-1, v_o))
            predicate_rows.append(_readout_scores(posteriors[m:], mode).reshape(-1, v_p))
        reports[mode] = compute_metrics(object_true, np.concatenate(object_rows),
                                        predicate_true, np.concatenate(predicate_rows),
                                        v_o, v_p, top_k, reference_counts, loss_trace, recall_ks)
    bounds = [p.bound for posteriors in all_posteriors for p in posteriors]
    report = EvaluationReport(posterior=reports[ReadoutMode.POSTERIOR],
                              variational=reports[ReadoutMode.VARIATIONAL],
                              mean_bound=float(np.mean(bounds)))
    logger.info(f"Evaluated {len(dataset)} instances: posterior mR={report.posterior.combined_mean_recall:.4f} "
                f"variational mR={report.variational.combined_mean_recall:.4f}")
    return report


def readout_labels(posteriors: Sequence[NodePosterior], mode: ReadoutMode) -> List[int]:
    return [readout(p, mode) for p in posteriors]
