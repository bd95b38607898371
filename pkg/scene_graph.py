"""
Scene-graph topology and the synthetic desk-scale tasks that stand in for
visual perception output.

Node ordering everywhere: objects [0, m), predicates [m, m + n), global last.
"""

import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigError, NodeLookupError, TopologyError

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


class NodeKind(Enum):
    """Kinds of nodes in a scene graph"""
    OBJECT = "object"
    PREDICATE = "predicate"
    GLOBAL = "global"


class NodeRef(NamedTuple):
    kind: NodeKind
    index: int = 0


# --- PYDANTIC MODELS ---

class SceneGraph(BaseModel):
    """Object/predicate topology plus one global context node"""
    model_config = ConfigDict(frozen=True)

    m: int
    n: int
    predicate_endpoints: Tuple[Pair, ...] = ()
    object_pairs: Tuple[Pair, ...] = ()
    has_global: bool = True

    @property
    def node_count(self) -> int:
        """Labelled nodes (the global node carries no label)"""
        return self.m + self.n


class TaskConfig(BaseModel):
    """Generator settings for a synthetic scene-graph task"""
    d: int = Field(16, ge=1)
    v_o: int = Field(5, ge=1)
    v_p: int = Field(4, ge=1)
    m_range: Tuple[int, int] = (2, 5)
    n_range: Tuple[int, int] = (1, 4)
    class_separation: float = Field(3.0, ge=0.0)
    label_skew: float = Field(0.5, ge=0.0)
    pair_density: float = Field(0.25, ge=0.0, le=1.0)
    seed: int = 0

    @field_validator("m_range", "n_range", mode="before")
    @classmethod
    def parse_range(cls, v):
        """Accept "2,5" as well as (2, 5)"""
        if isinstance(v, str):
            parts = [p.strip() for p in v.split(",") if p.strip()]
            return tuple(int(p) for p in parts)
        return v

    @model_validator(mode="after")
    def check_ranges(self):
        m_lo, m_hi = self.m_range
        n_lo, n_hi = self.n_range
        if m_lo < 1 or m_hi < m_lo:
            raise ValueError(f"m_range must satisfy 1 <= lo <= hi, got {self.m_range}")
        if n_lo < 0 or n_hi < n_lo:
            raise ValueError(f"n_range must satisfy 0 <= lo <= hi, got {self.n_range}")
        return self


class SyntheticInstance(BaseModel):
    """One labelled scene graph with per-node feature vectors"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    graph: SceneGraph
    object_features: np.ndarray
    predicate_features: np.ndarray
    global_feature: np.ndarray
    object_labels: np.ndarray
    predicate_labels: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def shape_empty_predicates(cls, data):
        # an empty predicate list arrives as shape (0,)
        if isinstance(data, dict):
            predicate_features = np.asarray(data.get("predicate_features", []), dtype=np.float64)
            if predicate_features.size == 0:
                d = np.asarray(data.get("global_feature", []), dtype=np.float64).reshape(-1).shape[0]
                data = {**data, "predicate_features": np.zeros((0, d))}
        return data

    @field_validator("object_features", "predicate_features", "global_feature", mode="before")
    @classmethod
    def as_float_array(cls, v):
        return np.array(v, dtype=np.float64)

    @field_validator("object_labels", "predicate_labels", mode="before")
    @classmethod
    def as_label_array(cls, v):
        return np.array(v, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def check_shapes(self):
        g = self.graph
        d = self.global_feature.shape[0] if self.global_feature.ndim == 1 else -1
        if d < 1:
            raise ValueError("global_feature must be a non-empty vector")
        if self.object_features.shape != (g.m, d):
            raise ValueError(f"object_features shape {self.object_features.shape} != {(g.m, d)}")
        if self.predicate_features.shape != (g.n, d):
            raise ValueError(f"predicate_features shape {self.predicate_features.shape} != {(g.n, d)}")
        if self.object_labels.shape != (g.m,) or self.predicate_labels.shape != (g.n,):
            raise ValueError("label counts do not match the graph")
        for name in ("object_features", "predicate_features", "global_feature",
                     "object_labels", "predicate_labels"):
            getattr(self, name).flags.writeable = False
        return self

    @property
    def feature_dim(self) -> int:
        return self.global_feature.shape[0]


# --- TOPOLOGY ---

def build_graph(m: int, n: int, endpoints: Sequence[Pair], object_pairs: Sequence[Pair]) -> SceneGraph:
    """Validate a topology and freeze it into a SceneGraph"""
    if m < 1:
        raise TopologyError(f"a scene graph needs at least one object, got m={m}")
    if n < 0 or len(endpoints) != n:
        raise TopologyError(f"expected {n} predicate endpoint pairs, got {len(endpoints)}")

    clean_endpoints = []
    for j, pair in enumerate(endpoints):
        s, o = (int(pair[0]), int(pair[1]))
        if not (0 <= s < m and 0 <= o < m):
            raise TopologyError(f"predicate {j} endpoint ({s}, {o}) out of range [0, {m})")
        if s == o:
            raise TopologyError(f"predicate {j} repeats endpoint {s}")
        clean_endpoints.append((s, o))

    seen = set()
    clean_pairs = []
    for pair in object_pairs:
        a, b = (int(pair[0]), int(pair[1]))
        if not (0 <= a < m and 0 <= b < m):
            raise TopologyError(f"object pair ({a}, {b}) out of range [0, {m})")
        if a == b:
            raise TopologyError(f"object pair ({a}, {b}) is a self-pair")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise TopologyError(f"object pair ({a}, {b}) listed twice")
        seen.add(key)
        clean_pairs.append((a, b))

    return SceneGraph(m=m, n=n, predicate_endpoints=tuple(clean_endpoints),
                      object_pairs=tuple(clean_pairs), has_global=True)


def object_predicates(g: SceneGraph, i: int) -> List[int]:
    """Predicates with object i as an endpoint, ascending"""
    return [j for j, (s, o) in enumerate(g.predicate_endpoints) if i in (s, o)]


def object_peers(g: SceneGraph, i: int) -> List[int]:
    """Objects sharing an object-object potential with object i, ascending"""
    peers = set()
    for a, b in g.object_pairs:
        if a == i:
            peers.add(b)
        elif b == i:
            peers.add(a)
    return sorted(peers)


def global_index(g: SceneGraph, node: NodeRef) -> int:
    """Position of a node in the canonical ordering"""
    _check_node(g, node)
    if node.kind is NodeKind.OBJECT:
        return node.index
    if node.kind is NodeKind.PREDICATE:
        return g.m + node.index
    return g.m + g.n


def _check_node(g: SceneGraph, node: NodeRef) -> None:
    limits = {NodeKind.OBJECT: g.m, NodeKind.PREDICATE: g.n, NodeKind.GLOBAL: 1}
    if not isinstance(node, tuple) or node[0] not in limits:
        raise NodeLookupError(f"not a node reference: {node!r}")
    if not 0 <= node.index < limits[node.kind]:
        raise NodeLookupError(f"{node.kind.value} {node.index} does not exist in this graph")


def neighbors(g: SceneGraph, node: NodeRef) -> List[NodeRef]:
    """N(node) in canonical ascending order"""
    _check_node(g, node)
    glob = NodeRef(NodeKind.GLOBAL, 0)
    if node.kind is NodeKind.OBJECT:
        result = [NodeRef(NodeKind.OBJECT, l) for l in object_peers(g, node.index)]
        result += [NodeRef(NodeKind.PREDICATE, j) for j in object_predicates(g, node.index)]
        return result + [glob]
    if node.kind is NodeKind.PREDICATE:
        s, o = g.predicate_endpoints[node.index]
        return [NodeRef(NodeKind.OBJECT, i) for i in sorted((s, o))] + [glob]
    return ([NodeRef(NodeKind.OBJECT, i) for i in range(g.m)]
            + [NodeRef(NodeKind.PREDICATE, j) for j in range(g.n)])


# --- SYNTHETIC TASKS ---

def label_prior(v: int, skew: float) -> np.ndarray:
    """Power-law prior p_k proportional to (k + 1)^-skew"""
    weights = np.arange(1, v + 1, dtype=np.float64) ** (-skew)
    return weights / weights.sum()


def sample_labels(rng: np.random.Generator, v: int, skew: float, size: int) -> np.ndarray:
    return rng.choice(v, size=size, p=label_prior(v, skew))


def class_centres(rng: np.random.Generator, v: int, d: int, separation: float) -> np.ndarray:
    """Cluster means: random unit directions scaled by the separation"""
    directions = rng.standard_normal((v, d))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return separation * directions / norms


def synth_dataset(cfg: TaskConfig, count: int) -> List[SyntheticInstance]:
    """Deterministic labelled instances drawn from cfg"""
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1, got {count}")
    rng = np.random.default_rng(cfg.seed)
    object_centres = class_centres(rng, cfg.v_o, cfg.d, cfg.class_separation)
    predicate_centres = class_centres(rng, cfg.v_p, cfg.d, cfg.class_separation)

    instances = []
    for _ in range(count):
        m = int(rng.integers(cfg.m_range[0], cfg.m_range[1] + 1))
        n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1)) if m >= 2 else 0
        endpoints = [tuple(int(k) for k in rng.choice(m, size=2, replace=False)) for _ in range(n)]
        pairs = [(a, b) for a in range(m) for b in range(a + 1, m) if rng.random() < cfg.pair_density]
        graph = build_graph(m, n, endpoints, pairs)

        object_labels = sample_labels(rng, cfg.v_o, cfg.label_skew, m)
        predicate_labels = sample_labels(rng, cfg.v_p, cfg.label_skew, n)
        object_features = object_centres[object_labels] + rng.standard_normal((m, cfg.d))
        predicate_features = predicate_centres[predicate_labels] + rng.standard_normal((n, cfg.d))
        for j, (s, o) in enumerate(endpoints):
            predicate_features[j] += 0.5 * (object_features[s] + object_features[o])
        global_feature = object_features.mean(axis=0) + rng.standard_normal(cfg.d)

        instances.append(SyntheticInstance(
            graph=graph,
            object_features=object_features,
            predicate_features=predicate_features,
            global_feature=global_feature,
            object_labels=object_labels,
            predicate_labels=predicate_labels,
        ))
    logger.info(f"Generated {count} synthetic instances (seed={cfg.seed}, d={cfg.d}, "
                f"v_o={cfg.v_o}, v_p={cfg.v_p})")
    return instances


def label_counts(dataset: Sequence[SyntheticInstance], v_o: int, v_p: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class label frequencies for objects and predicates"""
    obj = np.zeros(v_o, dtype=np.int64)
    pred = np.zeros(v_p, dtype=np.int64)
    for inst in dataset:
        np.add.at(obj, inst.object_labels, 1)
        np.add.at(pred, inst.predicate_labels, 1)
    return obj, pred


# --- DATASET FILES ---

def instance_record(inst: SyntheticInstance) -> dict:
    g = inst.graph
    return {
        "record": "instance",
        "graph": {
            "m": g.m,
            "n": g.n,
            "predicate_endpoints": [list(p) for p in g.predicate_endpoints],
            "object_pairs": [list(p) for p in g.object_pairs],
            "has_global": g.has_global,
        },
        "object_features": inst.object_features.tolist(),
        "predicate_features": inst.predicate_features.tolist(),
        "global_feature": inst.global_feature.tolist(),
        "object_labels": inst.object_labels.tolist(),
        "predicate_labels": inst.predicate_labels.tolist(),
    }


def instance_from_record(record: dict) -> SyntheticInstance:
    graph = record["graph"]
    return SyntheticInstance(
        graph=build_graph(graph["m"], graph["n"], graph["predicate_endpoints"], graph["object_pairs"]),
        object_features=record["object_features"],
        predicate_features=record["predicate_features"],
        global_feature=record["global_feature"],
        object_labels=record["object_labels"],
        predicate_labels=record["predicate_labels"],
    )


def dataset_hash(dataset: Sequence[SyntheticInstance]) -> str:
    """SHA-256 over the canonical instance records"""
    digest = hashlib.sha256()
    for inst in dataset:
        digest.update(json.dumps(instance_record(inst)).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def write_dataset(path: Union[str, Path], cfg: TaskConfig, dataset: Sequence[SyntheticInstance]) -> str:
    """Write the header plus one instance per line; returns the dataset hash"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"record": "header", "task_config": cfg.model_dump(mode="json"), "count": len(dataset)}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for inst in dataset:
            f.write(json.dumps(instance_record(inst)) + "\n")
    digest = dataset_hash(dataset)
    logger.info(f"Wrote {len(dataset)} instances to {path} (hash {digest[:12]})")
    return digest


def read_dataset(path: Union[str, Path]) -> Tuple[TaskConfig, List[SyntheticInstance]]:
    """Read a dataset file written by write_dataset"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    if not lines:
        raise ConfigError(f"dataset file {path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("record") != "header":
            raise ConfigError(f"dataset file {path} has no header record")
        cfg = TaskConfig(**header["task_config"])
        dataset = [instance_from_record(json.loads(line)) for line in lines[1:]]
    except (KeyError, ValueError, TypeError, AttributeError) as e:
        if isinstance(e, ConfigError):
            raise
        logger.error(f"Error reading dataset {path}: {str(e)}")
        raise ConfigError(f"malformed dataset file {path}: {e}") from e

    for k, inst in enumerate(dataset):
        if inst.feature_dim != cfg.d:
            raise ConfigError(f"instance {k} has feature dimension {inst.feature_dim}, header says {cfg.d}")
        if np.any(inst.object_labels >= cfg.v_o) or np.any(inst.predicate_labels >= cfg.v_p) \
                or np.any(inst.object_labels < 0) or np.any(inst.predicate_labels < 0):
            raise ConfigError(f"instance {k} has a label outside the vocabulary")
    if header.get("count") != len(dataset):
        logger.warning(f"Header count {header.get('count')} != {len(dataset)} instances in {path}")
    return cfg, dataset


def split_dataset(dataset: List[SyntheticInstance], heldout: int) -> Tuple[List[SyntheticInstance], List[SyntheticInstance]]:
    """Last `heldout` instances become the held-out split"""
    if heldout <= 0:
        return dataset, []
    return dataset[:-heldout], dataset[-heldout:]


def all_nodes(g: SceneGraph, include_global: bool = False) -> List[NodeRef]:
    nodes = [NodeRef(NodeKind.OBJECT, i) for i in range(g.m)]
    nodes += [NodeRef(NodeKind.PREDICATE, j) for j in range(g.n)]
    if include_global:
        nodes.append(NodeRef(NodeKind.GLOBAL, 0))
    return nodes


def node_from_index(g: SceneGraph, index: int) -> NodeRef:
    """Inverse of global_index"""
    if 0 <= index < g.m:
        return NodeRef(NodeKind.OBJECT, index)
    if g.m <= index < g.m + g.n:
        return NodeRef(NodeKind.PREDICATE, index - g.m)
    if index == g.m + g.n:
        return NodeRef(NodeKind.GLOBAL, 0)
    raise NodeLookupError(f"node index {index} does not exist in this graph")
