"""
Log marginal scoring functions.

MLP mode sums per-node messages from the seven feature networks (object and
predicate scores). Explicit mode marginalizes hand-specified potential tables
exactly and exists to pin the semantics against brute-force enumeration.
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp

from errors import CapacityError, DimensionError, DomainError, NodeLookupError
from mlp_networks import NET_NAMES, ThetaGrads, ThetaParams, add_grads, backward, forward, zero_grads
from scene_graph import (NodeKind, NodeRef, SceneGraph, SyntheticInstance, all_nodes, global_index,
                         object_peers, object_predicates)

logger = logging.getLogger(__name__)

ENUMERATION_GUARD = 10 ** 7

Message = Tuple[str, np.ndarray]


class MarginalScoreTable(BaseModel):
    """ψ for every labelled node: objects (v_o each), then predicates (v_p each)"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    objects: List[np.ndarray]
    predicates: List[np.ndarray]

    def __getitem__(self, node: NodeRef) -> np.ndarray:
        if node.kind is NodeKind.OBJECT and 0 <= node.index < len(self.objects):
            return self.objects[node.index]
        if node.kind is NodeKind.PREDICATE and 0 <= node.index < len(self.predicates):
            return self.predicates[node.index]
        raise NodeLookupError(f"no marginal score for {node.kind.value} {node.index}")

    def ordered(self) -> List[np.ndarray]:
        """Canonical node order: objects then predicates"""
        return list(self.objects) + list(self.predicates)

    def shifted(self, c: float) -> "MarginalScoreTable":
        return MarginalScoreTable(objects=[psi + c for psi in self.objects],
                                  predicates=[psi + c for psi in self.predicates])


def compensated_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Neumaier-compensated elementwise sum"""
    if not vectors:
        raise DimensionError("cannot sum an empty message list")
    total = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    comp = np.zeros_like(total)
    for x in vectors:
        x = np.asarray(x, dtype=np.float64)
        t = total + x
        comp += np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
    return total + comp


# --- MLP MODE ---

def object_messages(inst: SyntheticInstance, i: int) -> List[Message]:
    """(network, input) pairs whose outputs sum to -ψ_i"""
    g = inst.graph
    if not 0 <= i < g.m:
        raise NodeLookupError(f"object {i} does not exist in this graph")
    y_i = inst.object_features[i]
    messages: List[Message] = [("h_o", y_i)]
    for j in object_predicates(g, i):
        messages.append(("g_op", np.concatenate([y_i, inst.predicate_features[j]])))
    for l in object_peers(g, i):
        messages.append(("g_oo", np.concatenate([y_i, inst.object_features[l]])))
    messages.append(("g_og", np.concatenate([y_i, inst.global_feature])))
    return messages


def predicate_messages(inst: SyntheticInstance, j: int) -> List[Message]:
    g = inst.graph
    if not 0 <= j < g.n:
        raise NodeLookupError(f"predicate {j} does not exist in this graph")
    y_j = inst.predicate_features[j]
    messages: List[Message] = [("h_p", y_j)]
    for i in sorted(g.predicate_endpoints[j]):
        messages.append(("g_po", np.concatenate([inst.object_features[i], y_j])))
    messages.append(("g_pg", np.concatenate([y_j, inst.global_feature])))
    return messages


def node_messages(inst: SyntheticInstance, node: NodeRef) -> List[Message]:
    if node.kind is NodeKind.OBJECT:
        return object_messages(inst, node.index)
    if node.kind is NodeKind.PREDICATE:
        return predicate_messages(inst, node.index)
    raise NodeLookupError("the global node carries no label and has no marginal score")


def object_marginal_score(theta: ThetaParams, inst: SyntheticInstance, i: int) -> np.ndarray:
    """ψ_i = -[h_o + Σ g_op + Σ g_oo + g_og]"""
    return -compensated_sum([forward(theta[net], x) for net, x in object_messages(inst, i)])


def predicate_marginal_score(theta: ThetaParams, inst: SyntheticInstance, j: int) -> np.ndarray:
    """ψ_j = -[h_p + Σ g_po + g_pg]"""
    return -compensated_sum([forward(theta[net], x) for net, x in predicate_messages(inst, j)])


def _batched_plan(inst: SyntheticInstance) -> Tuple[List[List[Message]], Dict[str, List[Tuple[int, int]]]]:
    """Per-node message lists plus, per network, the (node, slot) of each message"""
    plan = [node_messages(inst, node) for node in all_nodes(inst.graph)]
    slots: Dict[str, List[Tuple[int, int]]] = defaultdict(list)
    for node_idx, messages in enumerate(plan):
        for slot, (net, _) in enumerate(messages):
            slots[net].append((node_idx, slot))
    return plan, slots


def compute_marginal_scores(theta: ThetaParams, inst: SyntheticInstance) -> MarginalScoreTable:
    """ψ for every node; one batched forward pass per network"""
    g = inst.graph
    plan, slots = _batched_plan(inst)
    outputs: List[List[Optional[np.ndarray]]] = [[None] * len(msgs) for msgs in plan]
    for net, positions in slots.items():
        batch = np.stack([plan[k][s][1] for k, s in positions])
        result = forward(theta[net], batch)
        for row, (k, s) in zip(result, positions):
            outputs[k][s] = row
    psis = [-compensated_sum(node_outputs) for node_outputs in outputs]
    if not all(np.all(np.isfinite(psi)) for psi in psis):
        logger.warning(f"Non-finite marginal score for instance with m={g.m}, n={g.n}")
    return MarginalScoreTable(objects=psis[:g.m], predicates=psis[g.m:])


def score_backward(theta: ThetaParams, inst: SyntheticInstance, d_psi: Sequence[np.ndarray]) -> ThetaGrads:
    """
    Adjoint of compute_marginal_scores.

    d_psi lists ∂L/∂ψ per node in canonical order. Every message feeding ψ_i
    enters with a minus sign, so each receives grad_out = -d_psi[i].
    """
    plan, slots = _batched_plan(inst)
    if len(d_psi) != len(plan):
        raise DimensionError(f"expected {len(plan)} score gradients, got {len(d_psi)}")
    grads = zero_grads(theta)
    for net in NET_NAMES:
        positions = slots.get(net)
        if not positions:
            continue
        batch = np.stack([plan[k][s][1] for k, s in positions])
        grad_out = np.stack([-np.asarray(d_psi[k], dtype=np.float64) for k, _ in positions])
        net_grads, _ = backward(theta[net], batch, grad_out)
        add_grads(grads, net, net_grads)
    return grads


# --- EXPLICIT MODE ---

class PotentialTables(BaseModel):
    """
    Named potential tables over a scene graph.

    Names: "u_o:i" (v_o,), "u_p:j" (v_p,), "op:j:i" (v_o, v_p) for predicate j
    and endpoint i, "oo:a:b" (v_o, v_o), "og:i" (v_o, 1), "pg:j" (v_p, 1).
    The global node has one observed state, hence the width-1 columns.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    v_o: int
    v_p: int
    tables: Dict[str, np.ndarray]

    def expected_shapes(self, g: SceneGraph) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i in range(g.m):
            shapes[f"u_o:{i}"] = (self.v_o,)
            shapes[f"og:{i}"] = (self.v_o, 1)
        for j, (s, o) in enumerate(g.predicate_endpoints):
            shapes[f"u_p:{j}"] = (self.v_p,)
            shapes[f"pg:{j}"] = (self.v_p, 1)
            for i in (s, o):
                shapes[f"op:{j}:{i}"] = (self.v_o, self.v_p)
        for a, b in g.object_pairs:
            shapes[f"oo:{a}:{b}"] = (self.v_o, self.v_o)
        return shapes

    def check_against(self, g: SceneGraph) -> None:
        expected = self.expected_shapes(g)
        if set(expected) != set(self.tables):
            missing = sorted(set(expected) - set(self.tables))
            extra = sorted(set(self.tables) - set(expected))
            raise DimensionError(f"potential tables do not match the graph (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            table = self.tables[name]
            if table.shape != shape:
                raise DimensionError(f"table {name} has shape {table.shape}, expected {shape}")
            if not np.all(np.isfinite(table)):
                raise DomainError(f"table {name} has non-finite entries")

    def to_json(self) -> str:
        payload = {
            "v_o": self.v_o,
            "v_p": self.v_p,
            "tables": {name: {"shape": list(t.shape), "values": t.reshape(-1).tolist()}
                       for name, t in sorted(self.tables.items())},
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PotentialTables":
        payload = json.loads(text)
        tables = {name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
                  for name, entry in payload["tables"].items()}
        return cls(v_o=payload["v_o"], v_p=payload["v_p"], tables=tables)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PotentialTables":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def random_tables(g: SceneGraph, v_o: int, v_p: int, rng: np.random.Generator, scale: float = 1.0) -> PotentialTables:
    """Gaussian potentials for every table the graph needs"""
    shell = PotentialTables(v_o=v_o, v_p=v_p, tables={})
    tables = {name: scale * rng.standard_normal(shape) for name, shape in shell.expected_shapes(g).items()}
    return PotentialTables(v_o=v_o, v_p=v_p, tables=tables)


def zero_tables(g: SceneGraph, v_o: int, v_p: int) -> PotentialTables:
    shell = PotentialTables(v_o=v_o, v_p=v_p, tables={})
    return PotentialTables(v_o=v_o, v_p=v_p,
                           tables={name: np.zeros(shape) for name, shape in shell.expected_shapes(g).items()})


def label_sizes(g: SceneGraph, v_o: int, v_p: int) -> Tuple[int, ...]:
    """Vocabulary size per labelled node, canonical order"""
    return (v_o,) * g.m + (v_p,) * g.n


def configuration_count(g: SceneGraph, v_o: int, v_p: int) -> int:
    return v_o ** g.m * v_p ** g.n


def check_enumeration_guard(g: SceneGraph, v_o: int, v_p: int) -> int:
    count = configuration_count(g, v_o, v_p)
    if count > ENUMERATION_GUARD:
        raise CapacityError(f"{count} joint configurations exceed the enumeration guard of {ENUMERATION_GUARD}")
    return count


def joint_log_score(tables: PotentialTables, g: SceneGraph, assignment: Sequence[int]) -> float:
    """-Σ of every unary and pairwise potential selected by the assignment"""
    sizes = label_sizes(g, tables.v_o, tables.v_p)
    if len(assignment) != len(sizes):
        raise DimensionError(f"assignment labels {len(assignment)} nodes, graph has {len(sizes)}")
    labels = [int(k) for k in assignment]
    for idx, (k, v) in enumerate(zip(labels, sizes)):
        if not 0 <= k < v:
            raise DomainError(f"label {k} of node {idx} outside vocabulary of size {v}")

    t = tables.tables
    obj, pred = labels[:g.m], labels[g.m:]
    terms = []
    for i in range(g.m):
        terms.append(t[f"u_o:{i}"][obj[i]])
        terms.append(t[f"og:{i}"][obj[i], 0])
    for j, (s, o) in enumerate(g.predicate_endpoints):
        terms.append(t[f"u_p:{j}"][pred[j]])
        terms.append(t[f"pg:{j}"][pred[j], 0])
        for i in (s, o):
            terms.append(t[f"op:{j}:{i}"][obj[i], pred[j]])
    for a, b in g.object_pairs:
        terms.append(t[f"oo:{a}:{b}"][obj[a], obj[b]])
    return -float(compensated_sum([np.array([x]) for x in terms])[0])


def _axis_view(table: np.ndarray, axes: Tuple[int, ...], ndim: int) -> np.ndarray:
    """Broadcastable view of a table whose dimensions sit on the given axes"""
    order = np.argsort(axes)
    arranged = np.transpose(table, order)
    shape = [1] * ndim
    for axis, size in zip(sorted(axes), arranged.shape):
        shape[axis] = size
    return arranged.reshape(shape)


def log_joint_tensor(tables: PotentialTables, g: SceneGraph) -> np.ndarray:
    """joint_log_score for every labelling at once, one axis per node"""
    tables.check_against(g)
    check_enumeration_guard(g, tables.v_o, tables.v_p)
    ndim = g.m + g.n
    total = np.zeros(label_sizes(g, tables.v_o, tables.v_p))
    t = tables.tables
    for i in range(g.m):
        total -= _axis_view(t[f"u_o:{i}"] + t[f"og:{i}"][:, 0], (i,), ndim)
    for j, (s, o) in enumerate(g.predicate_endpoints):
        total -= _axis_view(t[f"u_p:{j}"] + t[f"pg:{j}"][:, 0], (g.m + j,), ndim)
        for i in (s, o):
            total -= _axis_view(t[f"op:{j}:{i}"], (i, g.m + j), ndim)
    for a, b in g.object_pairs:
        total -= _axis_view(t[f"oo:{a}:{b}"], (a, b), ndim)
    return total


def marginal_score_explicit(tables: PotentialTables, g: SceneGraph, node: NodeRef) -> np.ndarray:
    """Entry k: log Σ exp(joint_log_score) over labellings with the node fixed to k"""
    if node.kind is NodeKind.GLOBAL:
        raise NodeLookupError("the global node carries no label and has no marginal score")
    axis = global_index(g, node)
    joint = log_joint_tensor(tables, g)
    others = tuple(a for a in range(joint.ndim) if a != axis)
    if not others:
        return joint.copy()
    return logsumexp(joint, axis=others)
