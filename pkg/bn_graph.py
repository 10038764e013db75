#!/usr/bin/env python3
"""
Bayesian network of feature and model nodes
Node/Dag types, validation, topological traversal, sample batches and the network JSON schema.
"""

import os
import json
import logging
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import networkx as nx
import pandas as pd

from errors import GraphError, BNStressError
from distributions import (
    ConditionalCategorical, Categorical, OneHotCategorical, Dirichlet,
    dist_from_json, prior_from_json,
)
from models import ModelSpec, TrainedModel, predict_proba, model_from_json, model_to_json, load_model

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

FEATURE = 'feature'
MODEL = 'model'


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    parents: Tuple[str, ...] = ()
    dist: Optional[object] = None
    model_spec: Optional[ModelSpec] = None
    model: Optional[TrainedModel] = None
    prior: Optional[Dirichlet] = None
    classes: Tuple[str, ...] = ()
    prior_weight: float = 0.0

    @property
    def is_feature(self) -> bool:
        return self.kind == FEATURE

    @property
    def is_model(self) -> bool:
        return self.kind == MODEL

    @property
    def is_discrete(self) -> bool:
        if self.is_model:
            return True
        return self.dist is not None and self.dist.is_discrete

    @property
    def spec(self) -> Optional[ModelSpec]:
        if self.model is not None:
            return self.model.spec
        return self.model_spec

    @property
    def n_classes(self) -> Optional[int]:
        if self.is_model:
            if self.classes:
                return len(self.classes)
            return self.spec.n_classes if self.spec else None
        if self.dist is not None and self.dist.is_discrete:
            return self.dist.n_categories
        return None

    @property
    def labels(self) -> Tuple[str, ...]:
        if self.is_model:
            return self.classes or tuple(str(i) for i in range(self.n_classes or 0))
        return getattr(self.dist, 'labels', ())

    def output_proba(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Class probabilities of a model node given its parent columns.

        A Dirichlet prior with prior_weight > 0 mixes its mean into the output.
        """
        if not self.is_model:
            raise GraphError(f"node {self.id} is not a model node")
        if self.model is None:
            raise GraphError(f"model node {self.id} is not trained")
        probs = predict_proba(self.model, {p: columns[p] for p in self.parents})
        if self.prior is not None and self.prior_weight > 0:
            probs = (1.0 - self.prior_weight) * probs + self.prior_weight * self.prior.mean()
        return probs


def feature_node(node_id: str, dist, parents: Sequence[str] = (), prior: Optional[Dirichlet] = None) -> Node:
    return Node(id=node_id, kind=FEATURE, parents=tuple(parents), dist=dist, prior=prior)


def model_node(node_id: str, parents: Sequence[str], spec: Optional[ModelSpec] = None,
               model: Optional[TrainedModel] = None, classes: Sequence[str] = (),
               prior: Optional[Dirichlet] = None, prior_weight: float = 0.0) -> Node:
    return Node(id=node_id, kind=MODEL, parents=tuple(parents), model_spec=spec, model=model,
                classes=tuple(classes), prior=prior, prior_weight=prior_weight)


@dataclass(frozen=True)
class Dag:
    nodes: Tuple[Node, ...]
    output: str

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(self.nodes))

    @property
    def ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    def has(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"unknown node {node_id!r}")

    @property
    def feature_nodes(self) -> List[Node]:
        return [n for n in self.nodes if n.is_feature]

    @property
    def model_nodes(self) -> List[Node]:
        return [n for n in self.nodes if n.is_model]

    def replace_node(self, new: Node) -> 'Dag':
        """New Dag with the node of the same id swapped out"""
        self.node(new.id)
        return Dag(tuple(new if n.id == new.id else n for n in self.nodes), self.output)

    def children(self, node_id: str) -> List[str]:
        return sorted(n.id for n in self.nodes if node_id in n.parents)


@dataclass(frozen=True)
class Violation:
    node: str
    rule: str
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass
class ValidationResult:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def structural_ok(self) -> bool:
        return not any(v.rule in STRUCTURAL_RULES for v in self.violations)

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(self.messages())


STRUCTURAL_RULES = {'empty id', 'duplicate id', 'unresolved parent', 'cycle', 'output'}


def _graph(dag: Dag) -> nx.DiGraph:
    g = nx.DiGraph()
    known = set(dag.ids)
    g.add_nodes_from(known)
    for n in dag.nodes:
        for p in n.parents:
            if p in known:
                g.add_edge(p, n.id)
    return g


def _structural_violations(dag: Dag) -> List[Violation]:
    out = []
    seen = set()
    for n in dag.nodes:
        if not isinstance(n.id, str) or not n.id:
            out.append(Violation(str(n.id), 'empty id', "node with empty id"))
        elif n.id in seen:
            out.append(Violation(n.id, 'duplicate id', f"duplicate id: {n.id}"))
        seen.add(n.id)
    for n in dag.nodes:
        for p in n.parents:
            if p not in seen:
                out.append(Violation(n.id, 'unresolved parent', f"unresolved parent: {n.id} -> {p}"))
    g = _graph(dag)
    remaining = g.copy()
    while True:
        try:
            cycle = nx.find_cycle(remaining)
        except nx.NetworkXNoCycle:
            break
        members = sorted({u for u, _ in cycle})
        out.append(Violation(members[0], 'cycle', f"cycle: {','.join(members)}"))
        remaining.remove_nodes_from(members)
    if dag.output not in seen:
        out.append(Violation(str(dag.output), 'output', f"output node {dag.output!r} does not exist"))
    return out


def _feature_violations(dag: Dag, n: Node) -> List[Violation]:
    out = []
    if n.dist is None:
        return [Violation(n.id, 'feature dist', f"feature {n.id} has no distribution")]
    if isinstance(n.dist, ConditionalCategorical):
        counts = []
        for p in n.parents:
            parent = dag.node(p)
            if not (parent.is_feature and parent.is_discrete):
                out.append(Violation(n.id, 'conditional parent',
                                     f"conditional feature {n.id} has non-categorical parent {p}"))
            else:
                counts.append(parent.n_classes)
        if not n.parents:
            out.append(Violation(n.id, 'conditional parent', f"conditional feature {n.id} has no parents"))
        elif len(counts) == len(n.parents):
            if n.dist.n_parents != len(n.parents):
                out.append(Violation(n.id, 'conditional table',
                                     f"conditional table of {n.id} keyed by {n.dist.n_parents} parents, "
                                     f"node has {len(n.parents)}"))
            else:
                missing = [c for c in product(*(range(k) for k in counts)) if c not in n.dist.table]
                if missing:
                    out.append(Violation(n.id, 'conditional table',
                                         f"conditional table of {n.id} misses configuration {missing[0]}"))
    elif n.parents:
        out.append(Violation(n.id, 'feature parents',
                             f"feature {n.id} has an unconditional distribution but parents"))
    if n.prior is not None:
        if not isinstance(n.dist, (Categorical, OneHotCategorical)):
            out.append(Violation(n.id, 'prior', f"prior on {n.id} needs a categorical distribution"))
        elif n.prior.dimension != n.dist.n_categories:
            out.append(Violation(n.id, 'prior', f"prior dimension of {n.id} does not match its categories"))
    return out


def _model_violations(dag: Dag, n: Node) -> List[Violation]:
    out = []
    if not n.parents:
        out.append(Violation(n.id, 'model parents', f"model {n.id} has no parents"))
    spec = n.spec
    if spec is None:
        out.append(Violation(n.id, 'model spec', f"model {n.id} has neither a spec nor a trained model"))
        return out
    if spec.parents != tuple(n.parents):
        out.append(Violation(n.id, 'input schema',
                             f"input schema of {n.id} {list(spec.parents)} does not match parents {list(n.parents)}"))
    if n.classes and len(n.classes) != spec.n_classes:
        out.append(Violation(n.id, 'classes', f"{n.id} declares {len(n.classes)} classes, model has {spec.n_classes}"))
    for (p, k) in spec.input_schema:
        if k and dag.has(p) and dag.node(p).n_classes not in (None, k):
            out.append(Violation(n.id, 'input schema',
                                 f"{n.id} one-hot encodes {p} with {k} classes, node has {dag.node(p).n_classes}"))
    if n.prior is not None and n.prior.dimension != spec.n_classes:
        out.append(Violation(n.id, 'prior', f"prior dimension of {n.id} does not match its classes"))
    if not 0.0 <= n.prior_weight <= 1.0:
        out.append(Violation(n.id, 'prior', f"prior_weight of {n.id} outside [0, 1]"))
    return out


def validate(dag: Dag) -> ValidationResult:
    """Check every network invariant; violations are returned, never raised"""
    try:
        violations = _structural_violations(dag)
        if any(v.rule in ('duplicate id', 'empty id') for v in violations):
            return ValidationResult(violations)
        resolvable = not any(v.rule == 'unresolved parent' for v in violations)
        if dag.has(dag.output) and not dag.node(dag.output).is_model:
            violations.append(Violation(dag.output, 'output', f"output node {dag.output} is not a model node"))
        for n in dag.nodes:
            if n.kind not in (FEATURE, MODEL):
                violations.append(Violation(n.id, 'kind', f"node {n.id} has unknown kind {n.kind!r}"))
            elif not resolvable:
                continue
            elif n.is_feature:
                violations.extend(_feature_violations(dag, n))
            else:
                violations.extend(_model_violations(dag, n))
        return ValidationResult(violations)
    except BNStressError as e:
        return ValidationResult([Violation('', 'internal', f"validation failed: {e}")])
    except (AttributeError, TypeError, ValueError) as e:
        return ValidationResult([Violation('', 'malformed', f"malformed network: {e}")])


def topological_order(dag: Dag) -> List[str]:
    """Parents before children, generation by generation; lexical node name order within a generation"""
    result = ValidationResult(_structural_violations(dag))
    if not result.structural_ok:
        raise GraphError(f"invalid network: {'; '.join(result.messages())}")
    return [node_id for generation in nx.topological_generations(_graph(dag)) for node_id in sorted(generation)]


def parents(dag: Dag, node_id: str) -> List[str]:
    return list(dag.node(node_id).parents)


def build_input_schema(dag: Dag, node_id: str) -> Tuple[Tuple[str, int], ...]:
    """Encoding per parent: model outputs and one-hot features as one-hot, the rest numeric"""
    schema = []
    for p in dag.node(node_id).parents:
        parent = dag.node(p)
        if parent.is_model or isinstance(parent.dist, OneHotCategorical):
            schema.append((p, parent.n_classes))
        else:
            schema.append((p, 0))
    return tuple(schema)


@dataclass
class SampleBatch:
    """Columnar table of node values, one column per node id.

    probas keeps, for model nodes, the per-row class simplex the value was drawn from.
    """

    columns: Dict[str, np.ndarray]
    probas: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()} | {len(v) for v in self.probas.values()}
        if len(lengths) > 1:
            raise GraphError(f"sample batch columns have different lengths {sorted(lengths)}")

    @property
    def n(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise GraphError(f"sample batch has no column {name!r}")
        return self.columns[name]

    def with_column(self, name: str, values: np.ndarray, proba: Optional[np.ndarray] = None) -> 'SampleBatch':
        probas = dict(self.probas)
        if proba is not None:
            probas[name] = np.asarray(proba)
        else:
            probas.pop(name, None)
        return SampleBatch({**self.columns, name: np.asarray(values)}, probas)

    def subset(self, rows) -> 'SampleBatch':
        return SampleBatch({k: v[rows] for k, v in self.columns.items()},
                           {k: v[rows] for k, v in self.probas.items()})

    def to_frame(self):
        return pd.DataFrame(self.columns)

    @classmethod
    def from_frame(cls, frame, names: Optional[Iterable[str]] = None) -> 'SampleBatch':
        names = list(names) if names is not None else list(frame.columns)
        return cls({name: frame[name].to_numpy() for name in names})


# Network JSON schema

def _model_from_json(entry: Dict, parents_: Sequence[str], base_dir: Optional[str]):
    if 'bundle' in entry:
        path = entry['bundle']
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return None, load_model(path)
    if 'parameters' in entry:
        return None, model_from_json(entry)
    return entry, None


def dag_from_json(data: Dict, base_dir: Optional[str] = None) -> Dag:
    """Parse the network schema; model specs without input_schema get one derived from the parents"""
    if not isinstance(data, dict) or 'nodes' not in data or 'output' not in data:
        raise GraphError("network JSON needs 'nodes' and 'output'")
    nodes = []
    pending = {}
    for entry in data['nodes']:
        try:
            node_id = entry['id']
            kind = entry['kind']
        except (KeyError, TypeError):
            raise GraphError(f"network node entry needs 'id' and 'kind': {entry!r}")
        node_parents = tuple(entry.get('parents', ()))
        prior = prior_from_json(entry.get('prior'))
        if kind == FEATURE:
            if 'dist' not in entry:
                raise GraphError(f"feature {node_id} has no 'dist'")
            nodes.append(feature_node(node_id, dist_from_json(entry['dist']), node_parents, prior))
        elif kind == MODEL:
            if 'model' not in entry:
                raise GraphError(f"model {node_id} has no 'model'")
            raw_spec, trained = _model_from_json(entry['model'], node_parents, base_dir)
            node = model_node(node_id, node_parents, model=trained, classes=tuple(entry.get('classes', ())),
                              prior=prior, prior_weight=float(entry.get('prior_weight', 0.0)))
            if raw_spec is not None:
                pending[node_id] = raw_spec
            nodes.append(node)
        else:
            raise GraphError(f"node {node_id} has unknown kind {kind!r}")
    dag = Dag(tuple(nodes), data['output'])
    for node_id, raw in pending.items():
        raw = dict(raw)
        node = dag.node(node_id)
        if 'n_classes' not in raw:
            raw['n_classes'] = len(node.classes) if node.classes else 2
        if 'input_schema' not in raw:
            schema = build_input_schema(dag, node_id)
            raw['input_schema'] = [{'parent': p, 'encoding': 'onehot' if k else 'numeric', 'k': k or 0}
                                   for p, k in schema]
        dag = dag.replace_node(replace(node, model_spec=ModelSpec.from_json(raw)))
    return dag


def node_to_json(node: Node, model_refs: Optional[Mapping[str, str]] = None) -> Dict:
    entry = {'id': node.id, 'kind': node.kind, 'parents': list(node.parents)}
    if node.is_feature:
        entry['dist'] = node.dist.to_json()
    else:
        if model_refs and node.id in model_refs:
            entry['model'] = {'bundle': model_refs[node.id]}
        elif node.model is not None:
            entry['model'] = model_to_json(node.model)
        else:
            entry['model'] = node.model_spec.to_json()
        entry['classes'] = list(node.labels)
        if node.prior_weight:
            entry['prior_weight'] = node.prior_weight
    if node.prior is not None:
        entry['prior'] = node.prior.to_json()
    return entry


def dag_to_json(dag: Dag, model_refs: Optional[Mapping[str, str]] = None) -> Dict:
    return {'nodes': [node_to_json(n, model_refs) for n in dag.nodes], 'output': dag.output}


def load_network(path: str) -> Dag:
    with open(path) as f:
        data = json.load(f)
    return dag_from_json(data, base_dir=os.path.dirname(os.path.abspath(path)))


def save_network(dag: Dag, path: str, model_refs: Optional[Mapping[str, str]] = None) -> None:
    with open(path, 'w') as f:
        json.dump(dag_to_json(dag, model_refs), f, indent=2, sort_keys=True)


def describe(dag: Dag) -> str:
    order = topological_order(dag)
    lines = [f"{len(dag.model_nodes)} models, {len(dag.feature_nodes)} features, output {dag.output}"]
    for node_id in order:
        n = dag.node(node_id)
        what = n.dist.type_name if n.is_feature else n.spec.architecture if n.spec else '?'
        lines.append(f"  {node_id:<8} {n.kind:<8} {what:<12} <- {', '.join(n.parents) or '-'}")
    return "\n".join(lines)


if __name__ == "__main__":
    x = feature_node('x', Categorical((0.5, 0.5)))
    m = model_node('m', ['x'], ModelSpec('linear', 2, (('x', 0),)))
    dag = Dag((m, x), 'm')
    print(validate(dag))
    print(topological_order(dag))
