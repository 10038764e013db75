#!/usr/bin/env python3
"""
Hierarchy plumbing
Propagating observed rows through the trained models, training every model node
bottom-up, and refitting feature distributions from data.
"""

import logging
from dataclasses import replace
from typing import Dict, Mapping, Optional

import numpy as np

from errors import DataError, GraphError
from distributions import (
    Categorical, OneHotCategorical, TruncatedNormal, Gamma, ConditionalCategorical,
    fit_categorical, fit_truncated_normal, fit_gamma,
)
from models import ModelSpec, TrainConfig, train
from bn_graph import Dag, SampleBatch, topological_order, build_input_schema
from simulate import rep_seed

logger = logging.getLogger(__name__)


def propagate(dag: Dag, batch: SampleBatch, use_gold: bool = False) -> SampleBatch:
    """Run every model node over observed feature rows.

    Model columns of the result hold predicted (argmax) classes and probas the
    simplexes. With use_gold, downstream models are fed the gold label columns
    of their model parents instead of the upstream predictions.
    """
    current = dict(batch.columns)
    probas = {}
    for node_id in topological_order(dag):
        node = dag.node(node_id)
        if node.is_feature:
            if node_id not in current:
                raise DataError(f"no column for feature node {node_id}", column=node_id)
            continue
        if node.model is None:
            raise GraphError(f"model node {node_id} is not trained")
        probs = node.output_proba(current)
        probas[node_id] = probs
        predicted = np.argmax(probs, axis=1).astype(np.int64)
        if use_gold and node_id != dag.output:
            if node_id not in batch:
                raise DataError(f"no gold label column for model node {node_id}", column=node_id)
        else:
            current[node_id] = predicted
    columns = {k: current[k] for k in dag.ids if k in current}
    return SampleBatch(columns, probas)


def predictions(dag: Dag, batch: SampleBatch) -> Dict[str, np.ndarray]:
    """Argmax class of every model node under propagation of predictions"""
    propagated = propagate(dag, batch)
    return {i: np.argmax(p, axis=1) for i, p in propagated.probas.items()}


def node_spec(dag: Dag, node_id: str, architecture: Optional[str] = None) -> ModelSpec:
    node = dag.node(node_id)
    spec = node.spec
    if spec is None:
        spec = ModelSpec('linear', node.n_classes or 2, build_input_schema(dag, node_id))
    if architecture and architecture != spec.architecture:
        spec = replace(spec, architecture=architecture)
    return spec


def train_network(dag: Dag, data: SampleBatch, seed: int, config: Optional[TrainConfig] = None,
                  use_gold: bool = False, rows: Optional[Mapping[str, np.ndarray]] = None,
                  learning_rates: Optional[Mapping[str, float]] = None) -> Dag:
    """Train all model nodes bottom-up from feature columns and one label column per model.

    Node i in topological order trains with seed rep_seed(seed, i). rows may
    restrict a node's training set (e.g. a balanced subset for the top model);
    learning_rates maps architectures to rates when config leaves it unset.
    """
    config = config or TrainConfig()
    order = topological_order(dag)
    model_ids = [i for i in order if dag.node(i).is_model]
    for node_id in order:
        if node_id not in data:
            raise DataError(f"training data has no column for node {node_id}", column=node_id)
    rows = rows or {}
    current = dict(data.columns)
    for i, node_id in enumerate(model_ids):
        node = dag.node(node_id)
        spec = node_spec(dag, node_id)
        inputs = {p: current[p] for p in node.parents}
        labels = np.asarray(data[node_id])
        if node_id in rows:
            idx = rows[node_id]
            inputs = {p: v[idx] for p, v in inputs.items()}
            labels = labels[idx]
        node_config = replace(config, seed=rep_seed(seed, i))
        if config.learning_rate is None and learning_rates and spec.architecture in learning_rates:
            node_config = replace(node_config, learning_rate=learning_rates[spec.architecture])
        model = train(spec, inputs, labels, node_config)
        dag = dag.replace_node(replace(node, model=model, model_spec=spec))
        if not use_gold:
            trained = dag.node(node_id)
            current[node_id] = np.argmax(trained.output_proba(current), axis=1).astype(np.int64)
        logger.info(f"Trained {node_id} ({spec.architecture}) on {labels.size} rows")
    return dag


def _refit(dist, values: np.ndarray, parent_values: Optional[np.ndarray], prior):
    if isinstance(dist, ConditionalCategorical):
        table = {}
        for key, row in dist.table.items():
            mask = np.all(parent_values == np.asarray(key), axis=1)
            counts = np.bincount(values[mask].astype(np.int64), minlength=dist.n_categories)
            table[key] = tuple(counts / counts.sum()) if counts.sum() else row
        return ConditionalCategorical(table, dist.labels)
    if isinstance(dist, Categorical):
        counts = np.bincount(values.astype(np.int64), minlength=dist.n_categories)
        return fit_categorical(counts, prior, dist.labels, onehot=isinstance(dist, OneHotCategorical))
    if isinstance(dist, TruncatedNormal):
        return fit_truncated_normal(values, dist.lo, dist.hi)
    if isinstance(dist, Gamma):
        return fit_gamma(values)
    raise DataError(f"cannot refit distribution of type {type(dist).__name__}")


def fit_feature_nodes(dag: Dag, data: SampleBatch) -> Dag:
    """Replace every feature distribution by its fit to the matching data column"""
    for node in dag.feature_nodes:
        if node.id not in data:
            raise DataError(f"no column for feature node {node.id}", column=node.id)
        parent_values = None
        if node.parents:
            parent_values = np.column_stack([data[p] for p in node.parents])
        dist = _refit(node.dist, np.asarray(data[node.id]), parent_values, node.prior)
        dag = dag.replace_node(replace(node, dist=dist))
    return dag
