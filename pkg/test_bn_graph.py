#!/usr/bin/env python3
"""
Tests for network structure, validation, traversal and the network JSON schema
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import GraphError
from distributions import Categorical, OneHotCategorical, ConditionalCategorical, Dirichlet
from models import ModelSpec, TrainedModel
from bn_graph import (
    Dag, Node, SampleBatch, feature_node, model_node, validate, topological_order, parents,
    build_input_schema, dag_from_json, dag_to_json, load_network, save_network, describe,
)
from toy_fixture import toy_network
from banksim_data import banksim_network, generate_synthetic, normalize_frame, prepare


def linear_spec(*parent_ids, n_classes=2):
    return ModelSpec('linear', n_classes, tuple((p, 0) for p in parent_ids))


def chain():
    return Dag((
        model_node('y', ['m'], linear_spec('m')),
        model_node('m', ['x'], linear_spec('x')),
        feature_node('x', Categorical((0.5, 0.5))),
    ), 'y')


def test_two_node_cycle():
    dag = Dag((
        model_node('b', ['a'], linear_spec('a')),
        model_node('a', ['b'], linear_spec('b')),
    ), 'a')
    result = validate(dag)
    assert not result.ok
    assert "cycle: a,b" in result.messages()
    with pytest.raises(GraphError):
        topological_order(dag)


def test_unresolved_parent():
    dag = Dag((model_node('m', ['ghost'], linear_spec('ghost')),), 'm')
    result = validate(dag)
    assert [v.rule for v in result.violations] == ['unresolved parent']
    assert result.violations[0].node == 'm'


def test_toy_network_is_valid():
    assert validate(toy_network()).ok
    assert validate(toy_network('nonlinear')).ok


def test_structural_rules():
    x = feature_node('x', Categorical((0.5, 0.5)))
    rules = lambda dag: {v.rule for v in validate(dag).violations}
    assert 'duplicate id' in rules(Dag((x, x), 'x'))
    assert 'empty id' in rules(Dag((feature_node('', Categorical((1.0,))),), 'x'))
    assert 'output' in rules(Dag((x,), 'nowhere'))
    assert 'output' in rules(Dag((x,), 'x'))
    assert 'model parents' in rules(Dag((x, model_node('m', [], None)), 'm'))
    assert 'model spec' in rules(Dag((x, model_node('m', ['x'])), 'm'))


def test_semantic_rules():
    x = feature_node('x', Categorical((0.5, 0.5)))
    m = model_node('m', ['x'], linear_spec('x'))
    wrong_schema = model_node('m', ['x'], linear_spec('z'))
    assert [v.rule for v in validate(Dag((x, wrong_schema), 'm')).violations] == ['input schema']
    one_hot_mismatch = model_node('m', ['x'], ModelSpec('linear', 2, (('x', 3),)))
    assert 'input schema' in {v.rule for v in validate(Dag((x, one_hot_mismatch), 'm')).violations}
    bad_classes = model_node('m', ['x'], linear_spec('x'), classes=('a', 'b', 'c'))
    assert 'classes' in {v.rule for v in validate(Dag((x, bad_classes), 'm')).violations}
    bad_prior = feature_node('x', Categorical((0.5, 0.5)), prior=Dirichlet((1.0, 1.0, 1.0)))
    assert 'prior' in {v.rule for v in validate(Dag((bad_prior, m), 'm')).violations}
    with_parent = feature_node('z', Categorical((0.5, 0.5)), parents=['x'])
    assert 'feature parents' in {v.rule for v in validate(Dag((x, with_parent, m), 'm')).violations}


def test_conditional_feature_rules():
    x = feature_node('x', Categorical((0.5, 0.5)))
    full = ConditionalCategorical({(0,): (0.9, 0.1), (1,): (0.3, 0.7)})
    partial = ConditionalCategorical({(0,): (0.9, 0.1)})
    m = model_node('m', ['z'], linear_spec('z'))
    assert validate(Dag((x, feature_node('z', full, ['x']), m), 'm')).ok
    result = validate(Dag((x, feature_node('z', partial, ['x']), m), 'm'))
    assert 'conditional table' in {v.rule for v in result.violations}
    orphan = validate(Dag((feature_node('z', full), m), 'm'))
    assert 'conditional parent' in {v.rule for v in orphan.violations}


def test_validate_is_total():
    broken = Dag((Node(id='x', kind='feature', parents=None, dist=Categorical((1.0,))),), 'x')
    result = validate(broken)
    assert not result.ok
    odd_kind = Dag((Node(id='q', kind='sensor'),), 'q')
    assert 'kind' in {v.rule for v in validate(odd_kind).violations}


def test_topological_order():
    single = Dag((model_node('m', ['m'], linear_spec('m')),), 'm')
    assert not validate(single).ok
    assert topological_order(Dag((feature_node('x', Categorical((1.0,))),), 'x')) == ['x']
    assert topological_order(chain()) == ['x', 'm', 'y']
    order = topological_order(toy_network())
    pos = {k: i for i, k in enumerate(order)}
    assert max(pos['x1'], pos['x2'], pos['x3']) < min(pos['m1'], pos['m2'])
    assert max(pos['m1'], pos['m2']) < pos['y']
    assert order == ['x1', 'x2', 'x3', 'm1', 'm2', 'y']


def test_topological_order_respects_parents():
    dag = toy_network()
    order = topological_order(dag)
    assert sorted(order) == sorted(dag.ids)
    for node in dag.nodes:
        for p in node.parents:
            assert order.index(p) < order.index(node.id)


def test_parents():
    dag = toy_network()
    assert parents(dag, 'x1') == []
    assert parents(dag, 'y') == ['m1', 'm2']
    with pytest.raises(GraphError):
        parents(dag, 'nope')


def test_banksim_parents():
    split = prepare(normalize_frame(generate_synthetic(3000, seed=1)), seed=1)
    dag = banksim_network(split.dists)
    assert parents(dag, 'y') == ['m1', 'x1', 'x2', 'x3', 'm2']
    assert validate(dag).ok


def test_build_input_schema():
    dag = toy_network()
    assert build_input_schema(dag, 'm1') == (('x1', 0),)
    assert build_input_schema(dag, 'm2') == (('x2', 3), ('x3', 3))
    assert build_input_schema(dag, 'y') == (('m1', 3), ('m2', 2))


def test_node_output_proba_prior_mixture():
    spec = linear_spec('x')
    model = TrainedModel(spec, np.array([10.0, -10.0, 0.0, 0.0]))
    node = model_node('m', ['x'], model=model, prior=Dirichlet((1.0, 1.0)), prior_weight=0.5)
    probs = node.output_proba({'x': np.array([1.0])})
    assert probs[0] == pytest.approx([0.75, 0.25], abs=1e-4)
    with pytest.raises(GraphError):
        model_node('u', ['x'], spec).output_proba({'x': np.array([1.0])})


def test_sample_batch():
    batch = SampleBatch({'a': np.arange(4), 'b': np.ones(4)})
    assert batch.n == 4 and 'a' in batch
    assert batch.subset(np.array([0, 2]))['a'].tolist() == [0, 2]
    extended = batch.with_column('c', np.zeros(4), proba=np.full((4, 2), 0.5))
    assert 'c' in extended.probas
    assert SampleBatch.from_frame(extended.to_frame())['c'].tolist() == [0, 0, 0, 0]
    with pytest.raises(GraphError):
        batch['missing']
    with pytest.raises(GraphError):
        SampleBatch({'a': np.arange(3), 'b': np.arange(4)})


def test_dag_accessors():
    dag = toy_network()
    assert len(dag.model_nodes) == 3 and len(dag.feature_nodes) == 3
    assert dag.children('x1') == ['m1']
    with pytest.raises(GraphError):
        dag.node('missing')
    assert 'output y' in describe(dag)


def test_network_json_round_trip(tmp_path):
    dag = toy_network()
    path = tmp_path / 'toy.json'
    save_network(dag, str(path))
    loaded = load_network(str(path))
    assert validate(loaded).ok == validate(dag).ok
    assert topological_order(loaded) == topological_order(dag)
    assert dag_to_json(loaded) == dag_to_json(dag)


def test_network_json_minimal_schema():
    doc = {
        "nodes": [
            {"id": "x", "kind": "feature", "dist": {"type": "onehot", "probs": [0.2, 0.8]}},
            {"id": "y", "kind": "model", "parents": ["x"], "model": {"architecture": "linear"},
             "classes": ["neg", "pos", "unk"]},
        ],
        "output": "y",
    }
    dag = dag_from_json(doc)
    assert dag.node('y').spec.n_classes == 3
    assert dag.node('y').spec.input_schema == (('x', 2),)
    assert validate(dag).ok


def test_network_json_errors(tmp_path):
    with pytest.raises(GraphError):
        dag_from_json({"nodes": []})
    with pytest.raises(GraphError):
        dag_from_json({"nodes": [{"id": "x"}], "output": "x"})
    with pytest.raises(GraphError):
        dag_from_json({"nodes": [{"id": "x", "kind": "feature"}], "output": "x"})
    bad = tmp_path / 'bad.json'
    bad.write_text('{"nodes": [')
    with pytest.raises(json.JSONDecodeError):
        load_network(str(bad))
