#!/usr/bin/env python3
"""
Tests for joint probabilities, exact enumeration, the parameter posterior and RWM
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy import integrate

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import InferenceError
from distributions import Categorical, OneHotCategorical, ConditionalCategorical, Gamma, Dirichlet
from models import ModelSpec, TrainedModel
from bn_graph import Dag, SampleBatch, feature_node, model_node, build_input_schema
from simulate import ancestral_sample
from inference import (
    joint_log_prob, joint_log_prob_batch, exact_output_distribution, total_probability,
    theta_layout, unconstrain, constrain, log_jacobian, theta_from_dag, dag_with_theta,
    make_posterior_target, posterior_log_density,
    McmcConfig, rwm_sample, rwm_sample_chains, constrained_draws, write_chain_csv,
)
from toy_fixture import trained_toy


def copy_network(p=0.3):
    """m reproduces the binary feature x exactly"""
    spec = ModelSpec('linear', 2, (('x', 2),))
    weights = np.array([500.0, -500.0, -500.0, 500.0, 0.0, 0.0])
    return Dag((
        feature_node('x', OneHotCategorical((1 - p, p))),
        model_node('m', ['x'], model=TrainedModel(spec, weights)),
    ), 'm')


def coin_network(prior=(1.0, 1.0)):
    """Binary feature with a Dirichlet prior feeding a uniform model"""
    spec = ModelSpec('linear', 2, (('x', 0),))
    return Dag((
        feature_node('x', Categorical((0.5, 0.5)), prior=Dirichlet(prior)),
        model_node('y', ['x'], model=TrainedModel(spec, np.zeros(spec.n_parameters()))),
    ), 'y')


def random_network(seed):
    rng = np.random.default_rng(seed)
    k1, k2, km, ky = rng.integers(2, 5, size=4)
    f1 = Categorical(tuple(rng.dirichlet(np.ones(k1))))
    table = {(i,): tuple(rng.dirichlet(np.ones(k2))) for i in range(k1)}
    nodes = [
        feature_node('f1', f1),
        feature_node('f2', ConditionalCategorical(table), ['f1']),
        model_node('m', ['f1', 'f2'], classes=tuple(f"c{i}" for i in range(km))),
        model_node('y', ['m', 'f2'], classes=tuple(f"d{i}" for i in range(ky))),
    ]
    dag = Dag(tuple(nodes), 'y')
    for node in list(dag.model_nodes):
        architecture = 'mlp' if rng.random() < 0.5 else 'linear'
        spec = ModelSpec(architecture, node.n_classes, build_input_schema(dag, node.id), hidden=(4,))
        model = TrainedModel(spec, rng.normal(0.0, 1.5, size=spec.n_parameters()))
        dag = dag.replace_node(model_node(node.id, node.parents, model=model, classes=node.classes))
    return dag


def test_independent_binary_features():
    dag = Dag((
        feature_node('a', Categorical((0.5, 0.5))),
        feature_node('b', Categorical((0.5, 0.5))),
    ), 'a')
    assert joint_log_prob(dag, {'a': 0, 'b': 1}) == pytest.approx(math.log(0.25))


def test_contradiction_is_minus_infinity():
    dag = copy_network()
    assert joint_log_prob(dag, {'x': 0, 'm': 1}) == -math.inf
    assert joint_log_prob(dag, {'x': 1, 'm': 1}) == pytest.approx(math.log(0.3), abs=1e-9)


def test_copy_network_output_matches_feature():
    for p in (0.3, 0.75):
        out = exact_output_distribution(copy_network(p))
        assert out.probs == pytest.approx((1 - p, p), abs=1e-9)


def test_assignment_errors():
    dag = copy_network()
    with pytest.raises(InferenceError):
        joint_log_prob(dag, {'x': 0})
    with pytest.raises(InferenceError):
        joint_log_prob(dag, {'x': 0, 'm': 0, 'ghost': 1})
    with pytest.raises(InferenceError):
        joint_log_prob(dag, {'x': 0, 'm': 0.5})
    untrained = Dag((
        feature_node('x', OneHotCategorical((0.5, 0.5))),
        model_node('m', ['x'], ModelSpec('linear', 2, (('x', 2),))),
    ), 'm')
    with pytest.raises(InferenceError):
        joint_log_prob(untrained, {'x': 0, 'm': 0})
    with pytest.raises(InferenceError):
        exact_output_distribution(untrained)


def test_toy_joint_matches_factor_product():
    dag = trained_toy(seed=0)
    assignment = {'x1': 1, 'x2': 0, 'x3': 2, 'm1': 2, 'm2': 1, 'y': 1}
    columns = {k: np.asarray([v]) for k, v in assignment.items()}
    expected = (math.log(dag.node('x1').dist.probs[1])
                + math.log(dag.node('x2').dist.probs[0])
                + math.log(dag.node('x3').dist.probs[2]))
    for node_id in ('m1', 'm2', 'y'):
        expected += math.log(dag.node(node_id).output_proba(columns)[0, assignment[node_id]])
    assert joint_log_prob(dag, assignment) == pytest.approx(expected, abs=1e-9)
    batch = SampleBatch(columns)
    assert joint_log_prob_batch(dag, batch)[0] == pytest.approx(expected, abs=1e-9)


def test_toy_total_probability_and_monte_carlo():
    dag = trained_toy(seed=0)
    assert total_probability(dag) == pytest.approx(1.0, abs=1e-6)
    exact = np.asarray(exact_output_distribution(dag).probs)
    batch = ancestral_sample(dag, 200000, seed=4)
    empirical = np.bincount(batch['y'], minlength=2) / batch.n
    assert np.abs(exact - empirical).sum() <= 0.01


def test_chunked_enumeration_agrees():
    dag = trained_toy(seed=1)
    whole = exact_output_distribution(dag)
    chunked = exact_output_distribution(dag, chunk=7)
    assert np.allclose(whole.probs, chunked.probs, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_random_networks_exact_vs_sampled(seed):
    dag = random_network(seed)
    assert total_probability(dag) == pytest.approx(1.0, abs=1e-6)
    exact = np.asarray(exact_output_distribution(dag).probs)
    batch = ancestral_sample(dag, 200000, seed=100 + seed)
    empirical = np.bincount(batch['y'], minlength=exact.size) / batch.n
    assert np.abs(exact - empirical).sum() <= 0.01


def test_enumeration_limits():
    with pytest.raises(InferenceError):
        exact_output_distribution(trained_toy(seed=0), cap=10)
    continuous = Dag((
        feature_node('g', Gamma(2.0, 1.0)),
        model_node('m', ['g'], model=TrainedModel(ModelSpec('linear', 2, (('g', 0),)), np.zeros(4))),
    ), 'm')
    with pytest.raises(InferenceError):
        exact_output_distribution(continuous)


def test_feature_output_distribution():
    dag = Dag((feature_node('x', Categorical((0.2, 0.5, 0.3), ('a', 'b', 'c'))),), 'x')
    out = exact_output_distribution(dag)
    assert out.probs == pytest.approx((0.2, 0.5, 0.3))
    assert out.labels == ('a', 'b', 'c')


def test_unconstrain_constrain_round_trip():
    layout = theta_layout(Dag((
        feature_node('a', Categorical((0.2, 0.8)), prior=Dirichlet((1.0, 1.0))),
        feature_node('b', OneHotCategorical((0.1, 0.3, 0.6)), prior=Dirichlet((1.0, 1.0, 1.0))),
        feature_node('c', Categorical((0.5, 0.5))),
    ), 'a'))
    assert layout.nodes == ('a', 'b')
    assert layout.dimension == 3
    assert layout.names() == ['a[0]', 'a[1]', 'b[0]', 'b[1]', 'b[2]']
    gen = np.random.default_rng(0)
    for _ in range(1000):
        probs = {'a': gen.dirichlet([1, 1]) + 1e-9, 'b': gen.dirichlet([1, 1, 1]) + 1e-9}
        probs = {k: v / v.sum() for k, v in probs.items()}
        back = constrain(layout, unconstrain(layout, probs))
        for node_id in layout.nodes:
            assert np.allclose(back[node_id], probs[node_id], rtol=0, atol=1e-12)
    with pytest.raises(InferenceError):
        unconstrain(layout, {'a': [1.0, 0.0], 'b': [0.2, 0.3, 0.5]})
    with pytest.raises(InferenceError):
        constrain(layout, np.zeros(2))
    with pytest.raises(InferenceError):
        constrain(layout, np.array([0.0, np.nan, 0.0]))


def test_log_jacobian_matches_finite_difference():
    layout = theta_layout(coin_network())
    z = np.array([0.4])
    h = 1e-6
    derivative = (constrain(layout, z + h)['x'][0] - constrain(layout, z - h)['x'][0]) / (2 * h)
    assert log_jacobian(layout, z) == pytest.approx(math.log(derivative), abs=1e-6)


def test_dag_with_theta_updates_features():
    dag = coin_network()
    theta = unconstrain(theta_layout(dag), {'x': [0.25, 0.75]})
    moved = dag_with_theta(dag, theta)
    assert moved.node('x').dist.probs == pytest.approx((0.25, 0.75))
    assert theta_from_dag(moved) == pytest.approx(theta)


def test_posterior_mode_without_jacobian():
    dag = coin_network()
    data = SampleBatch({'x': np.array([0, 0, 0, 1])})
    target = make_posterior_target(dag, data, include_jacobian=False)
    grid = np.linspace(-4.0, 4.0, 8001)
    best = grid[int(np.argmax([target(np.array([z])) for z in grid]))]
    p = constrain(theta_layout(dag), np.array([best]))['x'][0]
    assert p == pytest.approx(0.75, abs=1e-3)


def test_posterior_with_empty_data_is_prior_plus_jacobian():
    dag = coin_network(prior=(2.0, 3.0))
    layout = theta_layout(dag)
    theta = np.array([0.7])
    p = constrain(layout, theta)['x']
    expected = Dirichlet((2.0, 3.0)).log_pdf(p) + np.sum(np.log(p))
    empty = SampleBatch({'x': np.zeros(0, dtype=np.int64)})
    assert posterior_log_density(dag, empty, theta) == pytest.approx(expected)


def test_mle_is_local_maximum():
    dag = coin_network()
    draws = np.random.default_rng(1).choice(2, size=10000, p=[0.35, 0.65])
    data = SampleBatch({'x': draws, 'y': np.zeros(10000, dtype=np.int64)})
    counts = np.bincount(draws, minlength=2)
    layout = theta_layout(dag)
    mle = unconstrain(layout, {'x': counts / counts.sum()})
    target = make_posterior_target(dag, data, include_jacobian=False)
    peak = target(mle)
    gen = np.random.default_rng(2)
    for _ in range(100):
        assert target(mle + gen.normal(0.0, 0.1, size=mle.size)) <= peak


def test_conjugate_posterior_mean():
    dag = coin_network()
    data = SampleBatch({'x': np.array([0, 0, 0, 1])})
    layout = theta_layout(dag)
    target = make_posterior_target(dag, data, layout)
    result = rwm_sample(target, np.zeros(1), McmcConfig(10000, burn_in=1000, proposal_scale=1.0, seed=5))
    p = constrained_draws(layout, result)['x[0]']
    assert p.mean() == pytest.approx(4 / 6, abs=0.02)


def test_chain_histogram_matches_density():
    dag = coin_network()
    data = SampleBatch({'x': np.array([0, 0, 0, 1])})
    layout = theta_layout(dag)
    target = make_posterior_target(dag, data, layout)
    config = McmcConfig(40000, burn_in=2000, thinning=5, proposal_scale=1.0, seed=6)
    p = constrained_draws(layout, rwm_sample(target, np.zeros(1), config))['x[0]'].to_numpy()
    edges = np.linspace(0.0, 1.0, 11)
    empirical = np.histogram(p, bins=edges)[0] / p.size
    density = lambda q: q ** 3 * (1 - q)
    norm, _ = integrate.quad(density, 0.0, 1.0)
    expected = np.array([integrate.quad(density, lo, hi)[0] for lo, hi in zip(edges[:-1], edges[1:])]) / norm
    assert np.abs(empirical - expected).sum() <= 0.05


def test_standard_normal_target():
    target = lambda z: -0.5 * float(z @ z)
    result = rwm_sample(target, [0.0], McmcConfig(50000, burn_in=1000, proposal_scale=1.0, seed=7))
    assert result.draws.shape == (50000, 1)
    assert result.draws.var() == pytest.approx(1.0, abs=0.1)
    assert 0.2 <= result.acceptance_rate <= 0.8


def test_tiny_scale_accepts_almost_everything():
    target = lambda z: -0.5 * float(z @ z)
    result = rwm_sample(target, [0.0, 0.0], McmcConfig(2000, proposal_scale=1e-8, seed=8))
    assert result.acceptance_rate >= 0.99
    assert result.final_scale == 1e-8


def test_adaptation_only_during_burn_in():
    target = lambda z: -0.5 * float(z @ z)
    frozen = rwm_sample(target, [0.0], McmcConfig(500, burn_in=0, proposal_scale=50.0, seed=9))
    assert frozen.final_scale == 50.0
    adapted = rwm_sample(target, [0.0], McmcConfig(500, burn_in=1000, proposal_scale=50.0, seed=9))
    assert adapted.final_scale < 50.0
    fixed = rwm_sample(target, [0.0], McmcConfig(500, burn_in=1000, proposal_scale=50.0, seed=9, adapt=False))
    assert fixed.final_scale == 50.0


def test_rwm_is_reproducible():
    target = lambda z: -0.5 * float(z @ z)
    config = McmcConfig(300, burn_in=100, seed=10)
    assert np.array_equal(rwm_sample(target, [0.0], config).draws, rwm_sample(target, [0.0], config).draws)


def test_rwm_config_and_init_errors():
    with pytest.raises(InferenceError):
        McmcConfig(0)
    with pytest.raises(InferenceError):
        McmcConfig(10, burn_in=-1)
    with pytest.raises(InferenceError):
        McmcConfig(10, thinning=0)
    with pytest.raises(InferenceError):
        McmcConfig(10, proposal_scale=0.0)
    with pytest.raises(InferenceError):
        rwm_sample(lambda z: -math.inf, [0.0], McmcConfig(10))


def test_chains_use_distinct_seeds():
    target = lambda z: -0.5 * float(z @ z)
    config = McmcConfig(200, burn_in=50, seed=11)
    serial = rwm_sample_chains(target, [0.0], config, n_chains=3)
    threaded = rwm_sample_chains(target, [0.0], config, n_chains=3, workers=3)
    assert len({r.seed for r in serial}) == 3
    assert not np.array_equal(serial[0].draws, serial[1].draws)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.draws, b.draws)


def test_write_chain_csv(tmp_path):
    dag = coin_network()
    layout = theta_layout(dag)
    target = make_posterior_target(dag, SampleBatch({'x': np.array([0, 1])}), layout)
    result = rwm_sample(target, np.zeros(1), McmcConfig(25, seed=12))
    path = tmp_path / 'chain.csv'
    write_chain_csv(layout, result, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == 'x[0],x[1]'
    assert len(lines) == 26
