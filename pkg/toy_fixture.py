#!/usr/bin/env python3
"""
Bundled toy hierarchy
Three categorical features feed two classifiers whose outputs feed the top model:
x1 -> m1, (x2, x3) -> m2, (m1, m2) -> y. A gold generative process supplies labeled
data; m2 carries the fraud signal, m1 only a weak one.
"""

import os
import sys
import json
import argparse
import logging
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from distributions import Categorical, OneHotCategorical, ConditionalCategorical
from models import ModelSpec, TrainConfig
from bn_graph import Dag, SampleBatch, feature_node, model_node, build_input_schema, save_network
from pipeline import train_network

logger = logging.getLogger(__name__)

VARIANTS = ('linear', 'nonlinear')

# Gold logit contributions per category; m2 is close to a deterministic rule
M2_X2 = {'linear': (6.0, 0.0, -6.0), 'nonlinear': (-4.0, 4.0, -4.0)}
M2_X3 = {'linear': (-6.0, 0.0, 6.0), 'nonlinear': (0.0, 0.0, 8.0)}
M2_BIAS = {'linear': 3.0, 'nonlinear': -1.0}
M1_TABLE = {(0,): (0.7, 0.2, 0.1), (1,): (0.1, 0.2, 0.7)}
Y_BIAS, Y_M2, Y_M1 = -2.0, 4.0, 0.7

OVERRIDES = {
    'x1': Categorical((0.9, 0.1)),
    'x2': OneHotCategorical((0.6, 0.3, 0.1)),
    'x3': OneHotCategorical((0.1, 0.2, 0.7)),
}


def _features(variant: str):
    if variant == 'linear':
        return (Categorical((0.1, 0.9)),
                OneHotCategorical((0.1, 0.3, 0.6)),
                OneHotCategorical((0.7, 0.2, 0.1)))
    return (Categorical((0.1, 0.9)),
            Categorical((0.35, 0.3, 0.35)),
            OneHotCategorical((0.5, 0.35, 0.15)))


def toy_network(variant: str = 'linear', architectures: Optional[Dict[str, str]] = None) -> Dag:
    """Untrained toy network; every model linear unless overridden per node"""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    architectures = architectures or {}
    x1, x2, x3 = _features(variant)
    dag = Dag((
        feature_node('x1', x1), feature_node('x2', x2), feature_node('x3', x3),
        model_node('m1', ['x1'], classes=('low', 'mid', 'high')),
        model_node('m2', ['x2', 'x3'], classes=('neg', 'pos')),
        model_node('y', ['m1', 'm2'], classes=('neg', 'pos')),
    ), 'y')
    for node in list(dag.model_nodes):
        spec = ModelSpec(architectures.get(node.id, 'linear'), node.n_classes, build_input_schema(dag, node.id))
        dag = dag.replace_node(model_node(node.id, node.parents, spec=spec, classes=node.classes))
    return dag


def m2_gold_proba(variant: str, x2: np.ndarray, x3: np.ndarray) -> np.ndarray:
    logit = M2_BIAS[variant] + np.asarray(M2_X2[variant])[x2] + np.asarray(M2_X3[variant])[x3]
    return expit(logit)


def generate(n: int, seed: int, variant: str = 'linear', features: Optional[Dict] = None) -> SampleBatch:
    """Labeled rows from the gold process; features may be replaced by shifted distributions"""
    rng = np.random.default_rng(seed)
    x1d, x2d, x3d = _features(variant)
    features = features or {}
    x1 = features.get('x1', x1d).sample(rng, n)
    x2 = features.get('x2', x2d).sample(rng, n)
    x3 = features.get('x3', x3d).sample(rng, n)
    m1 = ConditionalCategorical(M1_TABLE).sample(rng, n, x1)
    p_m2 = m2_gold_proba(variant, x2, x3)
    m2 = (rng.random(n) < p_m2).astype(np.int64)
    p_y = expit(Y_BIAS + Y_M2 * m2 + Y_M1 * (m1 - 1))
    y = (rng.random(n) < p_y).astype(np.int64)
    return SampleBatch({'x1': x1, 'x2': x2, 'x3': x3, 'm1': m1, 'm2': m2, 'y': y})


def trained_toy(seed: int = 0, variant: str = 'linear', n_train: int = 5000,
                architectures: Optional[Dict[str, str]] = None, config: Optional[TrainConfig] = None) -> Dag:
    """Toy network trained bottom-up; the nonlinear variant trains y on gold parent labels"""
    dag = toy_network(variant, architectures)
    data = generate(n_train, seed, variant)
    return train_network(dag, data, seed, config, use_gold=(variant == 'nonlinear'))


def scenarios() -> Dict[str, Dict]:
    """Scenario documents shipped with the toy network"""
    shifted = {name: dist.to_json() for name, dist in OVERRIDES.items()}
    return {
        'shift_x3': {'name': 'shift_x3', 'overrides': {'x3': shifted['x3']}},
        'shift_x1': {'name': 'shift_x1', 'overrides': {'x1': shifted['x1']}},
        'shift_x2': {'name': 'shift_x2', 'overrides': {'x2': shifted['x2']}},
        'shift_all': {'name': 'shift_all', 'overrides': shifted},
        'ablate_m1': {'name': 'ablate_m1', 'ablate': ['m1']},
        'ablate_m2': {'name': 'ablate_m2', 'ablate': ['m2']},
    }


def write_csv(batch: SampleBatch, path: str) -> None:
    batch.to_frame()[['x1', 'x2', 'x3', 'm1', 'm2', 'y']].to_csv(path, index=False)


def write_fixture(directory: str, seed: int, n_train: int = 5000, n_eval: int = 20000,
                  variant: str = 'linear') -> Dict[str, str]:
    """Network, train/eval CSVs and scenario files for the CLI"""
    os.makedirs(os.path.join(directory, 'scenarios'), exist_ok=True)
    paths = {
        'network': os.path.join(directory, f'toy_{variant}.json'),
        'train': os.path.join(directory, f'toy_{variant}_train.csv'),
        'eval': os.path.join(directory, f'toy_{variant}_eval.csv'),
    }
    save_network(toy_network(variant), paths['network'])
    write_csv(generate(n_train, seed, variant), paths['train'])
    write_csv(generate(n_eval, seed + 1, variant), paths['eval'])
    for name, doc in scenarios().items():
        path = os.path.join(directory, 'scenarios', f'{name}.json')
        with open(path, 'w') as f:
            json.dump(doc, f, indent=2, sort_keys=True)
        paths[name] = path
    logger.info(f"Wrote toy fixture ({variant}) to {directory}")
    return paths


def main():
    parser = argparse.ArgumentParser(description='Write the toy network, labeled data and scenarios')
    parser.add_argument('--out', required=True, help='Output directory')
    parser.add_argument('--seed', type=int, required=True, help='Data seed')
    parser.add_argument('--variant', choices=VARIANTS, default='linear')
    parser.add_argument('--train-rows', type=int, default=5000)
    parser.add_argument('--eval-rows', type=int, default=20000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    for name, path in write_fixture(args.out, args.seed, args.train_rows, args.eval_rows, args.variant).items():
        print(f"{name:10s} {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
