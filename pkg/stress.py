#!/usr/bin/env python3
"""
Stress tests for a classifier hierarchy
Feature-distribution shift, model replacement and random-label ablation, compared
against the baseline network by output-histogram KL divergence and held-out metrics.
"""

import math
import os
import logging
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from errors import ScenarioError, MetricError, BNStressError
from distributions import ConditionalCategorical, dist_from_json, kl_divergence
from models import TrainedModel, load_model, model_from_json, retrain_random_labels
from bn_graph import Dag, SampleBatch, topological_order
from simulate import PROPAGATION_MODES, SimulationResult, run_simulation, rep_seed
from pipeline import propagate

logger = logging.getLogger(__name__)

SCENARIO_KEYS = {'name', 'description', 'overrides', 'swaps', 'ablate', 'reps', 'samples', 'bins', 'seed',
                 'propagation'}


@dataclass
class Scenario:
    overrides: Dict[str, object] = field(default_factory=dict)
    swaps: Dict[str, TrainedModel] = field(default_factory=dict)
    ablate: Tuple[str, ...] = ()
    reps: Optional[int] = None
    samples: Optional[int] = None
    bins: Optional[int] = None
    seed: Optional[int] = None
    propagation: Optional[str] = None
    name: str = ''
    swap_sources: Dict[str, str] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not (self.overrides or self.swaps or self.ablate)

    def actions(self) -> Dict:
        return {
            'overrides': {k: v.to_json() for k, v in sorted(self.overrides.items())},
            'swaps': {k: self.swap_sources.get(k, 'inline') for k in sorted(self.swaps)},
            'ablate': list(self.ablate),
        }


@dataclass(frozen=True)
class StressSettings:
    """Run parameters of a stress test.

    Feature shifts and swaps sample each model's class from its simplex;
    ablations propagate argmax decisions (ablation_propagation). A model
    retrained on permuted labels keeps the class marginal, which sampling
    passes through unchanged.
    """
    reps: int = 100
    samples: int = 5000
    bins: int = 20
    seed: int = 0
    workers: int = 1
    positive_class: int = 1
    propagation: str = 'sample'
    ablation_propagation: str = 'argmax'
    kl_smoothing: float = 0.0
    use_gold: bool = False

    def for_ablation(self) -> 'StressSettings':
        return replace(self, propagation=self.ablation_propagation)

    def with_scenario(self, scenario: Scenario) -> 'StressSettings':
        settings = self.for_ablation() if scenario.ablate else self
        updates = {k: getattr(scenario, k) for k in ('reps', 'samples', 'bins', 'seed', 'propagation')
                   if getattr(scenario, k) is not None}
        return replace(settings, **updates)


def _int_field(data: Dict, key: str) -> Optional[int]:
    if key not in data:
        return None
    value = data[key]
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ScenarioError(f"{key} must be a non-negative integer", f"/{key}")
    return value


def scenario_from_json(data, base_dir: Optional[str] = None) -> Scenario:
    """Parse a scenario; model swaps are bundle paths (relative to base_dir) or inline bundles"""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object", "")
    for key in data:
        if key not in SCENARIO_KEYS:
            raise ScenarioError(f"unknown scenario key {key!r}", f"/{key}")
    overrides = {}
    for node_id, spec in (data.get('overrides') or {}).items():
        try:
            overrides[node_id] = dist_from_json(spec)
        except (BNStressError, AttributeError, TypeError, ValueError) as e:
            raise ScenarioError(f"invalid distribution: {e}", f"/overrides/{node_id}")
    swaps, sources = {}, {}
    for node_id, ref in (data.get('swaps') or {}).items():
        try:
            if isinstance(ref, str):
                path = ref if os.path.isabs(ref) or not base_dir else os.path.join(base_dir, ref)
                swaps[node_id] = load_model(path)
                sources[node_id] = ref
            else:
                swaps[node_id] = model_from_json(ref)
        except (BNStressError, OSError, ValueError, TypeError, AttributeError) as e:
            raise ScenarioError(f"cannot load replacement model: {e}", f"/swaps/{node_id}")
    ablate = data.get('ablate') or []
    if not isinstance(ablate, list) or not all(isinstance(a, str) for a in ablate):
        raise ScenarioError("ablate must be a list of node ids", "/ablate")
    propagation = data.get('propagation')
    if propagation is not None and propagation not in PROPAGATION_MODES:
        raise ScenarioError(f"propagation must be one of {list(PROPAGATION_MODES)}", "/propagation")
    return Scenario(
        overrides=overrides, swaps=swaps, ablate=tuple(ablate),
        reps=_int_field(data, 'reps'), samples=_int_field(data, 'samples'),
        bins=_int_field(data, 'bins'), seed=_int_field(data, 'seed'), propagation=propagation,
        name=str(data.get('name', '')), swap_sources=sources,
    )


def check_scenario(dag: Dag, scenario: Scenario) -> None:
    """Raise ScenarioError with the JSON pointer of the first entry that does not fit the network"""
    for node_id, dist in scenario.overrides.items():
        pointer = f"/overrides/{node_id}"
        if not dag.has(node_id):
            raise ScenarioError(f"unknown node {node_id}", pointer)
        node = dag.node(node_id)
        if not node.is_feature:
            raise ScenarioError(f"{node_id} is a model node; overrides apply to features", pointer)
        if dist.is_discrete != node.dist.is_discrete:
            raise ScenarioError(f"override of {node_id} changes discrete/continuous support", pointer)
        if dist.is_discrete and dist.n_categories != node.n_classes:
            raise ScenarioError(
                f"override of {node_id} has {dist.n_categories} categories, node has {node.n_classes}", pointer)
        if isinstance(node.dist, ConditionalCategorical) != isinstance(dist, ConditionalCategorical):
            raise ScenarioError(f"override of {node_id} must keep its conditional form", pointer)
    for node_id, model in scenario.swaps.items():
        pointer = f"/swaps/{node_id}"
        if not dag.has(node_id):
            raise ScenarioError(f"unknown node {node_id}", pointer)
        node = dag.node(node_id)
        if not node.is_model:
            raise ScenarioError(f"{node_id} is a feature node; swaps apply to models", pointer)
        if model.spec.parents != node.parents:
            raise ScenarioError(
                f"replacement input schema {list(model.spec.parents)} does not match parents {list(node.parents)}",
                pointer)
        if model.spec.n_classes != node.n_classes:
            raise ScenarioError(f"replacement has {model.spec.n_classes} classes, node has {node.n_classes}",
                                pointer)
    for i, node_id in enumerate(scenario.ablate):
        pointer = f"/ablate/{i}"
        if not dag.has(node_id):
            raise ScenarioError(f"unknown node {node_id}", pointer)
        if not dag.node(node_id).is_model:
            raise ScenarioError(f"{node_id} is a feature node; only models can be ablated", pointer)


def apply_scenario(dag: Dag, scenario: Scenario, train_data: Optional[SampleBatch] = None,
                   seed: int = 0, use_gold: bool = False,
                   rows: Optional[Mapping[str, np.ndarray]] = None) -> Dag:
    """New Dag with overrides substituted, swaps installed and ablated models retrained.

    Ablated models see the same inputs as during training: propagated
    predictions of their model parents (or gold labels with use_gold).
    """
    check_scenario(dag, scenario)
    if scenario.ablate and train_data is None:
        raise ScenarioError("ablation needs training data", "/ablate/0")
    out = dag
    for node_id, dist in scenario.overrides.items():
        out = out.replace_node(replace(out.node(node_id), dist=dist))
    for node_id, model in scenario.swaps.items():
        out = out.replace_node(replace(out.node(node_id), model=model))
    order = topological_order(out)
    for i, node_id in enumerate(sorted(scenario.ablate, key=order.index)):
        node = out.node(node_id)
        if node.model is None:
            raise ScenarioError(f"model node {node_id} is not trained", f"/ablate/{scenario.ablate.index(node_id)}")
        if node_id not in train_data:
            raise ScenarioError(f"training data has no labels for {node_id}",
                                f"/ablate/{scenario.ablate.index(node_id)}")
        inputs = propagate(out, train_data, use_gold).columns
        inputs = {p: inputs[p] for p in node.parents}
        labels = np.asarray(train_data[node_id])
        if rows and node_id in rows:
            inputs = {p: v[rows[node_id]] for p, v in inputs.items()}
            labels = labels[rows[node_id]]
        retrained = retrain_random_labels(node.model, inputs, labels, rep_seed(seed, 1_000_003 + i))
        out = out.replace_node(replace(node, model=retrained))
        logger.info(f"Ablated {node_id}: retrained on permuted labels")
    return out


# Metrics

def auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; tied pairs count one half"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(pred, labels, positive_class: int = 1) -> Dict[str, float]:
    """Precision, recall and F1 of one class; any 0/0 ratio is reported as 0"""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise MetricError(f"{pred.size} predictions for {labels.size} labels")
    predicted = pred == positive_class
    actual = labels == positive_class
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {'precision': precision, 'recall': recall, 'f1': f1}


def balanced_rows(labels, seed: int) -> np.ndarray:
    """Every minority row plus an equal-size uniform draw of majority rows, sorted"""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise MetricError("balancing needs at least two classes")
    n_min = counts.min()
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.append(idx if idx.size == n_min else rng.choice(idx, size=n_min, replace=False))
    return np.sort(np.concatenate(keep))


def evaluate(dag: Dag, eval_batch: SampleBatch, settings: StressSettings) -> Dict:
    """Held-out metrics of the output node and accuracy of every labeled model node"""
    propagated = propagate(dag, eval_batch)
    labels = np.asarray(eval_batch[dag.output])
    probs = propagated.probas[dag.output]
    scores = probs[:, settings.positive_class]
    pred = np.argmax(probs, axis=1)
    metrics = {'auc': auc(scores, labels == settings.positive_class)}
    metrics.update(classification_metrics(pred, labels, settings.positive_class))
    balanced = balanced_rows(labels == settings.positive_class, settings.seed)
    metrics['balanced_recall'] = classification_metrics(
        pred[balanced], labels[balanced], settings.positive_class)['recall']
    metrics['median_positive_prob'] = float(np.median(scores))
    metrics['node_accuracy'] = {
        node_id: float(np.mean(np.argmax(p, axis=1) == eval_batch[node_id]))
        for node_id, p in sorted(propagated.probas.items()) if node_id in eval_batch
    }
    return metrics


# Reports

def _number(x: float):
    if isinstance(x, float) and math.isinf(x):
        return 'inf'
    return x


@dataclass
class StressReport:
    name: str
    baseline: SimulationResult
    scenario: SimulationResult
    kl: float
    kl_per_rep: List[float]
    settings: StressSettings
    actions: Dict
    baseline_metrics: Dict = field(default_factory=dict)
    scenario_metrics: Dict = field(default_factory=dict)

    @property
    def kl_per_rep_mean(self) -> float:
        return float(np.mean(self.kl_per_rep))

    @property
    def kl_per_rep_std(self) -> float:
        values = np.asarray(self.kl_per_rep)
        if np.any(np.isinf(values)):
            return math.inf
        return float(np.std(values))

    @property
    def median_shift(self) -> float:
        return self.scenario.pooled_median - self.baseline.pooled_median

    def delta(self, metric: str) -> Optional[float]:
        if metric not in self.baseline_metrics or metric not in self.scenario_metrics:
            return None
        return self.scenario_metrics[metric] - self.baseline_metrics[metric]

    @property
    def delta_auc(self) -> Optional[float]:
        return self.delta('auc')

    @property
    def node_accuracy(self) -> Dict[str, Dict[str, float]]:
        base = self.baseline_metrics.get('node_accuracy', {})
        scen = self.scenario_metrics.get('node_accuracy', {})
        return {k: {'baseline': base[k], 'scenario': scen[k]} for k in sorted(base) if k in scen}

    def summary(self) -> Dict:
        row = {'scenario': self.name, 'kl': _number(self.kl), 'median_shift': self.median_shift}
        for metric in ('auc', 'recall', 'precision', 'f1', 'balanced_recall'):
            row[f'delta_{metric}'] = self.delta(metric)
        return row

    def to_json(self) -> Dict:
        return {
            'name': self.name,
            'kl': _number(self.kl),
            'kl_per_rep': [_number(float(k)) for k in self.kl_per_rep],
            'kl_per_rep_mean': _number(self.kl_per_rep_mean),
            'kl_per_rep_std': _number(self.kl_per_rep_std),
            'median_shift': self.median_shift,
            'summary': self.summary(),
            'baseline': {'simulation': self.baseline.to_json(), 'metrics': self.baseline_metrics},
            'scenario': {'simulation': self.scenario.to_json(), 'metrics': self.scenario_metrics},
            'node_accuracy': self.node_accuracy,
            'actions': self.actions,
            'settings': asdict(self.settings),
            'seed': self.settings.seed,
        }


def compare(baseline_dag: Dag, scenario_dag: Dag, settings: StressSettings,
            eval_batch: Optional[SampleBatch] = None, name: str = '', actions: Optional[Dict] = None,
            baseline: Optional[SimulationResult] = None) -> StressReport:
    """Simulate both networks with the same per-rep seeds and assemble the report"""
    def simulate_dag(d: Dag) -> SimulationResult:
        return run_simulation(d, settings.reps, settings.samples, settings.bins, settings.seed,
                              settings.workers, settings.positive_class, settings.propagation)

    if baseline is None:
        baseline = simulate_dag(baseline_dag)
    scenario = simulate_dag(scenario_dag)
    if settings.kl_smoothing > 0:
        logger.warning(f"KL smoothing active (pseudo-count {settings.kl_smoothing})")
    kl = kl_divergence(baseline.pooled, scenario.pooled, settings.kl_smoothing)
    per_rep = [kl_divergence(b, s, settings.kl_smoothing)
               for b, s in zip(baseline.histograms, scenario.histograms)]
    report = StressReport(name=name, baseline=baseline, scenario=scenario, kl=kl, kl_per_rep=per_rep,
                          settings=settings, actions=actions or {})
    if eval_batch is not None:
        report.baseline_metrics = evaluate(baseline_dag, eval_batch, settings)
        report.scenario_metrics = evaluate(scenario_dag, eval_batch, settings)
    logger.info(f"Scenario {name or '(unnamed)'}: KL {kl:.4f}, delta AUC {report.delta_auc}")
    return report


def feature_shift_test(dag: Dag, overrides: Mapping[str, object], settings: StressSettings,
                       eval_batch: Optional[SampleBatch] = None, name: str = 'feature_shift') -> StressReport:
    if not overrides:
        raise ScenarioError("feature shift needs at least one override", "/overrides")
    scenario = Scenario(overrides=dict(overrides))
    return compare(dag, apply_scenario(dag, scenario), settings, eval_batch, name, scenario.actions())


def model_swap_test(dag: Dag, node_id: str, replacement: TrainedModel, eval_batch: Optional[SampleBatch],
                    settings: StressSettings, name: str = '') -> StressReport:
    scenario = Scenario(swaps={node_id: replacement})
    return compare(dag, apply_scenario(dag, scenario), settings, eval_batch,
                   name or f"swap_{node_id}", scenario.actions())


def ablation_test(dag: Dag, node_id: str, train_data: SampleBatch, eval_batch: Optional[SampleBatch],
                  settings: StressSettings, rows: Optional[Mapping[str, np.ndarray]] = None,
                  baseline: Optional[SimulationResult] = None, name: str = '') -> StressReport:
    if dag.has(node_id) and not dag.node(node_id).is_model:
        raise ScenarioError(f"{node_id} is a feature node; only models can be ablated", "/ablate/0")
    settings = settings.for_ablation()
    scenario = Scenario(ablate=(node_id,))
    ablated = apply_scenario(dag, scenario, train_data, settings.seed, settings.use_gold, rows)
    return compare(dag, ablated, settings, eval_batch, name or f"ablate_{node_id}",
                   scenario.actions(), baseline)


def run_scenario(dag: Dag, scenario: Scenario, settings: StressSettings,
                 train_data: Optional[SampleBatch] = None, eval_batch: Optional[SampleBatch] = None,
                 rows: Optional[Mapping[str, np.ndarray]] = None) -> StressReport:
    """Apply every action of the scenario at once and compare against the baseline"""
    if scenario.is_empty:
        raise ScenarioError("scenario has no actions", "")
    settings = settings.with_scenario(scenario)
    modified = apply_scenario(dag, scenario, train_data, settings.seed, settings.use_gold, rows)
    return compare(dag, modified, settings, eval_batch, scenario.name or 'scenario', scenario.actions())


def rank_models(dag: Dag, train_data: SampleBatch, eval_batch: SampleBatch, settings: StressSettings,
                rows: Optional[Mapping[str, np.ndarray]] = None) -> List[Tuple[str, StressReport]]:
    """Ablate every non-output model; largest |delta AUC| first"""
    candidates = [n.id for n in dag.model_nodes if n.id != dag.output]
    settings = settings.for_ablation()
    baseline = run_simulation(dag, settings.reps, settings.samples, settings.bins, settings.seed,
                              settings.workers, settings.positive_class, settings.propagation)
    ranked = [(node_id, ablation_test(dag, node_id, train_data, eval_batch, settings, rows, baseline))
              for node_id in sorted(candidates)]
    ranked.sort(key=lambda item: -abs(item[1].delta_auc or 0.0))
    return ranked
