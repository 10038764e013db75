#!/usr/bin/env python3
"""
Ancestral sampling through the network
Features are drawn from their distributions, models run on the sampled parents,
and repetitions are replicated deterministically across worker threads.
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from errors import GraphError, DistributionError
from distributions import ConditionalCategorical, Histogram, draw_rows, merge_histograms
from bn_graph import Dag, SampleBatch, validate, topological_order

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
PROPAGATION_MODES = ('sample', 'argmax')


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer"""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def rep_seed(seed: int, rep: int) -> int:
    """Child seed of repetition `rep`: splitmix64(seed xor splitmix64(rep))"""
    return splitmix64((int(seed) & MASK64) ^ splitmix64(int(rep)))


def ancestral_sample(dag: Dag, n: int, seed: int, propagation: str = 'sample',
                     trace: Optional[List[str]] = None) -> SampleBatch:
    """Draw n joint samples in topological order.

    Model nodes store their class simplex; with propagation='sample' the class
    is drawn from it, with 'argmax' the most probable class is passed on.
    """
    if propagation not in PROPAGATION_MODES:
        raise ValueError(f"propagation must be one of {PROPAGATION_MODES}, got {propagation!r}")
    result = validate(dag)
    if not result.ok:
        raise GraphError(f"invalid network: {'; '.join(result.messages())}")
    rng = np.random.default_rng(seed)
    columns: Dict[str, np.ndarray] = {}
    probas: Dict[str, np.ndarray] = {}
    for node_id in topological_order(dag):
        node = dag.node(node_id)
        if trace is not None:
            trace.append(node_id)
        if node.is_feature:
            parent_values = None
            if isinstance(node.dist, ConditionalCategorical):
                parent_values = np.column_stack([columns[p] for p in node.parents])
            columns[node_id] = node.dist.sample(rng, n, parent_values)
        else:
            if node.model is None:
                raise GraphError(f"model node {node_id} is not trained")
            probs = node.output_proba(columns)
            probas[node_id] = probs
            if propagation == 'sample':
                columns[node_id] = draw_rows(rng, probs)
            else:
                columns[node_id] = np.argmax(probs, axis=1).astype(np.int64)
    return SampleBatch(columns, probas)


def output_statistic(probs: np.ndarray, positive_class: int = 1) -> np.ndarray:
    """Positive-class probability for binary outputs, max-class probability otherwise"""
    probs = np.asarray(probs)
    if probs.shape[1] == 2:
        return probs[:, positive_class]
    return probs.max(axis=1)


def histogram(values, bins: int) -> Histogram:
    """Uniform bins on [0, 1], half-open [lo, hi) with the last bin closed"""
    if bins < 1:
        raise DistributionError(f"bins must be >= 1, got {bins}")
    values = np.asarray(values, dtype=float)
    if np.any(values < 0) or np.any(values > 1) or np.any(np.isnan(values)):
        raise DistributionError("histogram values must lie within [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side='right') - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(tuple(edges), tuple(int(c) for c in counts))


@dataclass
class SimulationResult:
    reps: int
    samples_per_rep: int
    bins: int
    seed: int
    propagation: str
    histograms: List[Histogram]
    class_frequencies: np.ndarray
    medians: List[float]
    values: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def pooled(self) -> Histogram:
        return merge_histograms(self.histograms)

    @property
    def pooled_median(self) -> float:
        if self.values:
            return float(np.median(np.concatenate(self.values)))
        return float(np.median(self.medians))

    @property
    def mean_frequencies(self) -> np.ndarray:
        return np.mean([h.frequencies for h in self.histograms], axis=0)

    def to_json(self) -> Dict:
        return {
            'reps': self.reps,
            'samples_per_rep': self.samples_per_rep,
            'bins': self.bins,
            'seed': self.seed,
            'propagation': self.propagation,
            'pooled_histogram': self.pooled.to_json(),
            'histograms': [h.to_json() for h in self.histograms],
            'class_frequencies': self.class_frequencies.tolist(),
            'medians': self.medians,
            'pooled_median': self.pooled_median,
        }


def _run_rep(dag: Dag, rep: int, n: int, bins: int, seed: int, positive_class: int, propagation: str):
    batch = ancestral_sample(dag, n, rep_seed(seed, rep), propagation)
    out = dag.node(dag.output)
    stat = output_statistic(batch.probas[dag.output], positive_class)
    freqs = np.bincount(batch[dag.output], minlength=out.n_classes) / max(n, 1)
    median = float(np.median(stat)) if n else float('nan')
    logger.debug(f"rep {rep}: median output statistic {median:.4f}")
    return histogram(stat, bins), freqs, median, stat


def run_simulation(dag: Dag, reps: int, n: int, bins: int, seed: int, workers: int = 1,
                   positive_class: int = 1, propagation: str = 'sample') -> SimulationResult:
    """Replicated ancestral sampling; results do not depend on the worker count"""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if n < 0:
        raise ValueError(f"samples must be >= 0, got {n}")

    def job(rep: int):
        return _run_rep(dag, rep, n, bins, seed, positive_class, propagation)

    if workers <= 1:
        outputs = [job(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(job, range(reps)))
    logger.info(f"Simulated {reps} reps x {n} samples (seed {seed}, {workers} worker(s))")
    return SimulationResult(
        reps=reps,
        samples_per_rep=n,
        bins=bins,
        seed=seed,
        propagation=propagation,
        histograms=[o[0] for o in outputs],
        class_frequencies=np.vstack([o[1] for o in outputs]),
        medians=[o[2] for o in outputs],
        values=[o[3] for o in outputs],
    )


def histogram_frame(hist: Histogram) -> pd.DataFrame:
    edges = np.asarray(hist.bin_edges)
    return pd.DataFrame({
        'bin_lo': edges[:-1],
        'bin_hi': edges[1:],
        'count': list(hist.counts),
        'frequency': hist.frequencies,
    })


def write_histogram_csv(hist: Histogram, path: str) -> None:
    histogram_frame(hist).to_csv(path, index=False, float_format='%.17g')


def write_simulation_csvs(result: SimulationResult, directory: str, prefix: str = 'baseline',
                          per_rep: bool = False) -> List[str]:
    """Pooled histogram and mean-frequency files, optionally one file per rep"""
    os.makedirs(directory, exist_ok=True)
    written = []
    pooled_path = os.path.join(directory, f"{prefix}_pooled.csv")
    write_histogram_csv(result.pooled, pooled_path)
    written.append(pooled_path)

    mean = histogram_frame(result.pooled).drop(columns=['count', 'frequency'])
    mean['mean_frequency'] = result.mean_frequencies
    mean_path = os.path.join(directory, f"{prefix}_mean_frequency.csv")
    mean.to_csv(mean_path, index=False, float_format='%.17g')
    written.append(mean_path)

    if per_rep:
        for r, hist in enumerate(result.histograms):
            path = os.path.join(directory, f"{prefix}_rep{r:04d}.csv")
            write_histogram_csv(hist, path)
            written.append(path)
    logger.info(f"Wrote {len(written)} histogram file(s) to {directory}")
    return written
