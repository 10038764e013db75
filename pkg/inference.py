#!/usr/bin/env python3
"""
Inference over the network
Joint log-probability of assignments, exact enumeration of the output marginal,
the log-posterior over prior-carrying feature parameters, and Random Walk Metropolis.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import InferenceError, BNStressError
from distributions import Categorical, OneHotCategorical, ConditionalCategorical, log_prob
from bn_graph import Dag, Node, SampleBatch, topological_order

logger = logging.getLogger(__name__)

ENUM_CAP = 10 ** 7
ENUM_CHUNK = 200_000
PROB_CLAMP = 1e-12


def _require_trained(node: Node) -> None:
    if node.is_model and node.model is None:
        raise InferenceError(f"model node {node.id} is not trained")


def _node_log_prob_batch(node: Node, columns: Mapping[str, np.ndarray], clamp: bool = False) -> np.ndarray:
    values = columns[node.id]
    if node.is_feature:
        parent_values = None
        if isinstance(node.dist, ConditionalCategorical):
            parent_values = np.column_stack([columns[p] for p in node.parents])
        return node.dist.log_prob_array(values, parent_values)
    _require_trained(node)
    probs = node.output_proba(columns)
    idx = np.asarray(values, dtype=np.int64)
    inside = (idx >= 0) & (idx < probs.shape[1]) & (idx == values)
    picked = np.zeros(len(idx))
    picked[inside] = probs[np.flatnonzero(inside), idx[inside]]
    if clamp:
        picked = np.clip(picked, PROB_CLAMP, 1.0 - PROB_CLAMP)
        picked[~inside] = 0.0
    with np.errstate(divide='ignore'):
        return np.log(picked)


def joint_log_prob_batch(dag: Dag, batch: SampleBatch) -> np.ndarray:
    """Per-row Σ log P(v_i | A_i) over all nodes, without prior terms"""
    order = topological_order(dag)
    missing = [i for i in order if i not in batch]
    if missing:
        raise InferenceError(f"incomplete assignment: missing {', '.join(missing)}")
    total = np.zeros(batch.n)
    for node_id in order:
        total += _node_log_prob_batch(dag.node(node_id), batch.columns)
    return total


def joint_log_prob(dag: Dag, assignment: Mapping[str, object], include_priors: bool = True) -> float:
    """Log of the joint probability of one complete assignment.

    Contradictions (zero-probability entries) give -inf. Prior terms are added
    for feature nodes that carry a Dirichlet prior.
    """
    order = topological_order(dag)
    missing = [i for i in order if i not in assignment]
    extra = sorted(set(assignment) - set(order))
    if missing or extra:
        raise InferenceError(f"incomplete assignment: missing {missing}, unknown {extra}")
    total = 0.0
    for node_id in order:
        node = dag.node(node_id)
        value = assignment[node_id]
        if node.is_feature:
            parent_values = [assignment[p] for p in node.parents] if node.parents else None
            total += log_prob(node.dist, value, parent_values)
            if include_priors and node.prior is not None:
                total += node.prior.log_pdf(node.dist.probs)
        else:
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise InferenceError(f"model node {node_id} needs a class index, got {value!r}")
            columns = {k: np.asarray([v]) for k, v in assignment.items()}
            total += float(_node_log_prob_batch(node, columns)[0])
    return total


def _discrete_shape(dag: Dag, order: Sequence[str]) -> Tuple[int, ...]:
    shape = []
    for node_id in order:
        node = dag.node(node_id)
        if not node.is_discrete or node.n_classes is None:
            raise InferenceError(f"exact enumeration needs discrete nodes; {node_id} is continuous")
        _require_trained(node)
        shape.append(node.n_classes)
    return tuple(shape)


def _enumerate(dag: Dag, cap: int, chunk: int) -> Tuple[np.ndarray, float]:
    order = topological_order(dag)
    shape = _discrete_shape(dag, order)
    n_states = math.prod(shape)
    if n_states > cap:
        raise InferenceError(f"joint state space {n_states} exceeds the enumeration cap {cap}")
    out_pos = order.index(dag.output)
    mass = np.zeros(shape[out_pos])
    for start in range(0, n_states, chunk):
        flat = np.arange(start, min(start + chunk, n_states))
        digits = np.unravel_index(flat, shape)
        batch = SampleBatch({node_id: digits[i].astype(np.int64) for i, node_id in enumerate(order)})
        weights = np.exp(joint_log_prob_batch(dag, batch))
        mass += np.bincount(digits[out_pos], weights=weights, minlength=shape[out_pos])
    logger.debug(f"Enumerated {n_states} joint states")
    return mass, float(mass.sum())


def total_probability(dag: Dag, cap: int = ENUM_CAP) -> float:
    return _enumerate(dag, cap, ENUM_CHUNK)[1]


def exact_output_distribution(dag: Dag, cap: int = ENUM_CAP, chunk: int = ENUM_CHUNK) -> Categorical:
    mass, total = _enumerate(dag, cap, chunk)
    if total <= 0:
        raise InferenceError("joint distribution has no mass")
    return Categorical(tuple(mass / total), dag.node(dag.output).labels)


# Parameter vector over prior-carrying features

@dataclass(frozen=True)
class ThetaLayout:
    """Feature nodes with Dirichlet priors, lexical order, k-1 log-ratio coordinates each"""

    nodes: Tuple[str, ...]
    sizes: Tuple[int, ...]
    labels: Tuple[Tuple[str, ...], ...]

    @property
    def dimension(self) -> int:
        return sum(k - 1 for k in self.sizes)

    def slices(self) -> List[slice]:
        out, offset = [], 0
        for k in self.sizes:
            out.append(slice(offset, offset + k - 1))
            offset += k - 1
        return out

    def names(self) -> List[str]:
        return [f"{node}[{label}]" for node, labels in zip(self.nodes, self.labels) for label in labels]


def theta_layout(dag: Dag) -> ThetaLayout:
    carriers = sorted(
        (n for n in dag.feature_nodes
         if n.prior is not None and isinstance(n.dist, (Categorical, OneHotCategorical))),
        key=lambda n: n.id)
    return ThetaLayout(tuple(n.id for n in carriers),
                       tuple(n.dist.n_categories for n in carriers),
                       tuple(n.dist.labels for n in carriers))


def unconstrain(layout: ThetaLayout, probs: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Additive log-ratio against the last category"""
    parts = []
    for node_id, k in zip(layout.nodes, layout.sizes):
        p = np.asarray(probs[node_id], dtype=float)
        if p.shape != (k,) or np.any(p <= 0):
            raise InferenceError(f"{node_id}: probabilities must be {k} strictly positive entries")
        parts.append(np.log(p[:-1]) - np.log(p[-1]))
    return np.concatenate(parts) if parts else np.zeros(0)


def constrain(layout: ThetaLayout, theta: np.ndarray) -> Dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.dimension,):
        raise InferenceError(f"theta has {theta.size} entries, layout needs {layout.dimension}")
    if not np.all(np.isfinite(theta)):
        raise InferenceError("non-finite theta")
    out = {}
    for node_id, sl in zip(layout.nodes, layout.slices()):
        z = np.append(theta[sl], 0.0)
        e = np.exp(z - z.max())
        out[node_id] = e / e.sum()
    return out


def log_jacobian(layout: ThetaLayout, theta: np.ndarray) -> float:
    # |d p_{1..k-1} / d z| = prod_k p_k for the log-ratio map
    return float(sum(np.sum(np.log(p)) for p in constrain(layout, theta).values()))


def theta_from_dag(dag: Dag, layout: Optional[ThetaLayout] = None) -> np.ndarray:
    layout = layout or theta_layout(dag)
    return unconstrain(layout, {i: dag.node(i).dist.probs for i in layout.nodes})


def dag_with_theta(dag: Dag, theta: np.ndarray, layout: Optional[ThetaLayout] = None) -> Dag:
    layout = layout or theta_layout(dag)
    for node_id, p in constrain(layout, theta).items():
        node = dag.node(node_id)
        dag = dag.replace_node(replace(node, dist=type(node.dist)(tuple(p / p.sum()), node.dist.labels)))
    return dag


def make_posterior_target(dag: Dag, data: SampleBatch, layout: Optional[ThetaLayout] = None,
                          include_jacobian: bool = True) -> Callable[[np.ndarray], float]:
    """Closure over sufficient statistics; the theta-free likelihood terms are computed once"""
    layout = layout or theta_layout(dag)
    carried = set(layout.nodes)
    counts = {}
    for node_id, k in zip(layout.nodes, layout.sizes):
        if node_id in data:
            counts[node_id] = np.bincount(np.asarray(data[node_id], dtype=np.int64), minlength=k)[:k]
        else:
            counts[node_id] = np.zeros(k)
    fixed = 0.0
    if data.n:
        for node in dag.nodes:
            if node.id in carried or node.id not in data:
                continue
            if any(p not in data for p in node.parents):
                continue
            fixed += float(np.sum(_node_log_prob_batch(node, data.columns, clamp=node.is_model)))
    priors = {node_id: dag.node(node_id).prior for node_id in layout.nodes}

    def target(theta: np.ndarray) -> float:
        probs = constrain(layout, theta)
        total = fixed
        for node_id, p in probs.items():
            total += float(np.dot(counts[node_id], np.log(p)))
            total += priors[node_id].log_pdf(p)
            if include_jacobian:
                total += float(np.sum(np.log(p)))
        return total

    return target


def posterior_log_density(dag: Dag, data: SampleBatch, theta: np.ndarray,
                          include_jacobian: bool = True) -> float:
    """Log-likelihood of observed columns plus log-priors plus the log-Jacobian"""
    return make_posterior_target(dag, data, include_jacobian=include_jacobian)(theta)


# Random Walk Metropolis

@dataclass(frozen=True)
class McmcConfig:
    n_samples: int
    burn_in: int = 0
    thinning: int = 1
    proposal_scale: float = 0.1
    seed: int = 0
    adapt: bool = True
    adapt_window: int = 50

    def __post_init__(self):
        if self.n_samples <= 0:
            raise InferenceError("n_samples must be > 0")
        if self.burn_in < 0:
            raise InferenceError("burn_in must be >= 0")
        if self.thinning < 1:
            raise InferenceError("thinning must be >= 1")
        if not self.proposal_scale > 0:
            raise InferenceError(f"proposal_scale must be > 0, got {self.proposal_scale}")


@dataclass
class McmcResult:
    draws: np.ndarray
    log_densities: np.ndarray
    acceptance_rate: float
    final_scale: float
    seed: int


def rwm_sample(target: Callable[[np.ndarray], float], init, config: McmcConfig) -> McmcResult:
    """Isotropic Gaussian random walk in unconstrained space.

    During burn-in the scale is multiplied by 1.1 after a window with acceptance
    above 0.5 and by 0.9 below 0.2; it is frozen afterwards.
    """
    rng = np.random.default_rng(config.seed)
    current = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    current_lp = target(current)
    if not math.isfinite(current_lp):
        raise InferenceError("target density is not finite at the initial point")
    scale = config.proposal_scale
    total = config.burn_in + config.n_samples * config.thinning
    draws = np.empty((config.n_samples, current.size))
    lps = np.empty(config.n_samples)
    window_accepts = 0
    accepted = 0
    kept = 0
    for it in range(total):
        proposal = current + scale * rng.standard_normal(current.size)
        try:
            proposal_lp = target(proposal)
        except BNStressError:
            proposal_lp = -math.inf
        accept = math.log(1.0 - rng.random()) < proposal_lp - current_lp
        if accept:
            current, current_lp = proposal, proposal_lp
        if it < config.burn_in:
            window_accepts += accept
            if config.adapt and (it + 1) % config.adapt_window == 0:
                rate = window_accepts / config.adapt_window
                if rate > 0.5:
                    scale *= 1.1
                elif rate < 0.2:
                    scale *= 0.9
                window_accepts = 0
            continue
        accepted += accept
        if (it - config.burn_in) % config.thinning == config.thinning - 1:
            draws[kept] = current
            lps[kept] = current_lp
            kept += 1
    steps = total - config.burn_in
    rate = accepted / steps
    logger.info(f"RWM chain (seed {config.seed}): {kept} draws, acceptance {rate:.3f}, scale {scale:.4g}")
    return McmcResult(draws, lps, rate, scale, config.seed)


def rwm_sample_chains(target: Callable[[np.ndarray], float], init, config: McmcConfig,
                      n_chains: int = 4, workers: int = 1) -> List[McmcResult]:
    """Independent chains with seeds spawned from config.seed"""
    seeds = np.random.SeedSequence(config.seed).generate_state(n_chains)
    configs = [replace(config, seed=int(s)) for s in seeds]
    if workers <= 1:
        return [rwm_sample(target, init, c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: rwm_sample(target, init, c), configs))


def constrained_draws(layout: ThetaLayout, result: McmcResult) -> pd.DataFrame:
    rows = [np.concatenate([constrain(layout, d)[i] for i in layout.nodes]) for d in result.draws]
    return pd.DataFrame(rows, columns=layout.names())


def write_chain_csv(layout: ThetaLayout, result: McmcResult, path: str) -> None:
    """One row per retained draw, constrained parameter names as header"""
    constrained_draws(layout, result).to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote {len(result.draws)} draws to {path}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    result = rwm_sample(lambda z: -0.5 * float(z @ z), [0.0], McmcConfig(20000, burn_in=1000, proposal_scale=1.0, seed=3))
    print(f"standard normal chain: mean {result.draws.mean():.3f}, var {result.draws.var():.3f}")
