#!/usr/bin/env python3
"""
Probabilistic classifiers used as model nodes
Linear softmax, ReLU MLP and gradient-boosted stumps, trained from scratch with numpy.
"""

import json
import math
import time
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from errors import ModelError

logger = logging.getLogger(__name__)

ARCHITECTURES = ('linear', 'mlp', 'stumps')
DEFAULT_LR = {'linear': 0.1, 'mlp': 0.01}
PRIOR_FLOOR = 1e-6
SCORE_CLIP = 35.0
STUMP_L2 = 1.0


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and input contract of one model node.

    input_schema lists (parent id, k) in the node's parent order; k > 0 means
    the parent is one-hot encoded over k classes, k == 0 means numeric.
    """

    architecture: str
    n_classes: int
    input_schema: Tuple[Tuple[str, int], ...]
    hidden: Tuple[int, ...] = (8,)
    rounds: int = 100
    learning_rate: float = 0.3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}")
        if self.n_classes < 2:
            raise ModelError(f"n_classes must be >= 2, got {self.n_classes}")
        schema = tuple((str(p), int(k)) for p, k in self.input_schema)
        if not schema:
            raise ModelError("input_schema is empty")
        if any(k < 0 or k == 1 for _, k in schema):
            raise ModelError("one-hot encodings need k >= 2")
        object.__setattr__(self, 'input_schema', schema)
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if self.architecture == 'mlp' and (not self.hidden or min(self.hidden) < 1):
            raise ModelError("mlp needs at least one hidden layer of width >= 1")
        if self.architecture == 'stumps' and (self.rounds < 1 or self.learning_rate <= 0):
            raise ModelError("stumps need rounds >= 1 and learning_rate > 0")

    @property
    def parents(self) -> Tuple[str, ...]:
        return tuple(p for p, _ in self.input_schema)

    @property
    def input_dim(self) -> int:
        return sum(k if k > 0 else 1 for _, k in self.input_schema)

    @property
    def n_scorers(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    def layer_sizes(self) -> List[int]:
        if self.architecture == 'linear':
            return [self.input_dim, self.n_classes]
        return [self.input_dim, *self.hidden, self.n_classes]

    def n_parameters(self) -> int:
        if self.architecture == 'stumps':
            return self.n_scorers * (1 + 4 * self.rounds)
        sizes = self.layer_sizes()
        return sum(a * b + b for a, b in zip(sizes, sizes[1:]))

    def to_json(self) -> Dict:
        return {
            'architecture': self.architecture,
            'n_classes': self.n_classes,
            'input_schema': [
                {'parent': p, 'encoding': 'onehot' if k else 'numeric', 'k': k}
                for p, k in self.input_schema
            ],
            'hidden': list(self.hidden),
            'activation': 'relu',
            'rounds': self.rounds,
            'learning_rate': self.learning_rate,
        }

    @classmethod
    def from_json(cls, data: Dict) -> 'ModelSpec':
        try:
            schema = []
            for entry in data['input_schema']:
                k = int(entry.get('k', 0)) if entry.get('encoding', 'numeric') == 'onehot' else 0
                schema.append((entry['parent'], k))
            return cls(
                architecture=data['architecture'],
                n_classes=int(data['n_classes']),
                input_schema=tuple(schema),
                hidden=tuple(data.get('hidden', (8,))),
                rounds=int(data.get('rounds', 100)),
                learning_rate=float(data.get('learning_rate', 0.3)),
            )
        except KeyError as e:
            raise ModelError(f"model spec missing field {e}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: Optional[float] = None
    seed: int = 0
    full_batch_rows: int = 10000
    batch_size: int = 1024

    def resolved_lr(self, architecture: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LR.get(architecture, 0.1)


@dataclass(frozen=True)
class TrainedModel:
    spec: ModelSpec
    parameters: np.ndarray
    input_mean: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    training_meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        params = np.asarray(self.parameters, dtype=float).copy()
        if params.shape != (self.spec.n_parameters(),):
            raise ModelError(
                f"parameter vector has {params.size} entries, "
                f"{self.spec.architecture} layout needs {self.spec.n_parameters()}")
        params.setflags(write=False)
        object.__setattr__(self, 'parameters', params)
        d = self.spec.input_dim
        mean = np.zeros(d) if self.input_mean is None else np.asarray(self.input_mean, dtype=float)
        scale = np.ones(d) if self.input_scale is None else np.asarray(self.input_scale, dtype=float)
        if mean.shape != (d,) or scale.shape != (d,):
            raise ModelError("input standardization does not match input_dim")
        object.__setattr__(self, 'input_mean', mean)
        object.__setattr__(self, 'input_scale', scale)


# Input encoding

def encode_inputs(spec: ModelSpec, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Build the (n, input_dim) design matrix from parent columns"""
    blocks = []
    n = None
    for parent, k in spec.input_schema:
        if parent not in columns:
            raise ModelError(f"missing input column {parent!r}")
        col = np.asarray(columns[parent])
        if n is None:
            n = col.shape[0]
        elif col.shape[0] != n:
            raise ModelError(f"input column {parent!r} has {col.shape[0]} rows, expected {n}")
        if k:
            idx = col.astype(np.int64)
            if np.any(idx != col) or np.any(idx < 0) or np.any(idx >= k):
                raise ModelError(f"input column {parent!r} holds values outside [0, {k})")
            block = np.zeros((n, k))
            block[np.arange(n), idx] = 1.0
        else:
            block = col.astype(float).reshape(n, 1)
        blocks.append(block)
    return np.hstack(blocks)


def _as_design(spec: ModelSpec, inputs: Union[Mapping[str, np.ndarray], np.ndarray]) -> np.ndarray:
    if isinstance(inputs, Mapping):
        X = encode_inputs(spec, inputs)
    else:
        X = np.asarray(inputs, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ModelError(f"input arity {X.shape[-1]} does not match input_dim {spec.input_dim}")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite input values")
    return X


# Dense networks

def _unpack_dense(spec: ModelSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    sizes = spec.layer_sizes()
    layers = []
    offset = 0
    for a, b in zip(sizes, sizes[1:]):
        W = params[offset:offset + a * b].reshape(a, b)
        offset += a * b
        bias = params[offset:offset + b]
        offset += b
        layers.append((W, bias))
    return layers


def _dense_forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    layers = _unpack_dense(spec, params)
    activations = [X]
    pre = []
    a = X
    for W, b in layers[:-1]:
        z = a @ W + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    W, b = layers[-1]
    logits = a @ W + b
    return logits, activations, pre


def loss_and_grad(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient for linear and mlp layouts"""
    if spec.architecture == 'stumps':
        raise ModelError("stumps are not trained by gradient descent")
    params = np.asarray(params, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    logits, activations, pre = _dense_forward(spec, params, X)
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = -float(np.mean(logp[np.arange(n), y]))

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    layers = _unpack_dense(spec, params)
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        a = activations[li]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if li > 0:
            delta = (delta @ layers[li][0].T) * (pre[li - 1] > 0)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return loss, flat


def _init_dense(spec: ModelSpec, rng: np.random.Generator, class_prior: np.ndarray) -> np.ndarray:
    sizes = spec.layer_sizes()
    chunks = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = i == len(sizes) - 2
        if spec.architecture == 'linear':
            W = np.zeros((a, b))
        else:
            W = rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b))
        bias = np.log(class_prior) if last else np.zeros(b)
        chunks.append(np.concatenate([W.ravel(), bias]))
    return np.concatenate(chunks)


def _train_dense(spec: ModelSpec, X: np.ndarray, y: np.ndarray, config: TrainConfig,
                 rng: np.random.Generator, class_prior: np.ndarray) -> Tuple[np.ndarray, float]:
    params = _init_dense(spec, rng, class_prior)
    lr = config.resolved_lr(spec.architecture)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    n = X.shape[0]
    full_batch = n <= config.full_batch_rows
    step = 0
    loss = math.nan
    for epoch in range(config.epochs):
        if full_batch:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        for idx in batches:
            loss, grad = loss_and_grad(spec, params, X[idx], y[idx])
            if not math.isfinite(loss):
                raise ModelError(f"non-finite training loss at epoch {epoch}")
            step += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** step)
            v_hat = v / (1 - beta2 ** step)
            params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
        if epoch % 50 == 0:
            logger.debug(f"{spec.architecture} epoch {epoch}: loss {loss:.6f}")
    final_loss, _ = loss_and_grad(spec, params, X, y)
    return params, final_loss


# Boosted stumps

def _fit_scorer(X: np.ndarray, target: np.ndarray, order: np.ndarray, rounds: int, shrinkage: float) -> List[float]:
    """One logistic-loss booster; returns [f0, (feature, threshold, left, right) * rounds]"""
    p0 = float(np.clip(target.mean(), PRIOR_FLOOR, 1 - PRIOR_FLOOR))
    f0 = math.log(p0 / (1 - p0))
    score = np.full(X.shape[0], f0)
    out = [f0]
    for _ in range(rounds):
        p = expit(score)
        g = p - target
        h = np.maximum(p * (1 - p), 1e-12)
        best = None
        for j in range(X.shape[1]):
            idx = order[:, j]
            xs = X[idx, j]
            G = np.cumsum(g[idx])
            H = np.cumsum(h[idx])
            valid = np.flatnonzero(xs[:-1] < xs[1:])
            if valid.size == 0:
                continue
            GL, HL = G[valid], H[valid]
            GR, HR = G[-1] - GL, H[-1] - HL
            gain = GL ** 2 / (HL + STUMP_L2) + GR ** 2 / (HR + STUMP_L2)
            k = int(np.argmax(gain))
            if best is None or gain[k] > best[0]:
                cut = valid[k]
                best = (gain[k], j, 0.5 * (xs[cut] + xs[cut + 1]),
                        -GL[k] / (HL[k] + STUMP_L2), -GR[k] / (HR[k] + STUMP_L2))
        if best is None:
            out.extend([0.0, 0.0, 0.0, 0.0])
            continue
        _, j, thr, left, right = best
        left, right = shrinkage * left, shrinkage * right
        score += np.where(X[:, j] <= thr, left, right)
        out.extend([float(j), float(thr), float(left), float(right)])
    return out


def _stump_scores(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    width = 1 + 4 * spec.rounds
    scores = np.empty((X.shape[0], spec.n_scorers))
    for s in range(spec.n_scorers):
        block = params[s * width:(s + 1) * width]
        total = np.full(X.shape[0], block[0])
        stumps = block[1:].reshape(spec.rounds, 4)
        for j, thr, left, right in stumps:
            total += np.where(X[:, int(j)] <= thr, left, right)
        scores[:, s] = total
    return scores


def _train_stumps(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, float]:
    order = np.argsort(X, axis=0, kind='stable')
    params = []
    if spec.n_classes == 2:
        params.extend(_fit_scorer(X, (y == 1).astype(float), order, spec.rounds, spec.learning_rate))
    else:
        for c in range(spec.n_classes):
            params.extend(_fit_scorer(X, (y == c).astype(float), order, spec.rounds, spec.learning_rate))
    params = np.asarray(params)
    probs = _proba_from_design(spec, params, X)
    final_loss = -float(np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))
    return params, final_loss


# Prediction

def _proba_from_design(spec: ModelSpec, params: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if spec.architecture == 'stumps':
        scores = np.clip(_stump_scores(spec, params, Z), -SCORE_CLIP, SCORE_CLIP)
        q = expit(scores)
        if spec.n_classes == 2:
            return np.column_stack([1.0 - q[:, 0], q[:, 0]])
        return q / q.sum(axis=1, keepdims=True)
    logits, _, _ = _dense_forward(spec, params, Z)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: TrainedModel, x) -> np.ndarray:
    """Per-class probabilities for one encoded row (shape (K,)) or a batch (n, K)"""
    single = not isinstance(x, Mapping) and np.asarray(x).ndim == 1
    X = _as_design(model.spec, x)
    Z = (X - model.input_mean) / model.input_scale
    probs = _proba_from_design(model.spec, model.parameters, Z)
    return probs[0] if single else probs


def predict_class(model: TrainedModel, x) -> np.ndarray:
    return np.argmax(predict_proba(model, x), axis=-1)


# Training

def train(spec: ModelSpec, inputs, labels, config: Optional[TrainConfig] = None) -> TrainedModel:
    """Fit a model node on parent columns (or an encoded matrix) and class labels.

    Inputs are standardized; the mean and scale travel with the model.
    Dense layouts start from the log class priors as output bias.
    """
    config = config or TrainConfig()
    X = _as_design(spec, inputs)
    y = np.asarray(labels)
    if X.shape[0] == 0:
        raise ModelError("cannot train on empty data")
    if y.shape != (X.shape[0],):
        raise ModelError(f"{y.size} labels for {X.shape[0]} input rows")
    if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y >= spec.n_classes):
        raise ModelError(f"labels outside [0, {spec.n_classes})")
    y = y.astype(np.int64)

    started = time.time()
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    rng = np.random.default_rng(config.seed)

    if spec.architecture == 'stumps':
        params, final_loss = _train_stumps(spec, Z, y)
        epochs = spec.rounds
        lr = spec.learning_rate
    else:
        prior = np.bincount(y, minlength=spec.n_classes) / y.size
        prior = np.maximum(prior, PRIOR_FLOOR)
        prior /= prior.sum()
        params, final_loss = _train_dense(spec, Z, y, config, rng, prior)
        epochs = config.epochs
        lr = config.resolved_lr(spec.architecture)

    meta = {
        'epochs': epochs,
        'learning_rate': lr,
        'seed': config.seed,
        'final_loss': final_loss,
        'n_rows': int(X.shape[0]),
        'full_batch_rows': config.full_batch_rows,
        'batch_size': config.batch_size,
    }
    logger.info(f"Trained {spec.architecture} model on {X.shape[0]} rows "
                f"(loss {final_loss:.4f}, {time.time() - started:.2f}s)")
    return TrainedModel(spec, params, mean, scale, meta)


def training_config_of(model: TrainedModel, seed: Optional[int] = None) -> TrainConfig:
    meta = model.training_meta
    return TrainConfig(
        epochs=int(meta.get('epochs', 200)) if model.spec.architecture != 'stumps' else 200,
        learning_rate=meta.get('learning_rate') if model.spec.architecture != 'stumps' else None,
        seed=int(meta.get('seed', 0)) if seed is None else seed,
        full_batch_rows=int(meta.get('full_batch_rows', 10000)),
        batch_size=int(meta.get('batch_size', 1024)),
    )


def retrain_random_labels(model: TrainedModel, inputs, labels, seed: int) -> TrainedModel:
    """Retrain the same architecture and config on a seeded permutation of the labels"""
    labels = np.asarray(labels)
    permuted = np.random.default_rng(seed).permutation(labels)
    retrained = train(model.spec, inputs, permuted, training_config_of(model, seed))
    counts = np.bincount(permuted.astype(np.int64), minlength=model.spec.n_classes).tolist()
    return replace(retrained, training_meta={**retrained.training_meta, 'random_labels': True,
                                             'label_counts': counts})


def accuracy(model: TrainedModel, inputs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict_class(model, inputs) == labels))


# JSON bundle codec

def model_to_json(model: TrainedModel) -> Dict:
    # float repr round-trips binary64 exactly
    return {
        'spec': model.spec.to_json(),
        'parameters': [float(p) for p in model.parameters],
        'input_mean': [float(v) for v in model.input_mean],
        'input_scale': [float(v) for v in model.input_scale],
        'training_meta': model.training_meta,
    }


def model_from_json(data: Dict) -> TrainedModel:
    try:
        spec = ModelSpec.from_json(data['spec'])
        return TrainedModel(
            spec=spec,
            parameters=np.asarray(data['parameters'], dtype=float),
            input_mean=data.get('input_mean'),
            input_scale=data.get('input_scale'),
            training_meta=dict(data.get('training_meta', {})),
        )
    except KeyError as e:
        raise ModelError(f"model bundle missing field {e}")


def save_model(model: TrainedModel, path: str) -> None:
    with open(path, 'w') as f:
        json.dump(model_to_json(model), f, indent=2, sort_keys=True)


def load_model(path: str) -> TrainedModel:
    with open(path) as f:
        return model_from_json(json.load(f))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, size=(400, 2))
    y = (np.sign(X[:, 0]) != np.sign(X[:, 1])).astype(int)
    for arch in ARCHITECTURES:
        spec = ModelSpec(arch, 2, (('a', 0), ('b', 0)), hidden=(16,))
        model = train(spec, X, y, TrainConfig(epochs=1000, learning_rate=0.05, seed=1))
        print(f"{arch:7s} XOR training accuracy: {accuracy(model, X, y):.3f}")
