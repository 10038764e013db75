#!/usr/bin/env python3
"""
Distributions for feature nodes and priors
Sampling, log-density, moment fitting and KL divergence between histograms.
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.special import gammaln

from errors import DistributionError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
NEG_INF = -math.inf


def _check_simplex(probs: Sequence[float], what: str) -> Tuple[float, ...]:
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise DistributionError(f"{what}: probabilities must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DistributionError(f"{what}: probabilities must be finite and >= 0")
    if abs(arr.sum() - 1.0) > SIMPLEX_TOL:
        raise DistributionError(f"{what}: probabilities sum to {arr.sum():.12f}, expected 1")
    return tuple(float(p) for p in arr)


def _default_labels(k: int) -> Tuple[str, ...]:
    return tuple(str(i) for i in range(k))


def _is_index(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_))


def _is_real(value) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, (bool, np.bool_))


def draw_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one class index per row of a (n, k) probability matrix.

    The drawn class always has positive probability: the first column whose
    cumulative mass exceeds u * row_total is selected.
    """
    probs = np.asarray(probs, dtype=float)
    n = probs.shape[0]
    u = rng.random(n)
    cdf = np.cumsum(probs, axis=1)
    target = u * cdf[:, -1]
    return np.argmax(cdf > target[:, None], axis=1).astype(np.int64)


@dataclass(frozen=True)
class Categorical:
    probs: Tuple[float, ...]
    labels: Tuple[str, ...] = ()

    type_name = 'categorical'

    def __post_init__(self):
        object.__setattr__(self, 'probs', _check_simplex(self.probs, self.type_name))
        labels = tuple(str(l) for l in self.labels) if self.labels else _default_labels(len(self.probs))
        if len(labels) != len(self.probs):
            raise DistributionError(f"{self.type_name}: {len(labels)} labels for {len(self.probs)} categories")
        object.__setattr__(self, 'labels', labels)

    @property
    def is_discrete(self) -> bool:
        return True

    @property
    def n_categories(self) -> int:
        return len(self.probs)

    def mean(self) -> float:
        return float(np.dot(np.arange(self.n_categories), self.probs))

    def sample(self, rng: np.random.Generator, n: int, parent_values=None) -> np.ndarray:
        probs = np.broadcast_to(np.asarray(self.probs), (n, self.n_categories))
        return draw_rows(rng, probs)

    def log_prob_array(self, values, parent_values=None) -> np.ndarray:
        values = np.asarray(values, dtype=np.int64)
        logp = np.full(values.shape, NEG_INF)
        inside = (values >= 0) & (values < self.n_categories)
        with np.errstate(divide='ignore'):
            table = np.log(np.asarray(self.probs))
        logp[inside] = table[values[inside]]
        return logp

    def to_json(self) -> Dict:
        return {'type': self.type_name, 'probs': list(self.probs), 'labels': list(self.labels)}


@dataclass(frozen=True)
class OneHotCategorical(Categorical):
    """Categorical whose draws are fed to models as one-hot vectors"""

    type_name = 'onehot'


@dataclass(frozen=True)
class TruncatedNormal:
    mu: float
    sigma: float
    lo: float
    hi: float

    type_name = 'truncnorm'

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.mu, self.sigma, self.lo, self.hi)):
            raise DistributionError("truncnorm: parameters must be finite")
        if self.sigma <= 0:
            raise DistributionError(f"truncnorm: sigma must be > 0, got {self.sigma}")
        if not self.lo < self.hi:
            raise DistributionError(f"truncnorm: need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def is_discrete(self) -> bool:
        return False

    @property
    def n_categories(self) -> Optional[int]:
        return None

    def _frozen(self):
        a = (self.lo - self.mu) / self.sigma
        b = (self.hi - self.mu) / self.sigma
        return stats.truncnorm(a, b, loc=self.mu, scale=self.sigma)

    def mean(self) -> float:
        return float(self._frozen().mean())

    def sample(self, rng: np.random.Generator, n: int, parent_values=None) -> np.ndarray:
        if n == 0:
            return np.zeros(0)
        draws = self._frozen().rvs(size=n, random_state=rng)
        return np.clip(np.asarray(draws, dtype=float), self.lo, self.hi)

    def log_prob_array(self, values, parent_values=None) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        logp = np.full(values.shape, NEG_INF)
        inside = (values >= self.lo) & (values <= self.hi)
        logp[inside] = self._frozen().logpdf(values[inside])
        return logp

    def to_json(self) -> Dict:
        return {'type': self.type_name, 'mu': self.mu, 'sigma': self.sigma, 'lo': self.lo, 'hi': self.hi}


@dataclass(frozen=True)
class Gamma:
    shape: float
    rate: float

    type_name = 'gamma'

    def __post_init__(self):
        if not (math.isfinite(self.shape) and math.isfinite(self.rate)):
            raise DistributionError("gamma: parameters must be finite")
        if self.shape <= 0 or self.rate <= 0:
            raise DistributionError(f"gamma: shape and rate must be > 0, got ({self.shape}, {self.rate})")

    @property
    def is_discrete(self) -> bool:
        return False

    @property
    def n_categories(self) -> Optional[int]:
        return None

    def mean(self) -> float:
        return self.shape / self.rate

    def sample(self, rng: np.random.Generator, n: int, parent_values=None) -> np.ndarray:
        # numpy uses Marsaglia-Tsang with the shape < 1 boost
        return rng.gamma(self.shape, 1.0 / self.rate, size=n)

    def log_prob_array(self, values, parent_values=None) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        logp = np.full(values.shape, NEG_INF)
        inside = values > 0
        x = values[inside]
        logp[inside] = (self.shape * math.log(self.rate) - gammaln(self.shape)
                        + (self.shape - 1.0) * np.log(x) - self.rate * x)
        return logp

    def to_json(self) -> Dict:
        return {'type': self.type_name, 'shape': self.shape, 'rate': self.rate}


@dataclass(frozen=True)
class ConditionalCategorical:
    """Categorical table keyed by the tuple of parent class indices"""

    table: Dict[Tuple[int, ...], Tuple[float, ...]]
    labels: Tuple[str, ...] = ()

    type_name = 'conditional'

    def __post_init__(self):
        if not self.table:
            raise DistributionError("conditional: empty table")
        checked = {}
        width = None
        for key, probs in self.table.items():
            key = tuple(int(k) for k in key)
            row = _check_simplex(probs, f"conditional[{key}]")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DistributionError("conditional: rows have different category counts")
            checked[key] = row
        object.__setattr__(self, 'table', checked)
        labels = tuple(str(l) for l in self.labels) if self.labels else _default_labels(width)
        if len(labels) != width:
            raise DistributionError(f"conditional: {len(labels)} labels for {width} categories")
        object.__setattr__(self, 'labels', labels)

    @property
    def is_discrete(self) -> bool:
        return True

    @property
    def n_categories(self) -> int:
        return len(self.labels)

    @property
    def n_parents(self) -> int:
        return len(next(iter(self.table)))

    def mean(self) -> float:
        raise DistributionError("conditional: mean depends on parent values")

    def _row_probs(self, parent_values) -> np.ndarray:
        if parent_values is None:
            raise DistributionError("conditional: parent values required")
        parent_values = np.asarray(parent_values, dtype=np.int64)
        if parent_values.ndim == 1:
            parent_values = parent_values[:, None]
        out = np.empty((parent_values.shape[0], self.n_categories))
        configs, inverse = np.unique(parent_values, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        for i, config in enumerate(configs):
            key = tuple(int(v) for v in config)
            if key not in self.table:
                raise DistributionError(f"conditional: no row for parent configuration {key}")
            out[inverse == i] = self.table[key]
        return out

    def sample(self, rng: np.random.Generator, n: int, parent_values=None) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        return draw_rows(rng, self._row_probs(parent_values))

    def log_prob_array(self, values, parent_values=None) -> np.ndarray:
        values = np.asarray(values, dtype=np.int64)
        probs = self._row_probs(parent_values)
        logp = np.full(values.shape, NEG_INF)
        inside = (values >= 0) & (values < self.n_categories)
        with np.errstate(divide='ignore'):
            logp[inside] = np.log(probs[np.flatnonzero(inside), values[inside]])
        return logp

    def to_json(self) -> Dict:
        return {
            'type': self.type_name,
            'labels': list(self.labels),
            'table': {','.join(str(k) for k in key): list(row) for key, row in sorted(self.table.items())},
        }


@dataclass(frozen=True)
class Dirichlet:
    """Prior over the category probabilities of a discrete node"""

    concentration: Tuple[float, ...]

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.concentration)
        if not alpha or any(not math.isfinite(a) or a <= 0 for a in alpha):
            raise DistributionError("dirichlet: concentration entries must be finite and > 0")
        object.__setattr__(self, 'concentration', alpha)

    @property
    def dimension(self) -> int:
        return len(self.concentration)

    def mean(self) -> np.ndarray:
        alpha = np.asarray(self.concentration)
        return alpha / alpha.sum()

    def log_pdf(self, probs) -> float:
        alpha = np.asarray(self.concentration)
        p = np.asarray(probs, dtype=float)
        if p.shape != alpha.shape:
            raise DistributionError(f"dirichlet: dimension {alpha.size} does not match {p.size}")
        norm = gammaln(alpha.sum()) - gammaln(alpha).sum()
        with np.errstate(divide='ignore', invalid='ignore'):
            terms = np.where(alpha == 1.0, 0.0, (alpha - 1.0) * np.log(p))
        return float(norm + terms.sum())

    def to_json(self) -> Dict:
        return {'type': 'dirichlet', 'concentration': list(self.concentration)}


DistSpec = Union[Categorical, OneHotCategorical, TruncatedNormal, Gamma, ConditionalCategorical]
PriorSpec = Optional[Dirichlet]


@dataclass(frozen=True)
class Histogram:
    bin_edges: Tuple[float, ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.bin_edges)
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != len(edges) - 1:
            raise DistributionError(f"histogram: {len(counts)} counts for {len(edges)} edges")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DistributionError("histogram: bin edges must be increasing")
        if any(c < 0 for c in counts):
            raise DistributionError("histogram: counts must be non-negative")
        object.__setattr__(self, 'bin_edges', edges)
        object.__setattr__(self, 'counts', counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def frequencies(self) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=float)
        total = counts.sum()
        if total == 0:
            return np.zeros_like(counts)
        return counts / total

    def merge(self, other: 'Histogram') -> 'Histogram':
        if self.bin_edges != other.bin_edges:
            raise DistributionError("histogram: cannot merge different binnings")
        return Histogram(self.bin_edges, tuple(a + b for a, b in zip(self.counts, other.counts)))

    def to_json(self) -> Dict:
        return {'bin_edges': list(self.bin_edges), 'counts': list(self.counts),
                'frequencies': [float(f) for f in self.frequencies]}

    @classmethod
    def from_json(cls, data: Dict) -> 'Histogram':
        return cls(tuple(data['bin_edges']), tuple(data['counts']))


def merge_histograms(histograms: Sequence[Histogram]) -> Histogram:
    if not histograms:
        raise DistributionError("histogram: nothing to merge")
    pooled = histograms[0]
    for h in histograms[1:]:
        pooled = pooled.merge(h)
    return pooled


# Module-level operations

def sample(dist: DistSpec, rng: np.random.Generator, n: int, parent_values=None) -> np.ndarray:
    """Draw n i.i.d. values; discrete draws are label indices"""
    if n < 0:
        raise DistributionError(f"sample size must be >= 0, got {n}")
    return dist.sample(rng, n, parent_values)


def log_prob(dist: DistSpec, value, parent_values=None) -> float:
    """Natural-log density or mass; -inf outside the support"""
    if dist.is_discrete:
        if not _is_index(value):
            raise DistributionError(f"{dist.type_name}: expected a class index, got {value!r}")
    elif not _is_real(value):
        raise DistributionError(f"{dist.type_name}: expected a real value, got {value!r}")
    if parent_values is not None:
        parent_values = np.asarray(parent_values, dtype=np.int64).reshape(1, -1)
    return float(dist.log_prob_array(np.asarray([value]), parent_values)[0])


def fit_categorical(counts: Sequence[int], prior: PriorSpec = None,
                    labels: Sequence[str] = (), onehot: bool = False) -> Categorical:
    """Posterior-mean estimate under a Dirichlet prior, frequencies without one"""
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0):
        raise DistributionError("fit_categorical: counts must be a non-negative vector")
    if prior is not None:
        if prior.dimension != counts.size:
            raise DistributionError(
                f"fit_categorical: prior dimension {prior.dimension} != {counts.size} categories")
        weights = counts + np.asarray(prior.concentration)
    else:
        if counts.sum() == 0:
            raise DistributionError("fit_categorical: all-zero counts and no prior")
        weights = counts
    probs = weights / weights.sum()
    cls = OneHotCategorical if onehot else Categorical
    return cls(tuple(probs), tuple(labels))


def fit_truncated_normal(data: Sequence[float], lo: float, hi: float) -> TruncatedNormal:
    """Method of moments; population standard deviation"""
    data = np.asarray(data, dtype=float)
    if data.size < 2:
        raise DistributionError("fit_truncated_normal: need at least 2 values")
    if np.any(data < lo) or np.any(data > hi):
        raise DistributionError(f"fit_truncated_normal: data outside bounds [{lo}, {hi}]")
    sigma = float(np.std(data))
    if sigma == 0:
        raise DistributionError("fit_truncated_normal: zero variance (constant feature)")
    return TruncatedNormal(float(np.mean(data)), sigma, float(lo), float(hi))


def fit_gamma(data: Sequence[float]) -> Gamma:
    """Method of moments: shape = m^2/v, rate = m/v"""
    data = np.asarray(data, dtype=float)
    if data.size < 2:
        raise DistributionError("fit_gamma: need at least 2 values")
    if np.any(data <= 0):
        raise DistributionError("fit_gamma: data must be strictly positive")
    m = float(np.mean(data))
    v = float(np.var(data))
    if v == 0:
        raise DistributionError("fit_gamma: zero variance (constant feature)")
    return Gamma(m * m / v, m / v)


def kl_divergence(p: Union[Histogram, Sequence[float]], q: Union[Histogram, Sequence[float]],
                  smoothing: float = 0.0) -> float:
    """KL(p || q) in nats; inf when p has mass where q has none.

    With smoothing > 0 a Laplace pseudo-count is added to every bin before
    normalising (applied to counts for histograms, to probabilities otherwise).
    """
    if isinstance(p, Histogram) or isinstance(q, Histogram):
        if not (isinstance(p, Histogram) and isinstance(q, Histogram)):
            raise DistributionError("kl_divergence: cannot compare a histogram with a vector")
        if p.bin_edges != q.bin_edges:
            raise DistributionError("kl_divergence: histograms have different bin edges")
        if smoothing > 0:
            pv = np.asarray(p.counts, dtype=float) + smoothing
            qv = np.asarray(q.counts, dtype=float) + smoothing
            pv, qv = pv / pv.sum(), qv / qv.sum()
        else:
            pv, qv = p.frequencies, q.frequencies
    else:
        pv = np.asarray(p, dtype=float)
        qv = np.asarray(q, dtype=float)
        if pv.shape != qv.shape:
            raise DistributionError(f"kl_divergence: support sizes differ ({pv.size} vs {qv.size})")
        if smoothing > 0:
            pv = (pv + smoothing) / (pv + smoothing).sum()
            qv = (qv + smoothing) / (qv + smoothing).sum()
    if np.any(pv < 0) or np.any(qv < 0):
        raise DistributionError("kl_divergence: negative mass")
    support = pv > 0
    if np.any(qv[support] == 0):
        return math.inf
    value = float(np.sum(pv[support] * np.log(pv[support] / qv[support])))
    return max(value, 0.0)


# JSON codec

def dist_from_json(data: Dict) -> DistSpec:
    kind = data.get('type')
    try:
        if kind == 'categorical':
            return Categorical(tuple(data['probs']), tuple(data.get('labels') or ()))
        if kind == 'onehot':
            return OneHotCategorical(tuple(data['probs']), tuple(data.get('labels') or ()))
        if kind == 'truncnorm':
            return TruncatedNormal(float(data['mu']), float(data['sigma']), float(data['lo']), float(data['hi']))
        if kind == 'gamma':
            return Gamma(float(data['shape']), float(data['rate']))
        if kind == 'conditional':
            table = {tuple(int(v) for v in key.split(',')): tuple(row) for key, row in data['table'].items()}
            return ConditionalCategorical(table, tuple(data.get('labels') or ()))
    except KeyError as e:
        raise DistributionError(f"{kind}: missing field {e}")
    raise DistributionError(f"unknown distribution type: {kind!r}")


def prior_from_json(data: Optional[Dict]) -> PriorSpec:
    if not data:
        return None
    if data.get('type', 'dirichlet') != 'dirichlet':
        raise DistributionError(f"unknown prior type: {data.get('type')!r}")
    return Dirichlet(tuple(data['concentration']))


if __name__ == "__main__":
    rng = np.random.default_rng(42)
    dist = Categorical((0.1, 0.2, 0.7), ('a', 'b', 'c'))
    draws = sample(dist, rng, 100000)
    print("Empirical frequencies:", np.bincount(draws, minlength=3) / draws.size)
    print("KL([0.5,0.5] || [0.25,0.75]) =", kl_divergence([0.5, 0.5], [0.25, 0.75]))
    print("fit_gamma:", fit_gamma(rng.gamma(2.0, 0.5, size=10000)))
