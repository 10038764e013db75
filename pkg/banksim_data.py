#!/usr/bin/env python3
"""
BankSim ingestion and feature engineering
Loads the payment CSV, builds features x1..x9 per transaction, derives the risk and
frequency labels of the two lower classifiers, rebalances and fits feature distributions.
"""

import os
import sys
import json
import argparse
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DataError, DistributionError
from distributions import fit_categorical, fit_truncated_normal, fit_gamma
from models import ModelSpec
from bn_graph import Dag, SampleBatch, feature_node, model_node, build_input_schema

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ['step', 'customer', 'age', 'gender', 'merchant', 'category', 'amount', 'fraud']
AGE_CODES = ('0', '1', '2', '3', '4', '5', '6', 'U')
GENDERS = ('E', 'F', 'M', 'U')
RISK_LABELS = ('low', 'medium', 'high')
FREQUENCY_LABELS = ('rare', 'infrequent', 'regular')
FRAUD_LABELS = ('normal', 'fraud')
FEATURE_COLUMNS = ['x1', 'x2', 'x3', 'x4', 'x5', 'x6', 'x7', 'x8', 'x9']
GAMMA_FEATURES = ['x5', 'x6', 'x7', 'x8']


@dataclass(frozen=True)
class TxnRecord:
    step: int
    customer: str
    age: str
    gender: str
    merchant: str
    category: str
    amount: float
    fraud: int


def load_csv(path: str) -> pd.DataFrame:
    """Read the payment CSV into a frame with one row per transaction.

    Columns are REQUIRED_COLUMNS in that order, the fields of TxnRecord: int64
    step and fraud, float amount, text without quote characters. Extra columns
    are dropped. Feature engineering works on the frame; to_records() gives
    the same rows as TxnRecord values.
    """
    try:
        frame = pd.read_csv(path, dtype=str, quotechar='"', skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty")
    return normalize_frame(frame, path)


def normalize_frame(frame: pd.DataFrame, source: str = 'frame') -> pd.DataFrame:
    """Check the schema, strip quotes from text values and parse numeric columns"""
    frame = frame.copy()
    frame.columns = [str(c).strip().strip("'\"") for c in frame.columns]
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise DataError(f"missing required column {column!r}", column=column)
    if frame.empty:
        raise DataError(f"{source} has a header but no rows")
    frame = frame[REQUIRED_COLUMNS].astype(str)
    for column in REQUIRED_COLUMNS:
        frame[column] = frame[column].str.strip().str.strip("'\"")

    for column in ('step', 'amount', 'fraud'):
        parsed = pd.to_numeric(frame[column], errors='coerce')
        bad = parsed.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"unparseable {column} {frame[column].iloc[row]!r} in data row {row + 1}",
                            column=column)
        frame[column] = parsed
    frame['step'] = frame['step'].astype(np.int64)
    frame['fraud'] = frame['fraud'].astype(np.int64)
    if (frame['amount'] < 0).any():
        raise DataError("negative amount", column='amount')
    if (frame['step'] < 0).any():
        raise DataError("negative step", column='step')
    if not frame['fraud'].isin([0, 1]).all():
        raise DataError("fraud must be 0 or 1", column='fraud')
    counts = frame['fraud'].value_counts()
    logger.info(f"Loaded {len(frame)} transactions from {source} "
                f"({int(counts.get(0, 0))} normal, {int(counts.get(1, 0))} fraudulent)")
    return frame


def to_records(frame: pd.DataFrame) -> List[TxnRecord]:
    return [TxnRecord(int(r.step), r.customer, r.age, r.gender, r.merchant, r.category,
                      float(r.amount), int(r.fraud))
            for r in frame[REQUIRED_COLUMNS].itertuples(index=False)]


def engineer_features(frame: pd.DataFrame, amount_range: Optional[Tuple[float, float]] = None,
                      categories: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Attach x1..x9 to every transaction.

    Pair statistics are computed per (customer, merchant); gaps are consecutive
    step differences and standard deviations use the population convention.
    Pairs with a single transaction get x5/x6 imputed by the global mean and
    x56_imputed set.
    """
    df = frame.sort_values(['customer', 'step', 'merchant', 'amount', 'fraud'], kind='mergesort')
    df = df.reset_index(drop=True)

    lo, hi = amount_range if amount_range is not None else (float(df['amount'].min()), float(df['amount'].max()))
    span = hi - lo
    df['x1'] = ((df['amount'] - lo) / span).clip(0.0, 1.0) if span > 0 else 0.0
    df['x2'] = df['age'].where(df['age'].isin(AGE_CODES), 'U').map(AGE_CODES.index).astype(np.int64)
    df['x3'] = df['gender'].where(df['gender'].isin(GENDERS), 'U').map(GENDERS.index).astype(np.int64)
    categories = list(categories) if categories is not None else sorted(df['category'].unique())
    unknown = set(df['category']) - set(categories)
    if unknown:
        raise DataError(f"categories not seen in training: {sorted(unknown)}", column='category')
    df['x4'] = df['category'].map(categories.index).astype(np.int64)

    pair = df.groupby(['customer', 'merchant'], sort=False)
    gaps = pair['step'].diff()
    df['_gap'] = gaps
    gap_stats = df.groupby(['customer', 'merchant'], sort=False)['_gap'].agg(['mean', lambda g: g.std(ddof=0)])
    gap_stats.columns = ['x5', 'x6']
    amount_stats = pair['amount'].agg(['mean', lambda a: a.std(ddof=0), 'size'])
    amount_stats.columns = ['x7', 'x8', 'pair_count']
    stats = gap_stats.join(amount_stats)
    customer_total = df.groupby('customer')['step'].size().rename('customer_count')
    stats = stats.join(customer_total, on='customer')
    stats['x9'] = stats['pair_count'] / stats['customer_count']

    single = stats['x5'].isna()
    stats['x56_imputed'] = single
    if single.any():
        x5_mean = stats.loc[~single, 'x5'].mean() if (~single).any() else 0.0
        x6_mean = stats.loc[~single, 'x6'].mean() if (~single).any() else 0.0
        stats.loc[single, 'x5'] = x5_mean
        stats.loc[single, 'x6'] = x6_mean
        logger.warning(f"Imputed x5/x6 for {int(single.sum())} single-transaction customer/merchant pairs")

    df = df.drop(columns=['_gap']).join(stats[['x5', 'x6', 'x7', 'x8', 'x9', 'x56_imputed']],
                                        on=['customer', 'merchant'])
    df.attrs['amount_range'] = (lo, hi)
    df.attrs['categories'] = categories
    return df


def derive_labels(features: pd.DataFrame, thresholds: Tuple[float, float] = (0.05, 0.25),
                  category_rates: Optional[Dict[str, float]] = None) -> pd.DataFrame:
    """Risk by terciles of the per-category fraud rate (ties collapse downward)
    and frequency by x9 thresholds. Adds m1 (risk), m2 (frequency) and y (fraud)."""
    rare, infrequent = thresholds
    if not 0 <= rare <= infrequent <= 1:
        raise DataError(f"frequency thresholds must satisfy 0 <= rare <= infrequent <= 1, got {thresholds}")
    df = features.copy()
    if category_rates is None:
        category_rates = df.groupby('category')['fraud'].mean().to_dict()
    rates = pd.Series(category_rates)
    q1, q2 = rates.quantile(1 / 3), rates.quantile(2 / 3)
    risk = {c: 0 if r <= q1 else 1 if r <= q2 else 2 for c, r in category_rates.items()}
    df['m1'] = df['category'].map(risk).fillna(0).astype(np.int64)
    df['m2'] = np.where(df['x9'] <= rare, 0, np.where(df['x9'] <= infrequent, 1, 2)).astype(np.int64)
    df['y'] = df['fraud'].astype(np.int64)
    df.attrs.update(features.attrs)
    df.attrs['category_rates'] = {str(k): float(v) for k, v in category_rates.items()}
    return df


def downsample_majority(frame: pd.DataFrame, seed: int, label: str = 'fraud') -> pd.DataFrame:
    """Keep every minority row and an equal-size uniform draw of the majority, original order"""
    counts = frame[label].value_counts()
    if len(counts) < 2:
        raise DataError(f"downsampling needs both classes of {label!r}", column=label)
    minority = counts.idxmin()
    n_min = int(counts.min())
    keep = [frame[frame[label] == minority]]
    for value in counts.index:
        if value != minority:
            part = frame[frame[label] == value]
            keep.append(part if len(part) == n_min else part.sample(n=n_min, random_state=seed))
    balanced = pd.concat(keep).sort_index()
    logger.info(f"Downsampled {len(frame)} rows to {len(balanced)} ({n_min} per class)")
    return balanced


def fit_feature_distributions(frame: pd.DataFrame, categories: Optional[Sequence[str]] = None) -> Dict:
    """Truncated normal for x1/x9, gamma for x5..x8, categorical for x2/x3, one-hot for x4"""
    if frame.empty:
        raise DataError("cannot fit distributions on an empty frame")
    categories = list(categories or frame.attrs.get('categories') or sorted(frame['category'].unique()))
    dists = {}
    try:
        for name in ('x1', 'x9'):
            dists[name] = fit_truncated_normal(frame[name].to_numpy(), 0.0, 1.0)
        for name in GAMMA_FEATURES:
            values = frame[name].to_numpy(dtype=float)
            positive = values[values > 0]
            if positive.size < values.size:
                logger.debug(f"{name}: {values.size - positive.size} zero values excluded from the gamma fit")
            dists[name] = fit_gamma(positive)
    except DistributionError as e:
        raise DataError(f"{name}: {e}", column=name)
    dists['x2'] = fit_categorical(np.bincount(frame['x2'], minlength=len(AGE_CODES)), labels=AGE_CODES)
    dists['x3'] = fit_categorical(np.bincount(frame['x3'], minlength=len(GENDERS)), labels=GENDERS)
    dists['x4'] = fit_categorical(np.bincount(frame['x4'], minlength=len(categories)),
                                  labels=categories, onehot=True)
    return dists


def to_sample_batch(frame: pd.DataFrame) -> SampleBatch:
    names = FEATURE_COLUMNS + [c for c in ('m1', 'm2', 'y') if c in frame.columns]
    return SampleBatch({name: frame[name].to_numpy() for name in names})


def banksim_network(dists: Dict, architecture: str = 'linear') -> Dag:
    """Three-classifier hierarchy: m1 <- [x1, x4], m2 <- [x5..x9], y <- [m1, x1, x2, x3, m2]"""
    nodes = [feature_node(name, dists[name]) for name in FEATURE_COLUMNS]
    wiring = {
        'm1': (['x1', 'x4'], RISK_LABELS),
        'm2': (['x5', 'x6', 'x7', 'x8', 'x9'], FREQUENCY_LABELS),
        'y': (['m1', 'x1', 'x2', 'x3', 'm2'], FRAUD_LABELS),
    }
    for name, (parents, labels) in wiring.items():
        nodes.append(model_node(name, parents, classes=labels))
    dag = Dag(tuple(nodes), 'y')
    for name, (_, labels) in wiring.items():
        spec = ModelSpec(architecture, len(labels), build_input_schema(dag, name))
        dag = dag.replace_node(model_node(name, dag.node(name).parents, spec=spec, classes=labels))
    return dag


@dataclass
class BanksimSplit:
    train: pd.DataFrame
    eval: pd.DataFrame
    balanced_train_rows: np.ndarray
    dists: Dict
    categories: List[str]
    amount_range: Tuple[float, float]


def prepare(frame: pd.DataFrame, seed: int, thresholds: Tuple[float, float] = (0.05, 0.25),
            eval_fraction: float = 0.3) -> BanksimSplit:
    """Features, labels, a seeded customer-level train/eval split and fitted distributions.

    Category fraud rates for the risk labels come from training customers only
    and are applied to both splits. The top model trains on a fraud-balanced
    subset of the training rows, the lower models on all of them.
    """
    features = engineer_features(frame)
    customers = np.sort(features['customer'].unique())
    rng = np.random.default_rng(seed)
    held_out = set(rng.choice(customers, size=int(round(eval_fraction * customers.size)), replace=False))
    is_eval = features['customer'].isin(held_out).to_numpy()
    rates = features[~is_eval].groupby('category')['fraud'].mean().to_dict()
    for category in features.attrs['categories']:
        rates.setdefault(category, 0.0)
    labeled = derive_labels(features, thresholds, rates)
    train = labeled[~is_eval].reset_index(drop=True)
    evaluation = labeled[is_eval].reset_index(drop=True)
    balanced = downsample_majority(train, seed)
    dists = fit_feature_distributions(train, features.attrs['categories'])
    return BanksimSplit(train, evaluation, balanced.index.to_numpy(), dists,
                        features.attrs['categories'], features.attrs['amount_range'])


def write_features_csv(frame: pd.DataFrame, path: str) -> None:
    columns = ['step', 'customer', 'merchant', 'category', 'amount', 'fraud'] + FEATURE_COLUMNS + ['x56_imputed']
    columns += [c for c in ('m1', 'm2', 'y') if c in frame.columns]
    frame[columns].to_csv(path, index=False, float_format='%.17g')


def write_distributions_json(dists: Dict, path: str) -> None:
    with open(path, 'w') as f:
        json.dump({name: dist.to_json() for name, dist in sorted(dists.items())}, f, indent=2, sort_keys=True)


# Synthetic stand-in with the BankSim schema

def generate_synthetic(n_rows: int = 60000, seed: int = 0, n_customers: Optional[int] = None) -> pd.DataFrame:
    """Payments with planted fraud signal in the merchant category, merchant
    familiarity and amount. Text values carry single quotes like the public file."""
    rng = np.random.default_rng(seed)
    categories = ['es_barsandrestaurants', 'es_contents', 'es_fashion', 'es_food', 'es_health',
                  'es_home', 'es_hotelservices', 'es_hyper', 'es_leisure', 'es_otherservices',
                  'es_sportsandtoys', 'es_tech', 'es_transportation', 'es_travel', 'es_wellnessandbeauty']
    # risk tiers: low, medium and high categories carry roughly 36/50/14 percent of the payments
    base_rate = np.array([0.03, 0.0, 0.003, 0.002, 0.04, 0.035, 0.2, 0.025, 0.35, 0.25,
                          0.3, 0.03, 0.0, 0.4, 0.004])
    tier_weight = np.array([10, 7, 7, 7, 10, 10, 2, 10, 2, 2, 2, 10, 7, 2, 7], dtype=float)
    amount_scale = np.array([40, 30, 60, 35, 100, 150, 200, 40, 300, 250, 200, 120, 25, 900, 60], dtype=float)
    n_customers = n_customers or max(n_rows // 40, 10)
    merchants_per_category = 4
    merchant_category = np.repeat(np.arange(len(categories)), merchants_per_category)
    n_merchants = merchant_category.size
    popularity = tier_weight[merchant_category]
    popularity = popularity / popularity.sum()

    customer = rng.integers(0, n_customers, size=n_rows)
    preferred = rng.choice(n_merchants, size=(n_customers, 2), p=popularity)
    use_preferred = rng.random(n_rows) < 0.85
    merchant = np.where(use_preferred, preferred[customer, rng.integers(0, 2, size=n_rows)],
                        rng.integers(0, n_merchants, size=n_rows))
    category = merchant_category[merchant]
    familiar = (merchant == preferred[customer, 0]) | (merchant == preferred[customer, 1])
    p_fraud = np.clip(base_rate[category] * np.where(familiar, 0.5, 2.5), 0.0, 0.95)
    fraud = (rng.random(n_rows) < p_fraud).astype(int)
    amount = amount_scale[category] * rng.lognormal(0.0, 0.5, size=n_rows) * np.where(fraud == 1, 1.5, 1.0)

    ages = np.array(AGE_CODES)
    genders = np.array(['F', 'M', 'E', 'U'])
    customer_age = rng.choice(ages, size=n_customers, p=[0.02, 0.24, 0.31, 0.25, 0.11, 0.04, 0.02, 0.01])
    customer_gender = rng.choice(genders, size=n_customers, p=[0.54, 0.45, 0.005, 0.005])

    frame = pd.DataFrame({
        'step': np.sort(rng.integers(0, 180, size=n_rows)),
        'customer': [f"'C{1000000 + c}'" for c in customer],
        'age': [f"'{a}'" for a in customer_age[customer]],
        'gender': [f"'{g}'" for g in customer_gender[customer]],
        'zipcodeOri': "'28007'",
        'merchant': [f"'M{500000 + m}'" for m in merchant],
        'zipMerchant': "'28007'",
        'category': [f"'{categories[c]}'" for c in category],
        'amount': np.round(amount, 2),
        'fraud': fraud,
    })
    return frame


def write_synthetic_csv(path: str, n_rows: int = 60000, seed: int = 0) -> None:
    generate_synthetic(n_rows, seed).to_csv(path, index=False)
    logger.info(f"Wrote {n_rows} synthetic transactions to {path}")


def main():
    parser = argparse.ArgumentParser(description='Engineer BankSim features or write a synthetic stand-in file')
    parser.add_argument('--data', help='BankSim CSV; omit to generate synthetic payments')
    parser.add_argument('--out', required=True, help='Output directory')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--rows', type=int, default=60000, help='Synthetic rows when --data is omitted')
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    os.makedirs(args.out, exist_ok=True)
    if args.data:
        frame = load_csv(args.data)
    else:
        path = os.path.join(args.out, 'synthetic_banksim.csv')
        write_synthetic_csv(path, args.rows, args.seed)
        frame = load_csv(path)
    try:
        split = prepare(frame, args.seed)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    write_features_csv(split.train, os.path.join(args.out, 'features_train.csv'))
    write_features_csv(split.eval, os.path.join(args.out, 'features_eval.csv'))
    write_distributions_json(split.dists, os.path.join(args.out, 'distributions.json'))
    print(f"{len(split.train)} training rows, {len(split.eval)} evaluation rows, "
          f"{len(split.balanced_train_rows)} balanced rows for y")
    return 0


if __name__ == "__main__":
    sys.exit(main())
