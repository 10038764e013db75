#!/usr/bin/env python3
"""
Tests for BankSim ingestion, feature engineering, labeling and distribution fitting
"""

import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import DataError
from distributions import OneHotCategorical, TruncatedNormal, Gamma
from bn_graph import validate
from banksim_data import (
    AGE_CODES, GENDERS, FEATURE_COLUMNS, load_csv, normalize_frame, to_records, engineer_features,
    derive_labels, downsample_majority, fit_feature_distributions, to_sample_batch, banksim_network,
    prepare, generate_synthetic, write_features_csv, write_distributions_json,
)


def hand_rows():
    """C1 visits M1 at steps 1, 3, 7 and M2 seven times; C2 has a single payment"""
    rows = [
        (1, 'C1', '2', 'F', 'M1', 'es_travel', 10.0, 0),
        (3, 'C1', '2', 'F', 'M1', 'es_travel', 20.0, 0),
        (7, 'C1', '2', 'F', 'M1', 'es_travel', 30.0, 0),
    ]
    rows += [(s, 'C1', '2', 'F', 'M2', 'es_food', 5.0, 0) for s in range(2, 9)]
    rows.append((4, 'C2', '9', 'M', 'M1', 'es_travel', 12.0, 1))
    frame = pd.DataFrame(rows, columns=['step', 'customer', 'age', 'gender', 'merchant',
                                        'category', 'amount', 'fraud'])
    for column in ('customer', 'age', 'gender', 'merchant', 'category'):
        frame[column] = "'" + frame[column] + "'"
    return normalize_frame(frame)


@pytest.fixture(scope='module')
def synthetic():
    return normalize_frame(generate_synthetic(20000, seed=3))


def test_hand_fixture_round_trip():
    records = to_records(hand_rows())
    assert len(records) == 11
    first = records[0]
    assert (first.step, first.customer, first.age, first.gender) == (1, 'C1', '2', 'F')
    assert (first.merchant, first.category, first.amount, first.fraud) == ('M1', 'es_travel', 10.0, 0)


def test_load_csv_ignores_extra_columns(tmp_path):
    path = tmp_path / 'payments.csv'
    generate_synthetic(500, seed=1).to_csv(path, index=False)
    frame = load_csv(str(path))
    assert list(frame.columns) == ['step', 'customer', 'age', 'gender', 'merchant', 'category', 'amount', 'fraud']
    assert len(frame) == 500
    assert not frame['customer'].str.contains("'").any()
    assert frame['amount'].dtype == float
    assert frame['step'].dtype == np.int64 and frame['fraud'].dtype == np.int64
    first = to_records(frame)[0]
    row = frame.iloc[0]
    assert (first.step, first.customer, first.amount) == (row['step'], row['customer'], row['amount'])


def test_load_csv_errors(tmp_path):
    missing = tmp_path / 'missing.csv'
    missing.write_text("step,customer,age,gender,merchant,category,fraud\n0,'C1','1','F','M1','es_food',0\n")
    with pytest.raises(DataError) as err:
        load_csv(str(missing))
    assert err.value.column == 'amount'
    assert 'amount' in str(err.value)
    bad = tmp_path / 'bad.csv'
    bad.write_text("step,customer,age,gender,merchant,category,amount,fraud\n0,'C1','1','F','M1','es_food',abc,0\n")
    with pytest.raises(DataError) as err:
        load_csv(str(bad))
    assert err.value.column == 'amount'
    empty = tmp_path / 'empty.csv'
    empty.write_text("")
    with pytest.raises(DataError):
        load_csv(str(empty))
    header_only = tmp_path / 'header.csv'
    header_only.write_text("step,customer,age,gender,merchant,category,amount,fraud\n")
    with pytest.raises(DataError):
        load_csv(str(header_only))


def test_record_invariants_enforced():
    frame = hand_rows()
    for column, value in (('amount', -1.0), ('step', -2), ('fraud', 2)):
        broken = frame.copy()
        broken.loc[0, column] = value
        with pytest.raises(DataError) as err:
            normalize_frame(broken)
        assert err.value.column == column


def test_pair_statistics():
    features = engineer_features(hand_rows())
    m1 = features[(features['customer'] == 'C1') & (features['merchant'] == 'M1')].iloc[0]
    assert m1['x5'] == pytest.approx(3.0)
    assert m1['x6'] == pytest.approx(1.0)
    assert m1['x7'] == pytest.approx(20.0)
    assert m1['x8'] == pytest.approx(math.sqrt(200 / 3))
    assert m1['x9'] == pytest.approx(0.3)
    m2 = features[features['merchant'] == 'M2'].iloc[0]
    assert (m2['x5'], m2['x6'], m2['x8'], m2['x9']) == pytest.approx((1.0, 0.0, 0.0, 0.7))


def test_single_payment_pair_is_imputed():
    features = engineer_features(hand_rows())
    single = features[features['customer'] == 'C2'].iloc[0]
    assert bool(single['x56_imputed'])
    assert single['x5'] == pytest.approx(2.0)
    assert single['x6'] == pytest.approx(0.5)
    assert single['x9'] == pytest.approx(1.0)
    assert not features.loc[features['customer'] == 'C1', 'x56_imputed'].any()


def test_encoded_columns():
    features = engineer_features(hand_rows())
    assert features['x1'].min() == 0.0 and features['x1'].max() == 1.0
    assert features.attrs['amount_range'] == (5.0, 30.0)
    c2 = features[features['customer'] == 'C2'].iloc[0]
    assert c2['x2'] == AGE_CODES.index('U')
    assert c2['x3'] == GENDERS.index('M')
    assert features.attrs['categories'] == ['es_food', 'es_travel']
    assert c2['x4'] == 1


def test_training_scale_applies_to_new_data():
    features = engineer_features(hand_rows(), amount_range=(0.0, 20.0), categories=['es_food', 'es_travel'])
    assert features['x1'].max() == 1.0
    assert features.loc[features['amount'] == 10.0, 'x1'].iloc[0] == pytest.approx(0.5)
    with pytest.raises(DataError):
        engineer_features(hand_rows(), categories=['es_food'])


def test_feature_ranges(synthetic):
    features = engineer_features(synthetic)
    assert features['x1'].between(0.0, 1.0).all()
    assert features['x9'].between(0.0, 1.0).all()
    assert (features[['x5', 'x6', 'x7', 'x8']] >= 0).all().all()


def test_merchant_shares_sum_to_one(synthetic):
    features = engineer_features(synthetic)
    pairs = features.drop_duplicates(['customer', 'merchant'])
    totals = pairs.groupby('customer')['x9'].sum()
    assert np.allclose(totals.to_numpy(), 1.0)


def test_engineering_ignores_row_order(synthetic):
    columns = ['customer', 'merchant', 'step', 'amount'] + FEATURE_COLUMNS
    original = engineer_features(synthetic)[columns]
    shuffled = engineer_features(synthetic.sample(frac=1.0, random_state=7))[columns]
    pd.testing.assert_frame_equal(original.reset_index(drop=True), shuffled.reset_index(drop=True))


def test_risk_and_frequency_labels():
    labeled = derive_labels(engineer_features(hand_rows()))
    assert set(labeled.loc[labeled['category'] == 'es_travel', 'm1']) == {2}
    assert set(labeled.loc[labeled['category'] == 'es_food', 'm1']) == {0}
    frame = pd.DataFrame({'category': ['a'] * 5, 'fraud': [0] * 5, 'x9': [0.01, 0.05, 0.1, 0.25, 0.5]})
    labeled = derive_labels(frame)
    assert labeled['m2'].tolist() == [0, 0, 1, 1, 2]
    assert labeled['m1'].tolist() == [0] * 5
    assert derive_labels(frame, thresholds=(0.2, 0.3))['m2'].tolist() == [0, 0, 0, 1, 2]
    with pytest.raises(DataError):
        derive_labels(frame, thresholds=(0.5, 0.2))


def test_all_zero_fraud_is_low_risk():
    frame = pd.DataFrame({'category': ['a', 'b', 'c', 'd'], 'fraud': [0] * 4, 'x9': [0.5] * 4})
    assert derive_labels(frame)['m1'].tolist() == [0, 0, 0, 0]


def test_downsample_majority():
    frame = pd.DataFrame({'fraud': [0] * 90 + [1] * 10, 'v': np.arange(100)})
    balanced = downsample_majority(frame, seed=1)
    assert balanced['fraud'].value_counts().to_dict() == {0: 10, 1: 10}
    assert set(range(90, 100)) <= set(balanced['v'])
    assert balanced.index.is_monotonic_increasing
    assert balanced.equals(downsample_majority(frame, seed=1))
    other = downsample_majority(frame, seed=2)
    assert len(other) == 20 and not other.equals(balanced)
    even = pd.DataFrame({'fraud': [0, 1, 0, 1], 'v': [1, 2, 3, 4]})
    assert downsample_majority(even, seed=0).equals(even)
    with pytest.raises(DataError):
        downsample_majority(frame[frame['fraud'] == 0], seed=0)


def distribution_frame(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({
        'x1': rng.beta(2.0, 5.0, n),
        'x9': rng.beta(2.0, 2.0, n),
        'x2': rng.integers(0, len(AGE_CODES), n),
        'x3': rng.integers(0, len(GENDERS), n),
        'x4': rng.integers(0, 3, n),
        'category': rng.choice(['a', 'b', 'c'], n),
    })
    for name in ('x5', 'x6', 'x7', 'x8'):
        frame[name] = rng.gamma(2.0, 1.0, n)
    return frame


def test_fit_feature_distributions():
    dists = fit_feature_distributions(distribution_frame(), categories=['a', 'b', 'c'])
    assert isinstance(dists['x1'], TruncatedNormal) and isinstance(dists['x9'], TruncatedNormal)
    assert isinstance(dists['x4'], OneHotCategorical)
    assert dists['x4'].labels == ('a', 'b', 'c')
    assert sum(dists['x2'].probs) == pytest.approx(1.0)
    assert dists['x3'].labels == GENDERS
    x5 = dists['x5']
    assert isinstance(x5, Gamma)
    assert x5.shape == pytest.approx(2.0, rel=0.05)
    assert x5.rate == pytest.approx(1.0, rel=0.05)


def test_constant_feature_names_the_column():
    frame = distribution_frame(500)
    frame['x8'] = 3.0
    with pytest.raises(DataError) as err:
        fit_feature_distributions(frame, categories=['a', 'b', 'c'])
    assert err.value.column == 'x8'
    assert 'x8' in str(err.value)
    with pytest.raises(DataError):
        fit_feature_distributions(frame.iloc[:0], categories=['a'])


def test_prepare_splits_by_customer(synthetic):
    split = prepare(synthetic, seed=5)
    assert not set(split.train['customer']) & set(split.eval['customer'])
    assert len(split.train) + len(split.eval) == len(synthetic)
    balanced = split.train.iloc[split.balanced_train_rows]
    counts = balanced['y'].value_counts()
    assert counts[0] == counts[1] == split.train['y'].sum()
    assert set(split.dists) == set(FEATURE_COLUMNS)
    again = prepare(synthetic, seed=5)
    assert np.array_equal(again.balanced_train_rows, split.balanced_train_rows)
    pd.testing.assert_frame_equal(again.train, split.train)


def test_eval_fraud_does_not_move_training_labels(synthetic):
    split = prepare(synthetic, seed=5)
    held_out = set(split.eval['customer'])
    flipped = synthetic.copy()
    eval_rows = flipped['customer'].isin(held_out)
    flipped.loc[eval_rows, 'fraud'] = 1 - flipped.loc[eval_rows, 'fraud']
    again = prepare(flipped, seed=5)
    assert set(again.eval['customer']) == held_out
    for column in ('m1', 'm2', 'y'):
        assert again.train[column].tolist() == split.train[column].tolist()
    assert np.array_equal(again.balanced_train_rows, split.balanced_train_rows)
    assert again.eval['y'].mean() > 0.5


def test_banksim_network_and_batch(synthetic):
    split = prepare(synthetic, seed=6)
    dag = banksim_network(split.dists, architecture='mlp')
    assert validate(dag).ok
    assert dag.node('m1').spec.input_schema == (('x1', 0), ('x4', len(split.categories)))
    assert dag.node('y').spec.architecture == 'mlp'
    assert dag.node('m2').labels == ('rare', 'infrequent', 'regular')
    batch = to_sample_batch(split.train)
    assert set(batch.columns) == set(FEATURE_COLUMNS) | {'m1', 'm2', 'y'}


def test_synthetic_generator_schema():
    frame = generate_synthetic(1000, seed=9)
    assert len(frame) == 1000
    assert {'zipcodeOri', 'zipMerchant'} <= set(frame.columns)
    assert frame['customer'].str.startswith("'").all()
    assert frame['fraud'].isin([0, 1]).all()
    assert frame.equals(generate_synthetic(1000, seed=9))


def test_written_outputs(tmp_path, synthetic):
    split = prepare(synthetic, seed=7)
    features_path = tmp_path / 'features.csv'
    write_features_csv(split.train, str(features_path))
    header = features_path.read_text().splitlines()[0].split(',')
    assert header[:6] == ['step', 'customer', 'merchant', 'category', 'amount', 'fraud']
    assert header[6:15] == FEATURE_COLUMNS
    dists_path = tmp_path / 'dists.json'
    write_distributions_json(split.dists, str(dists_path))
    assert '"gamma"' in dists_path.read_text()
