"""Metrics against brute-force and high-precision oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlab.data import SyntheticConfig, generate_synthetic
from ctrlab.errors import InvalidInputError, UndefinedMetricError
from ctrlab.metrics import auc, bias_buckets, logloss


def brute_force_auc(scores, labels, weights=None):
    """O(n^2) pairwise oracle: ties count half, weights multiply pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    w = np.ones(len(scores)) if weights is None else np.asarray(weights, float)
    num = den = 0.0
    for i in np.flatnonzero(labels == 1):
        for j in np.flatnonzero(labels == 0):
            pair = w[i] * w[j]
            den += pair
            if scores[i] > scores[j]:
                num += pair
            elif scores[i] == scores[j]:
                num += 0.5 * pair
    return num / den


# ---------------------------------------------------------------- auc

def test_auc_perfect_separation():
    assert auc([0.9, 0.1], [1, 0]) == 1.0


def test_auc_all_ties_is_half():
    assert auc([0.3, 0.3, 0.3], [1, 0, 0]) == 0.5


def test_auc_brute_force_oracle(rng):
    for trial in range(200):
        n = int(rng.integers(2, 16))
        labels = np.zeros(n)
        labels[: max(1, int(rng.integers(1, n)))] = 1
        rng.shuffle(labels)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 1, 0
        if trial % 2:
            scores = rng.choice([0.1, 0.4, 0.7], size=n)  # force tie groups
        else:
            scores = rng.normal(size=n)
        assert auc(scores, labels) == pytest.approx(
            brute_force_auc(scores, labels), abs=1e-12)


def test_auc_weighted_brute_force(rng):
    for _ in range(50):
        n = int(rng.integers(4, 14))
        labels = (rng.random(n) < 0.5).astype(float)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 1, 0
        scores = rng.normal(size=n)
        weights = rng.uniform(0.2, 3.0, n)
        assert auc(scores, labels, weights) == pytest.approx(
            brute_force_auc(scores, labels, weights), abs=1e-12)


def test_auc_class_uniform_weights_match_unweighted(rng):
    # evaluation weights are per-class constants (beta on positives); pair
    # weights then cancel, so the weighted AUC equals the unweighted one
    n = 400
    labels = (rng.random(n) < 0.3).astype(float)
    scores = rng.normal(size=n)
    weights = np.where(labels == 1, 0.1, 1.0)
    assert auc(scores, labels, weights) == pytest.approx(
        auc(scores, labels), abs=1e-12)


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.9], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.9], [0, 0])


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=30),
       st.data())
@settings(max_examples=60, deadline=None)
def test_auc_monotone_transform_invariance(scores, data):
    n = len(scores)
    labels = np.zeros(n)
    labels[: data.draw(st.integers(1, n - 1))] = 1
    perm = data.draw(st.permutations(range(n)))
    labels = labels[list(perm)]
    # snap to a coarse grid so exp() keeps distinct scores distinct in floats
    s = np.round(np.array(scores) * 16) / 16
    base = auc(s, labels)
    assert auc(np.exp(s) * 3 + 1, labels) == pytest.approx(base, abs=1e-12)
    assert auc(-s, labels) == pytest.approx(1 - base, abs=1e-12)


# ---------------------------------------------------------------- logloss

def test_logloss_half_everywhere():
    assert logloss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), rel=1e-12)


def test_logloss_clamps_perfect_scores():
    # p == y hits the clamp, floor -log(1 - 1e-7)
    val = logloss([1.0, 0.0], [1, 0])
    assert val == pytest.approx(-math.log1p(-1e-7), rel=1e-9)
    assert val <= 1.1e-7


def test_logloss_fsum_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(2, 40))
        p = rng.uniform(0.001, 0.999, n)
        y = (rng.random(n) < 0.4).astype(float)
        w = rng.uniform(0.1, 2.0, n)
        terms = [wi * -(yi * math.log(pi) + (1 - yi) * math.log1p(-pi))
                 for pi, yi, wi in zip(p, y, w)]
        want = math.fsum(terms) / math.fsum(w)
        assert logloss(p, y, w) == pytest.approx(want, rel=1e-12)


def test_logloss_equal_weights_reduce_to_unweighted(rng):
    p = rng.uniform(0.01, 0.99, 25)
    y = (rng.random(25) < 0.5).astype(float)
    assert logloss(p, y, np.full(25, 3.7)) == pytest.approx(
        logloss(p, y), rel=1e-12)


def test_logloss_empty_undefined():
    with pytest.raises(UndefinedMetricError):
        logloss([], [])


# ---------------------------------------------------------------- bias

def test_bias_single_bucket_ratio_one():
    report = bias_buckets([0.5] * 10, [1, 0] * 5, n_buckets=1)
    assert len(report.buckets) == 1
    assert report.buckets[0].bias == pytest.approx(1.0, rel=1e-12)


def test_bias_positive_quota_within_one(rng):
    for _ in range(20):
        n = int(rng.integers(200, 800))
        scores = rng.random(n)
        labels = (rng.random(n) < 0.3).astype(float)
        n_buckets = int(rng.integers(2, 12))
        if labels.sum() < n_buckets:
            continue
        report = bias_buckets(scores, labels, n_buckets=n_buckets)
        counts = [b.n_pos for b in report.buckets]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == int(labels.sum())
        assert sum(b.n for b in report.buckets) == n


def test_bias_buckets_ordered_by_score(rng):
    scores = rng.random(500)
    labels = (rng.random(500) < 0.4).astype(float)
    report = bias_buckets(scores, labels, n_buckets=8)
    his = [b.score_hi for b in report.buckets]
    los = [b.score_lo for b in report.buckets]
    assert all(lo <= hi for lo, hi in zip(los, his))
    assert all(prev <= nxt for prev, nxt in zip(his, los[1:]))


def test_bias_scaling_scales_bias(rng):
    scores = rng.uniform(0.05, 0.45, 400)
    labels = (rng.random(400) < scores).astype(float)
    if labels.sum() < 4:
        labels[:4] = 1
    a = bias_buckets(scores, labels, n_buckets=4)
    b = bias_buckets(scores * 2, labels, n_buckets=4)
    for ba, bb in zip(a.buckets, b.buckets):
        assert bb.bias == pytest.approx(2 * ba.bias, rel=1e-12)


def test_bias_ties_stay_together():
    # one tie group bigger than a bucket quota must not be split
    scores = np.array([0.2] * 30 + [0.8] * 10)
    labels = np.array([1, 0, 0] * 10 + [1] * 10)
    report = bias_buckets(scores, labels, n_buckets=2)
    assert len(report.buckets) == 2
    assert report.buckets[0].n == 30
    assert report.buckets[1].n == 10


def test_bias_too_few_positives_rejected():
    with pytest.raises(InvalidInputError):
        bias_buckets([0.1, 0.5, 0.9], [1, 0, 0], n_buckets=2)


def test_bias_calibrated_synthetic_scores_near_one():
    # score == true pCTR: every bucket's bias should sit near 1
    ds = generate_synthetic(SyntheticConfig(
        n_samples=120000, target_base_ctr=0.2, n_categorical_fields=3,
        n_numeric_fields=2, vocab_size=20, seed=5))
    report = bias_buckets(ds.true_pctr, ds.labels, n_buckets=10)
    for b in report.buckets:
        assert 0.9 <= b.bias <= 1.1


def test_bias_report_mean_abs_error():
    scores = np.array([0.2] * 30 + [0.8] * 10)
    labels = np.array([1, 0, 0] * 10 + [1] * 10)
    report = bias_buckets(scores, labels, n_buckets=2)
    want = np.mean([abs(b.bias - 1) for b in report.buckets])
    assert report.mean_abs_bias_error == pytest.approx(want, rel=1e-12)
