"""Evaluation metrics: AUC, log loss, and bucketed calibration bias."""

from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError


def _check_scores_labels(scores, labels, weights):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.size == 0 or y.shape != s.shape:
        raise InvalidInputError("scores and labels must be equal-length 1-d arrays")
    if not np.isfinite(s).all():
        raise InvalidInputError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    y = y.astype(np.int8)
    if weights is None:
        w = np.ones(s.size, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != s.shape or not (np.isfinite(w).all() and (w > 0).all()):
            raise InvalidInputError("weights must be positive, finite, same length")
    return s, y, w


def auc(scores, labels, weights=None) -> float:
    """Probability that a random positive outscores a random negative.

    Rank-sum formulation, O(n log n); tied scores count half. With weights,
    each (positive, negative) pair contributes w_i * w_j.
    """
    s, y, w = _check_scores_labels(scores, labels, weights)
    pos = y == 1
    w_pos_total = float(w[pos].sum())
    w_neg_total = float(w[~pos].sum())
    if w_pos_total == 0.0 or w_neg_total == 0.0:
        raise UndefinedMetricError("AUC needs both label classes")

    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    w_sorted = w[order]
    # Group boundaries of tied scores.
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    pos_w = np.where(y_sorted == 1, w_sorted, 0.0)
    neg_w = np.where(y_sorted == 0, w_sorted, 0.0)
    pos_group = np.add.reduceat(pos_w, starts)
    neg_group = np.add.reduceat(neg_w, starts)
    neg_below = np.r_[0.0, np.cumsum(neg_group)[:-1]]
    total = float(np.sum(pos_group * (neg_below + 0.5 * neg_group)))
    return total / (w_pos_total * w_neg_total)


def logloss(scores, labels, weights=None) -> float:
    """Weighted mean negative log-likelihood of clamped probability scores.

    Scores are clamped to [1e-7, 1 - 1e-7] before the log; the mean is
    normalised by the total weight.
    """
    if np.asarray(scores).size == 0:
        raise UndefinedMetricError("logloss of an empty sample set is undefined")
    s, y, w = _check_scores_labels(scores, labels, weights)
    p = np.clip(s, 1e-7, 1.0 - 1e-7)
    yf = y.astype(np.float64)
    terms = -(yf * np.log(p) + (1.0 - yf) * np.log1p(-p))
    return float(np.sum(w * terms) / np.sum(w))


@dataclasses.dataclass(frozen=True)
class BucketStat:
    index: int
    n: int
    n_pos: int
    score_lo: float
    score_hi: float
    mean_pred: float
    empirical_ctr: float
    bias: float


@dataclasses.dataclass(frozen=True)
class BiasReport:
    """Per-bucket calibration bias, buckets cut at equal positive frequency."""

    buckets: tuple[BucketStat, ...]

    @property
    def mean_abs_bias_error(self) -> float:
        return float(np.mean([abs(b.bias - 1.0) for b in self.buckets]))

    def to_rows(self) -> list[dict]:
        return [dataclasses.asdict(b) for b in self.buckets]

    def to_json(self) -> str:
        return json.dumps({"buckets": self.to_rows()}, sort_keys=True)

    def to_csv(self, path) -> None:
        fields = [f.name for f in dataclasses.fields(BucketStat)]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.to_rows():
                writer.writerow({k: repr(float(v)) if isinstance(v, float) else v
                                 for k, v in row.items()})


def bias_buckets(scores, labels, n_buckets: int = 10) -> BiasReport:
    """Sort by score, cut buckets holding equal positive counts, report bias.

    bias = mean predicted score / empirical CTR per bucket. Samples with
    identical scores always land in the same bucket, so heavy ties can merge
    buckets and the report may hold fewer than ``n_buckets`` entries; with
    distinct scores the per-bucket positive counts differ by at most one.
    """
    s, y, _ = _check_scores_labels(scores, labels, None)
    if n_buckets < 1:
        raise InvalidInputError("n_buckets must be >= 1")
    total_pos = int((y == 1).sum())
    if total_pos < n_buckets:
        raise InvalidInputError(
            f"need at least one positive per bucket: {total_pos} positives, "
            f"{n_buckets} buckets")

    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    n = s.size
    pos_positions = np.flatnonzero(y_sorted == 1)

    stats = []
    start = 0
    pos_used = 0
    while start < n and pos_used < total_pos:
        buckets_left = n_buckets - len(stats)
        pos_left = total_pos - pos_used
        if buckets_left <= 1:
            end = n
        else:
            quota = -(-pos_left // buckets_left)  # ceil split keeps counts within 1
            last_pos = pos_positions[pos_used + quota - 1]
            end = last_pos + 1
            # Ties never straddle a boundary.
            while end < n and s_sorted[end] == s_sorted[last_pos]:
                end += 1
        seg_y = y_sorted[start:end]
        seg_s = s_sorted[start:end]
        n_pos = int(seg_y.sum())
        stats.append(BucketStat(
            index=len(stats),
            n=int(seg_y.size),
            n_pos=n_pos,
            score_lo=float(seg_s[0]),
            score_hi=float(seg_s[-1]),
            mean_pred=float(seg_s.mean()),
            empirical_ctr=n_pos / seg_y.size,
            bias=float(seg_s.mean() / (n_pos / seg_y.size)),
        ))
        pos_used += n_pos
        start = end
    # Trailing negatives above the last positive belong to the last bucket.
    if start < n:
        seg_s = s_sorted[start:]
        last = stats[-1]
        merged_n = last.n + seg_s.size
        merged_sum = last.mean_pred * last.n + seg_s.sum()
        stats[-1] = BucketStat(
            index=last.index,
            n=merged_n,
            n_pos=last.n_pos,
            score_lo=last.score_lo,
            score_hi=float(seg_s[-1]),
            mean_pred=float(merged_sum / merged_n),
            empirical_ctr=last.n_pos / merged_n,
            bias=float((merged_sum / merged_n) / (last.n_pos / merged_n)),
        )
    return BiasReport(buckets=tuple(stats))
