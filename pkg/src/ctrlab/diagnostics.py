"""Gradient-analysis instruments.

Four families of checks, all built on the closed-form loss gradients:

* ``finite_diff_check``: central differences per logit against the analytic
  gradient, the ground-truth gate for every loss kind.
* ``grad_norm_report`` / ``GradStatsRecorder``: per-class |grad| statistics
  (mean, p90, max, log-spaced histogram) per training step, the raw
  material for gradient-vanishing comparisons.
* ``direction_audit`` / ``dominance_check``: sign agreement between the
  classification and pairwise-ranking gradients, and the strict-dominance
  margin of the ranking gradient on negatives.
* ``landscape_slice``: loss surface on a 2-d slice through parameter space
  along filter-normalized random directions.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from . import losses
from .data import Dataset
from .errors import InvalidInputError
from .losses import LabeledBatch, LossSpec
from .model import EncodedRows, ModelConfig, ModelParams, encode_dataset, forward

# Histogram support: 56 log-spaced bins spanning [1e-12, 1e2]; magnitudes are
# clipped into the span so every sample lands in a bin.
HIST_EDGES = np.logspace(-12.0, 2.0, 57)
N_HIST_BINS = len(HIST_EDGES) - 1


def _as_spec(loss) -> LossSpec:
    return LossSpec(kind=loss) if isinstance(loss, str) else loss


def finite_diff_check(loss, batch: LabeledBatch, epsilon: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss`` is a LossSpec or bare kind string. The relative error per logit
    uses denominator max(|analytic|, 1e-10). The normalized focal loss is
    differentiated with its offset frozen at the unperturbed batch's value,
    matching the stop-gradient treatment in its analytic gradient.
    Degenerate-batch errors propagate to the caller.
    """
    spec = _as_spec(loss)
    if not 1e-8 <= epsilon <= 1e-4:
        raise InvalidInputError("epsilon must lie in [1e-8, 1e-4]")
    analytic = losses.evaluate(spec, batch).grad_logits

    if batch.dual_logits is not None:
        work = LabeledBatch(None, batch.labels, weights=batch.weights,
                            dual_logits=batch.dual_logits.copy())
        coords = work.dual_logits
    else:
        work = LabeledBatch(batch.logits.copy(), batch.labels, weights=batch.weights)
        coords = work.logits

    if spec.kind == "focal_normalized":
        offset = losses.focal_normalized_offset(batch, spec.gamma)

        def loss_at(b):
            return losses.focal_normalized(b, spec.gamma, frozen_offset=offset).loss
    else:
        def loss_at(b):
            return losses.evaluate(spec, b).loss

    flat = coords.reshape(-1)
    grad_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_at(work)
        flat[i] = orig - epsilon
        down = loss_at(work)
        flat[i] = orig
        fd = (up - down) / (2.0 * epsilon)
        rel = abs(fd - grad_flat[i]) / max(abs(grad_flat[i]), 1e-10)
        worst = max(worst, rel)
    return worst


@dataclasses.dataclass(frozen=True)
class ClassGradStats:
    count: int
    mean_abs: float
    p90_abs: float
    max_abs: float
    histogram: np.ndarray  # int64 counts per HIST_EDGES bin, sums to count


@dataclasses.dataclass(frozen=True)
class GradStats:
    step: int
    pos: ClassGradStats
    neg: ClassGradStats


def _class_stats(mags: np.ndarray) -> ClassGradStats:
    if mags.size == 0:
        return ClassGradStats(0, 0.0, 0.0, 0.0, np.zeros(N_HIST_BINS, dtype=np.int64))
    hist, _ = np.histogram(np.clip(mags, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
    return ClassGradStats(int(mags.size), float(mags.mean()),
                          float(np.percentile(mags, 90.0)), float(mags.max()),
                          hist.astype(np.int64))


def grad_norm_report(grad_logits: np.ndarray, labels: np.ndarray, step: int = 0) -> GradStats:
    """Per-class |gradient| statistics; dual-logit rows use the row's L2 norm."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if grad_logits.shape[0] != labels.shape[0]:
        raise InvalidInputError("grad_logits and labels lengths differ")
    if grad_logits.ndim == 2:
        mags = np.linalg.norm(grad_logits, axis=1)
    else:
        mags = np.abs(grad_logits)
    return GradStats(step=step, pos=_class_stats(mags[labels == 1]),
                     neg=_class_stats(mags[labels != 1]))


class GradStatsRecorder:
    """Per-step hook for train(): records grad_norm_report every `every` steps."""

    def __init__(self, every: int = 1):
        if every < 1:
            raise InvalidInputError("every must be >= 1")
        self.every = every
        self.epochs: list[int] = []
        self.stats: list[GradStats] = []

    def __call__(self, info) -> None:
        if info.step % self.every:
            return
        self.epochs.append(info.epoch)
        self.stats.append(grad_norm_report(info.grad_logits, info.labels, info.step))

    def epoch_stats(self, epoch: int) -> list[GradStats]:
        return [s for e, s in zip(self.epochs, self.stats) if e == epoch]


def grad_stats_to_csv(path: str, recorder: GradStatsRecorder) -> None:
    """One row per step per class: summary stats plus the histogram counts."""
    header = ["step", "epoch", "label_class", "count", "mean_abs", "p90_abs", "max_abs"]
    header += [f"bin_{i:02d}" for i in range(N_HIST_BINS)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for epoch, stats in zip(recorder.epochs, recorder.stats):
            for cls, rec in (("pos", stats.pos), ("neg", stats.neg)):
                row = [stats.step, epoch, cls, rec.count, repr(rec.mean_abs),
                       repr(rec.p90_abs), repr(rec.max_abs)]
                writer.writerow(row + [int(c) for c in rec.histogram])


@dataclasses.dataclass(frozen=True)
class DirectionReport:
    bce_signs: np.ndarray
    rank_signs: np.ndarray
    agreement_fraction: float


def direction_audit(batch: LabeledBatch) -> DirectionReport:
    """Sign agreement of classification vs pairwise-ranking gradients per sample."""
    if batch.dual_logits is not None:
        raise InvalidInputError("direction audit is defined for scalar logits")
    g_bce = losses.bce(batch).grad_logits
    g_rank = losses.ranknet_pairwise(batch).grad_logits
    s_bce = np.sign(g_bce).astype(np.int8)
    s_rank = np.sign(g_rank).astype(np.int8)
    return DirectionReport(s_bce, s_rank, float(np.mean(s_bce == s_rank)))


@dataclasses.dataclass(frozen=True)
class DominanceReport:
    n_negatives: int
    n_dominated: int
    min_margin: float


def dominance_check(batch: LabeledBatch) -> DominanceReport:
    """Margin of the ranking gradient over the classification gradient on negatives.

    Strict domination of every negative is guaranteed only when all positive
    logits are below zero; outside that regime this is a report, not an
    assertion.
    """
    if batch.dual_logits is not None:
        raise InvalidInputError("dominance check is defined for scalar logits")
    g_bce = losses.bce(batch).grad_logits
    g_rank = losses.ranknet_pairwise(batch).grad_logits
    neg = batch.labels != 1
    margins = g_rank[neg] - g_bce[neg]
    return DominanceReport(int(neg.sum()), int(np.sum(margins > 0.0)),
                           float(margins.min()))


@dataclasses.dataclass(frozen=True)
class LandscapeSlice:
    grid: np.ndarray       # (2k+1, 2k+1) loss values; grid[k, k] is the center
    offsets: np.ndarray    # the shared axis radius*{-k..k}/k
    radius: float
    center_loss: float
    direction_a: ModelParams
    direction_b: ModelParams

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            # float() first: repr of a numpy scalar is "np.float64(...)"
            writer.writerow(["a_offset\\b_offset"] + [repr(float(b)) for b in self.offsets])
            for a, row in zip(self.offsets, self.grid):
                writer.writerow([repr(float(a))] + [repr(float(v)) for v in row])


def _filter_normalized_direction(params: ModelParams, rng: np.random.Generator) -> ModelParams:
    # Each array's random direction is rescaled to that array's parameter norm,
    # so layers with small weights get proportionally small perturbations.
    out = params.copy()
    for arr in out.arrays():
        d = rng.standard_normal(arr.shape)
        dn = np.linalg.norm(d)
        arr[:] = d * (np.linalg.norm(arr) / dn) if dn > 0 else 0.0
    return out


def landscape_slice(model_config: ModelConfig, params: ModelParams,
                    dataset: Dataset | EncodedRows, loss_spec: LossSpec,
                    radius: float, k: int, seed: int = 0,
                    labels: np.ndarray | None = None,
                    weights: np.ndarray | None = None) -> LandscapeSlice:
    """Loss values on a (2k+1)^2 grid spanned by two filter-normalized directions.

    ``dataset`` may be a Dataset (labels/weights read from it) or pre-encoded
    rows with explicit labels. The center cell is evaluated at the exact
    unperturbed parameters.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if radius < 0:
        raise InvalidInputError("radius must be >= 0")
    if isinstance(dataset, Dataset):
        rows = encode_dataset(model_config, dataset)
        labels = dataset.labels
        weights = dataset.base_weight
    else:
        rows = dataset
        if labels is None:
            raise InvalidInputError("labels required with pre-encoded rows")

    def batch_for(z):
        if model_config.n_outputs == 1:
            return LabeledBatch(z, labels, weights=weights)
        return LabeledBatch(None, labels, weights=weights, dual_logits=z)

    rng = np.random.default_rng(seed)
    d1 = _filter_normalized_direction(params, rng)
    d2 = _filter_normalized_direction(params, rng)
    offsets = radius * np.arange(-k, k + 1) / k
    grid = np.empty((2 * k + 1, 2 * k + 1))
    center_loss = losses.evaluate(loss_spec, batch_for(forward(model_config, params, rows))).loss

    work = params.copy()
    w_arrays = work.arrays()
    c_arrays = params.arrays()
    d1_arrays = d1.arrays()
    d2_arrays = d2.arrays()
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            if i == k and j == k:
                grid[i, j] = center_loss
                continue
            for w, c, da, db in zip(w_arrays, c_arrays, d1_arrays, d2_arrays):
                np.multiply(da, a, out=w)
                w += b * db
                w += c
            z = forward(model_config, work, rows)
            grid[i, j] = losses.evaluate(loss_spec, batch_for(z)).loss
    return LandscapeSlice(grid, offsets, float(radius), center_loss, d1, d2)
