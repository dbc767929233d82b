"""Tests for the gradient instruments: FD checker, grad stats, audits, landscape."""

import csv
from types import SimpleNamespace

import numpy as np
import pytest

import ctrlab.losses as losses
from ctrlab.data import VAL, Dataset
from ctrlab.diagnostics import (
    HIST_EDGES,
    N_HIST_BINS,
    GradStatsRecorder,
    direction_audit,
    dominance_check,
    finite_diff_check,
    grad_norm_report,
    grad_stats_to_csv,
    landscape_slice,
)
from ctrlab.errors import InvalidInputError
from ctrlab.losses import LabeledBatch, LossSpec
from ctrlab.model import ModelConfig, config_for_dataset, forward, encode_dataset, init_model


def healthy_batch(n=12, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int8)
    labels[: n // 3] = 1
    return LabeledBatch(rng.uniform(-2.0, 2.0, n), labels,
                        weights=rng.uniform(0.5, 2.0, n))


# --- finite_diff_check ---

@pytest.mark.parametrize("kind", ["bce", "ranknet", "combined_pair", "listnet", "focal"])
def test_fd_check_passes_on_healthy_batches(kind):
    spec = LossSpec(kind, alpha=0.7, gamma=1.0) if kind == "focal" else LossSpec(kind, alpha=0.7)
    assert finite_diff_check(spec, healthy_batch()) < 1e-6


def test_fd_check_accepts_bare_kind_string():
    assert finite_diff_check("bce", healthy_batch()) < 1e-6


def test_fd_check_catches_a_planted_gradient_bug(monkeypatch):
    # shift every analytic gradient by 1e-3 while leaving loss values alone;
    # the checker must notice
    real = losses.evaluate

    def skewed(spec, batch):
        out = real(spec, batch)
        return losses.LossOutput(out.loss, out.grad_logits + 1e-3)

    monkeypatch.setattr(losses, "evaluate", skewed)
    assert finite_diff_check("bce", healthy_batch()) > 1e-3


def test_fd_check_epsilon_bounds():
    for eps in (1e-9, 1e-3):
        with pytest.raises(InvalidInputError):
            finite_diff_check("bce", healthy_batch(), epsilon=eps)


def test_fd_check_dual_logits():
    rng = np.random.default_rng(4)
    labels = np.array([1, 0, 0, 1, 0, 0], dtype=np.int8)
    batch = LabeledBatch(None, labels, dual_logits=rng.uniform(-2, 2, (6, 2)))
    assert finite_diff_check(LossSpec("jrc", alpha=0.5), batch) < 1e-6


# --- grad_norm_report ---

def test_grad_norm_report_known_values():
    stats = grad_norm_report(np.array([0.5, -0.25, 0.1, -0.3]),
                             np.array([1, 0, 1, 0]), step=7)
    assert stats.step == 7
    assert stats.pos.count == 2 and stats.neg.count == 2
    assert stats.pos.mean_abs == pytest.approx(0.3)
    assert stats.pos.max_abs == 0.5
    assert stats.pos.p90_abs == pytest.approx(0.46)
    assert stats.neg.mean_abs == pytest.approx(0.275)
    assert stats.neg.max_abs == 0.3


def test_grad_norm_report_histogram_sums_to_count():
    rng = np.random.default_rng(1)
    grads = rng.normal(scale=0.1, size=500)
    labels = (rng.random(500) < 0.3).astype(np.int8)
    stats = grad_norm_report(grads, labels)
    assert stats.pos.histogram.sum() == stats.pos.count
    assert stats.neg.histogram.sum() == stats.neg.count
    assert stats.pos.count + stats.neg.count == 500


def test_grad_norm_report_clips_outliers_into_span():
    stats = grad_norm_report(np.array([1e-15, 1e3]), np.array([0, 0]))
    assert stats.neg.histogram.sum() == 2
    assert stats.neg.histogram[0] == 1      # tiny magnitude clipped up to 1e-12
    assert stats.neg.histogram[-1] == 1     # huge magnitude clipped down to 1e2


def test_grad_norm_report_dual_rows_use_l2_norm():
    grads = np.array([[3.0, 4.0], [0.0, 1.0]])
    stats = grad_norm_report(grads, np.array([1, 0]))
    assert stats.pos.mean_abs == 5.0
    assert stats.neg.mean_abs == 1.0


def test_grad_norm_report_empty_class():
    stats = grad_norm_report(np.array([0.1, 0.2]), np.array([0, 0]))
    assert stats.pos.count == 0
    assert stats.pos.mean_abs == 0.0
    assert stats.pos.histogram.sum() == 0


def test_grad_norm_report_length_mismatch():
    with pytest.raises(InvalidInputError):
        grad_norm_report(np.zeros(3), np.zeros(4))


def test_hist_edges_are_log_spaced():
    assert len(HIST_EDGES) == N_HIST_BINS + 1 == 57
    assert HIST_EDGES[0] == pytest.approx(1e-12)
    assert HIST_EDGES[-1] == pytest.approx(1e2)
    ratios = HIST_EDGES[1:] / HIST_EDGES[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)


# --- GradStatsRecorder ---

def fake_info(step, epoch=1):
    return SimpleNamespace(step=step, epoch=epoch,
                           grad_logits=np.array([0.1, -0.2]),
                           labels=np.array([1, 0]))


def test_recorder_samples_every_k_steps():
    rec = GradStatsRecorder(every=3)
    for s in range(1, 11):
        rec(fake_info(s, epoch=1 if s <= 5 else 2))
    assert [st.step for st in rec.stats] == [3, 6, 9]
    assert [st.step for st in rec.epoch_stats(1)] == [3]
    assert [st.step for st in rec.epoch_stats(2)] == [6, 9]


def test_recorder_rejects_zero_interval():
    with pytest.raises(InvalidInputError):
        GradStatsRecorder(every=0)


def test_grad_stats_csv_layout(tmp_path):
    rec = GradStatsRecorder()
    rec(fake_info(1))
    rec(fake_info(2))
    path = str(tmp_path / "stats.csv")
    grad_stats_to_csv(path, rec)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:7] == ["step", "epoch", "label_class", "count",
                           "mean_abs", "p90_abs", "max_abs"]
    assert len(rows[0]) == 7 + N_HIST_BINS
    assert len(rows) == 1 + 2 * 2          # header + (pos, neg) per recorded step
    assert rows[1][2] == "pos" and rows[2][2] == "neg"
    assert sum(int(c) for c in rows[1][7:]) == int(rows[1][3])
    assert float(rows[2][4]) == 0.2        # neg mean |grad| round-trips exactly


# --- direction/dominance audits ---

def test_direction_audit_signs_agree_on_mixed_batch():
    report = direction_audit(healthy_batch(n=20, seed=3))
    assert report.agreement_fraction == 1.0
    labels = healthy_batch(n=20, seed=3).labels
    assert np.all(report.bce_signs[labels == 1] == -1)
    assert np.all(report.bce_signs[labels == 0] == 1)
    assert np.array_equal(report.bce_signs, report.rank_signs)


def test_direction_audit_rejects_dual_logits():
    batch = LabeledBatch(None, np.array([1, 0]), dual_logits=np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        direction_audit(batch)


def test_dominance_holds_when_positives_sit_below_zero():
    rng = np.random.default_rng(5)
    n = 40
    labels = np.zeros(n, dtype=np.int8)
    labels[:8] = 1
    z = rng.uniform(-2, 2, n)
    z[:8] = rng.normal(-3.0, 0.5, 8)        # collapsed-positive regime
    report = dominance_check(LabeledBatch(z, labels))
    assert report.n_negatives == 32
    assert report.n_dominated == 32
    assert report.min_margin > 0.0


def test_dominance_can_fail_outside_the_collapsed_regime():
    # one confident positive: BCE still pushes the low negative, the ranking
    # pair is already saturated, so ranking does not dominate
    z = np.array([5.0, -5.0])
    labels = np.array([1, 0])
    report = dominance_check(LabeledBatch(z, labels))
    assert report.n_dominated == 0
    assert report.min_margin < 0.0


def test_dominance_rejects_dual_logits():
    batch = LabeledBatch(None, np.array([1, 0]), dual_logits=np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        dominance_check(batch)


# --- landscape_slice ---

def tiny_model_and_data():
    rng = np.random.default_rng(2)
    n = 24
    labels = np.zeros(n, dtype=np.int8)
    labels[::4] = 1
    ds = Dataset(cat_tokens=rng.integers(1, 100, (n, 2)).astype(np.uint64),
                 num_values=rng.normal(size=(n, 1)),
                 labels=labels, base_weight=np.ones(n),
                 split=np.zeros(n, dtype=np.uint8))
    cfg = config_for_dataset(ds, 8, embed_dim=2, hidden_sizes=(4,), seed=9)
    return cfg, init_model(cfg), ds


def test_landscape_center_is_exact_and_grid_square():
    cfg, params, ds = tiny_model_and_data()
    spec = LossSpec("combined_pair", alpha=0.8)
    sl = landscape_slice(cfg, params, ds, spec, radius=0.5, k=3, seed=1)
    assert sl.grid.shape == (7, 7)
    z = forward(cfg, params, encode_dataset(cfg, ds))
    direct = losses.evaluate(spec, LabeledBatch(z, ds.labels, weights=ds.base_weight)).loss
    assert sl.grid[3, 3] == direct == sl.center_loss
    assert sl.offsets[0] == -0.5 and sl.offsets[-1] == 0.5
    # perturbed cells actually moved
    assert np.any(sl.grid != sl.center_loss)


def test_landscape_zero_radius_is_flat():
    cfg, params, ds = tiny_model_and_data()
    sl = landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.0, k=2, seed=1)
    assert np.all(sl.grid == sl.center_loss)


def test_landscape_seed_determinism():
    cfg, params, ds = tiny_model_and_data()
    a = landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.3, k=2, seed=5)
    b = landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.3, k=2, seed=5)
    c = landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.3, k=2, seed=6)
    assert np.array_equal(a.grid, b.grid)
    assert not np.array_equal(a.grid, c.grid)


def test_landscape_rejects_bad_arguments():
    cfg, params, ds = tiny_model_and_data()
    with pytest.raises(InvalidInputError):
        landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.5, k=0)
    with pytest.raises(InvalidInputError):
        landscape_slice(cfg, params, ds, LossSpec("bce"), radius=-1.0, k=2)
    rows = encode_dataset(cfg, ds)
    with pytest.raises(InvalidInputError):
        landscape_slice(cfg, params, rows, LossSpec("bce"), radius=0.5, k=2)


def test_landscape_csv_roundtrip(tmp_path):
    cfg, params, ds = tiny_model_and_data()
    sl = landscape_slice(cfg, params, ds, LossSpec("bce"), radius=0.4, k=2, seed=3)
    path = str(tmp_path / "slice.csv")
    sl.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "a_offset\\b_offset"
    parsed = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    assert np.array_equal(parsed, sl.grid)   # repr round-trips float64 exactly
    assert [float(v) for v in rows[0][1:]] == list(sl.offsets)
