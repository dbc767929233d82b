"""Acceptance gate: one test per numbered criterion.

Each test is named ``test_criterion_NN_<name>``; the conftest hook prints a
PASS/FAIL line per criterion at the end of the run. Criteria 1-7 are
property checks on the loss/metric layer; 8-13 run the shipped experiment
configs end to end into temp directories; 14 reruns a command and compares
bytes. The heavy fixtures are session-scoped so each experiment runs once.
"""

import csv
import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from ctrlab import diagnostics, metrics
from ctrlab.data import effective_ctr
from ctrlab.harness import (
    FD_SPECS,
    cmd_bias_report,
    cmd_compare_losses,
    cmd_focal,
    cmd_negsample,
    cmd_sweep_beta,
    cmd_train,
    load_config,
    random_mixed_labels,
    random_fd_batch,
    slug,
)
from ctrlab.losses import (
    LOSS_KINDS,
    LabeledBatch,
    LossSpec,
    evaluate,
    focal_normalized_offset,
    log_sigmoid,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def read_rows(out_dir, name):
    with open(os.path.join(out_dir, name), newline="") as fh:
        return list(csv.DictReader(fh))


def neg_step_means(out_dir, curve_name, epoch=None):
    """{seed: {step: neg mean_abs}} from a grad-curve CSV, count>0 rows only."""
    out: dict[int, dict[int, float]] = {}
    for row in read_rows(out_dir, curve_name):
        if row["label_class"] != "neg" or int(row["count"]) == 0:
            continue
        if epoch is not None and int(row["epoch"]) != epoch:
            continue
        out.setdefault(int(row["seed"]), {})[int(row["step"])] = float(row["mean_abs"])
    return out


def seed_mean_of_step_means(per_seed):
    return float(np.mean([np.mean(list(steps.values())) for steps in per_seed.values()]))


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="session")
def sweep_beta_run(tmp_path_factory):
    cfg = load_config(str(CONFIGS / "sweep_beta.yaml"),
                      {"out": str(tmp_path_factory.mktemp("acc_sweep_beta"))})
    t0 = time.monotonic()
    assert cmd_sweep_beta(cfg) == 0
    return cfg, time.monotonic() - t0


@pytest.fixture(scope="session")
def compare_run(tmp_path_factory):
    cfg = load_config(str(CONFIGS / "compare_losses.yaml"),
                      {"out": str(tmp_path_factory.mktemp("acc_compare"))})
    assert cmd_compare_losses(cfg) == 0
    return cfg


@pytest.fixture(scope="session")
def focal_run(tmp_path_factory):
    cfg = load_config(str(CONFIGS / "focal.yaml"),
                      {"out": str(tmp_path_factory.mktemp("acc_focal"))})
    assert cmd_focal(cfg) == 0
    return cfg


@pytest.fixture(scope="session")
def negsample_run(tmp_path_factory):
    cfg = load_config(str(CONFIGS / "negsample.yaml"),
                      {"out": str(tmp_path_factory.mktemp("acc_negsample"))})
    assert cmd_negsample(cfg) == 0
    return cfg


@pytest.fixture(scope="session")
def bias_run(tmp_path_factory, compare_run):
    cfg = load_config(str(CONFIGS / "bias_report.yaml"),
                      {"out": str(tmp_path_factory.mktemp("acc_bias"))})
    cfg = dataclasses.replace(cfg, bias={**cfg.bias, "checkpoints": compare_run.out})
    assert cmd_bias_report(cfg) == 0
    return cfg


# ------------------------------------------------------- property criteria

def test_criterion_01_gradient_exactness():
    rng = np.random.default_rng(20260819)
    t0 = time.monotonic()
    worst = 0.0
    for kind in LOSS_KINDS:
        for _ in range(100):
            batch = random_fd_batch(rng, kind)
            worst = max(worst, diagnostics.finite_diff_check(FD_SPECS[kind], batch, 1e-6))
    elapsed = time.monotonic() - t0
    assert worst <= 1e-5, f"worst relative FD error {worst:.3e}"
    assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_criterion_02_bce_closed_form():
    rng = np.random.default_rng(2)
    t0 = time.monotonic()
    checked = 0
    worst = 0.0
    while checked < 10_000:
        n = int(rng.integers(2, 11))
        z = rng.uniform(-6.0, 6.0, n)
        y = random_mixed_labels(rng, n)
        beta = float(rng.uniform(0.05, 1.0))
        grad = evaluate(LossSpec("bce", beta_pos=beta), LabeledBatch(z, y)).grad_logits
        expected = np.where(y == 1, -beta * (1.0 - expit(z)) / n, expit(z) / n)
        worst = max(worst, float(np.max(np.abs(grad - expected))))
        checked += n
    elapsed = time.monotonic() - t0
    assert worst <= 1e-12, f"worst deviation {worst:.3e}"
    assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_criterion_03_sign_compatibility():
    rng = np.random.default_rng(3)
    t0 = time.monotonic()
    disagreements = 0
    for _ in range(1000):
        n = int(rng.integers(4, 65))
        batch = LabeledBatch(rng.normal(0.0, 2.0, n), random_mixed_labels(rng, n))
        if diagnostics.direction_audit(batch).agreement_fraction < 1.0:
            disagreements += 1
    elapsed = time.monotonic() - t0
    assert disagreements == 0
    assert elapsed < 5.0, f"took {elapsed:.1f}s"


def test_criterion_04_rank_dominance():
    rng = np.random.default_rng(4)
    t0 = time.monotonic()
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(4, 65))
        y = random_mixed_labels(rng, n)
        z = rng.normal(0.0, 2.0, n)
        z[y == 1] = np.minimum(rng.normal(-3.0, 0.5, int(y.sum())), -1e-3)
        report = diagnostics.dominance_check(LabeledBatch(z, y))
        violations += report.n_negatives - report.n_dominated
    elapsed = time.monotonic() - t0
    assert violations == 0
    assert elapsed < 5.0, f"took {elapsed:.1f}s"


def test_criterion_05_ranknet_invariants():
    rng = np.random.default_rng(5)
    spec = LossSpec("ranknet")
    worst_shift = 0.0
    worst_sum = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 65))
        y = random_mixed_labels(rng, n)
        z = rng.normal(0.0, 2.0, n)
        c = float(rng.uniform(-3.0, 3.0))
        base = evaluate(spec, LabeledBatch(z, y))
        shifted = evaluate(spec, LabeledBatch(z + c, y))
        worst_shift = max(worst_shift, abs(shifted.loss - base.loss),
                          float(np.max(np.abs(shifted.grad_logits - base.grad_logits))))
        worst_sum = max(worst_sum, abs(float(base.grad_logits.sum())))
    assert worst_shift < 1e-10, f"translation drift {worst_shift:.3e}"
    assert worst_sum < 1e-12, f"gradient sum {worst_sum:.3e}"


def test_criterion_06_effective_ctr():
    assert abs(effective_ctr(0.256, 0.1) - 0.0333) <= 0.0005


def test_criterion_07_auc_oracle():
    def brute_auc(scores, labels):
        pos = scores[labels == 1]
        neg = scores[labels != 1]
        wins = 0.0
        for p in pos:
            for q in neg:
                wins += 1.0 if p > q else (0.5 if p == q else 0.0)
        return wins / (pos.size * neg.size)

    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 16))
        y = random_mixed_labels(rng, n)
        scores = rng.integers(-8, 9, n) / 8.0      # coarse grid forces ties
        assert abs(metrics.auc(scores, y) - brute_auc(scores, y)) <= 1e-12


# ----------------------------------------------------- experiment criteria

def test_criterion_08_sparsity_gap(sweep_beta_run):
    cfg, elapsed = sweep_beta_run
    gaps = {float(r["beta_pos"]): float(r["d_auc_mean"])
            for r in read_rows(cfg.out, "beta_gaps.csv")}
    assert gaps[0.1] > gaps[0.8], f"gap at 0.1 {gaps[0.1]:.5f} vs 0.8 {gaps[0.8]:.5f}"
    assert gaps[0.1] > 0.0, f"gap at 0.1 {gaps[0.1]:.5f}"
    assert elapsed < 900.0, f"took {elapsed:.0f}s"


def test_criterion_09_vanishing_signature(compare_run):
    cp = neg_step_means(compare_run.out, "grad_curve_combined_pair.csv", epoch=1)
    bce = neg_step_means(compare_run.out, "grad_curve_bce.csv", epoch=1)
    fractions = []
    for seed in sorted(bce):
        common = sorted(set(cp[seed]) & set(bce[seed]))
        assert common, f"no matched epoch-1 steps for seed {seed}"
        fractions.append(np.mean([cp[seed][s] > bce[seed][s] for s in common]))
    seed_mean = float(np.mean(fractions))
    assert seed_mean >= 0.9, f"combined_pair above bce at {seed_mean:.3f} of steps"


def test_criterion_10_listwise_grad_floor(compare_run):
    means = {kind: seed_mean_of_step_means(
                 neg_step_means(compare_run.out, f"grad_curve_{kind}.csv", epoch=1))
             for kind in ("bce", "jrc", "combined_list", "rcr_combined")}
    for kind in ("jrc", "combined_list", "rcr_combined"):
        assert means[kind] > means["bce"], (
            f"{kind} epoch-1 neg grad {means[kind]:.3e} vs bce {means['bce']:.3e}")


def test_criterion_11_focal_family(focal_run):
    # gamma=0 rows must be byte-for-byte BCE rows apart from the kind label
    bce_rows = read_rows(focal_run.out, "results_bce.csv")
    all_rows = read_rows(focal_run.out, "results.csv")
    assert bce_rows
    for kind in ("focal", "focal_normalized"):
        rows = [dict(r, loss_kind="bce") for r in all_rows
                if r["loss_kind"] == kind and float(r["gamma"]) == 0.0]
        assert rows == bce_rows, f"gamma=0 {kind} rows differ from bce rows"

    # normalized focal: negative grad-norm mean non-decreasing in gamma
    gammas = sorted({float(r["gamma"]) for r in all_rows})
    assert gammas == [0.0, 1.0, 2.0]
    means = [seed_mean_of_step_means(neg_step_means(
                 focal_run.out, f"grad_curve_focal_normalized_gamma{slug(g)}.csv"))
             for g in gammas]
    assert all(b >= a for a, b in zip(means, means[1:])), (
        " -> ".join(f"{m:.3e}" for m in means))

    # applied negative weights average exactly 1
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 65))
        y = random_mixed_labels(rng, n)
        batch = LabeledBatch(rng.normal(-1.0, 1.5, n), y)
        for gamma in (0.0, 1.0, 2.0):
            pgam = np.exp(gamma * log_sigmoid(batch.logits[y == 0]))
            offset = focal_normalized_offset(batch, gamma)
            worst = max(worst, abs(float(np.mean(pgam + offset)) - 1.0))
    assert worst <= 1e-12, f"weight mean off by {worst:.2e}"


def test_criterion_12_negative_sampling(negsample_run):
    aucs = {float(r["keep_rate"]): float(r["test_auc_mean"])
            for r in read_rows(negsample_run.out, "keep_rate_summary.csv")}
    assert aucs[0.25] <= aucs[1.0], (
        f"auc at keep 0.25 {aucs[0.25]:.5f} vs keep 1.0 {aucs[1.0]:.5f}")


def test_criterion_13_calibration_bias(bias_run):
    errs = {r["loss_kind"]: float(r["mean_abs_bias_error"])
            for r in read_rows(bias_run.out, "bias_summary.csv")}
    assert errs["combined_pair"] <= errs["bce"], (
        f"combined_pair {errs['combined_pair']:.4f} vs bce {errs['bce']:.4f}")


def test_criterion_14_determinism(tmp_path):
    cfg = load_config(str(CONFIGS / "train.yaml"),
                      {"out": str(tmp_path / "run"), "seeds": [1]})
    assert cmd_train(cfg) == 0
    first = {p.name: p.read_bytes() for p in Path(cfg.out).iterdir()}
    assert cmd_train(cfg) == 0
    second = {p.name: p.read_bytes() for p in Path(cfg.out).iterdir()}
    assert first.keys() == second.keys()
    for name in sorted(first):
        assert first[name] == second[name], f"{name} changed between identical runs"
