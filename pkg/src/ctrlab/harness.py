"""Experiment orchestration: configs, training runs, CSV/manifest emission.

Each command takes an ExperimentConfig (usually loaded from a YAML file,
with CLI overrides applied), runs a grid of training points, and writes:

* ``results.csv``: one row per (grid point, seed, epoch), fixed column set.
* per-command side tables (gap tables, grad curves, bias buckets, ...).
* ``errors.csv``: one row per grid point that failed; failures never abort
  the remaining points.
* ``manifest.json``: config echo, sha256 of every output file, and the
  outcome of each directional check. No timestamps, so identical runs are
  byte-identical end to end.

Directional claims are computed on every run and recorded in the manifest;
they only affect the exit code when the config enables assertion mode
(``--assert``). ``gradcheck``'s gates are always enforced.

Evaluation protocol: logloss is weighted (loss beta_pos applied to positive
samples for the loss kinds that consume it), AUC is unweighted; with a
uniform per-class weight the weighted AUC is identical anyway.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import diagnostics, metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    TEST,
    CsvSchema,
    Dataset,
    SyntheticConfig,
    concat,
    generate_synthetic,
    load_csv,
    negative_sample,
)
from .errors import ConfigError, CtrlabError, UndefinedMetricError
from .losses import (
    DUAL_LOGIT_KINDS,
    LOSS_KINDS,
    LabeledBatch,
    LossSpec,
    evaluate,
    focal_normalized_offset,
    log_sigmoid,
)
from .model import (
    ModelConfig,
    TrainConfig,
    derive_seed,
    encode_dataset,
    eval_beta,
    init_model,
    predict_pctr,
    train,
)

RESULT_COLUMNS = (
    "experiment", "seed", "loss_kind", "alpha", "beta_pos", "gamma", "keep_rate",
    "epoch", "train_logloss", "val_logloss", "val_auc", "test_logloss", "test_auc",
    "neg_grad_mean", "neg_grad_p90",
)

FD_TOLERANCE = 1e-5


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))   # float() strips numpy scalar wrappers from repr
    return str(v)


def _check_keys(mapping: Mapping, allowed: Iterable[str], where: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def slug(value: float) -> str:
    """File-name-safe rendering of a grid value: 0.25 -> '0_25', 1.0 -> '1'."""
    s = f"{value:g}".replace("-", "m").replace(".", "_")
    return s


@dataclasses.dataclass(frozen=True)
class LossSettings:
    """A LossSpec plus the explicit rank-side weight for the manifest echo."""

    kind: str
    alpha: float = 1.0
    gamma: float = 0.0
    beta_pos: float = 1.0

    def spec(self) -> LossSpec:
        return LossSpec(self.kind, alpha=self.alpha, gamma=self.gamma,
                        beta_pos=self.beta_pos)

    @property
    def rank_weight(self) -> float:
        return 1.0 - self.alpha

    def replace(self, **kw) -> "LossSettings":
        return dataclasses.replace(self, **kw)

    @staticmethod
    def from_mapping(d: Mapping, where: str) -> "LossSettings":
        _check_keys(d, ("kind", "alpha", "rank_weight", "gamma", "beta_pos"), where)
        if "kind" not in d:
            raise ConfigError(f"{where}: loss kind is required")
        kind = str(d["kind"])
        alpha = d.get("alpha")
        rank_weight = d.get("rank_weight")
        # both weights may be stated; they must then agree
        if alpha is None and rank_weight is None:
            alpha = 1.0
        elif alpha is None:
            alpha = 1.0 - float(rank_weight)
        elif rank_weight is not None and abs(float(alpha) + float(rank_weight) - 1.0) > 1e-12:
            raise ConfigError(f"{where}: alpha and rank_weight must sum to 1")
        settings = LossSettings(kind, alpha=float(alpha),
                                gamma=float(d.get("gamma", 0.0)),
                                beta_pos=float(d.get("beta_pos", 1.0)))
        settings.spec()  # validate eagerly
        return settings


@dataclasses.dataclass(frozen=True)
class DataSection:
    source: str                      # "synthetic" or "csv"
    synthetic: Mapping | None = None
    csv_path: str | None = None
    csv_label: str = "label"
    csv_numeric: tuple[str, ...] = ()
    csv_categorical: tuple[str, ...] = ()

    def build(self, seed: int) -> Dataset:
        """Materialize the dataset for one run seed (per-seed derived sub-seed)."""
        if self.source == "synthetic":
            return generate_synthetic(SyntheticConfig(
                seed=derive_seed(seed, "data"), **dict(self.synthetic)))
        schema = CsvSchema(label=self.csv_label, numeric=self.csv_numeric,
                           categorical=self.csv_categorical)
        return load_csv(self.csv_path, schema, split_seed=derive_seed(seed, "split"))

    @staticmethod
    def from_mapping(d: Mapping) -> "DataSection":
        _check_keys(d, ("source", "synthetic", "csv"), "data")
        source = d.get("source", "synthetic")
        if source == "synthetic":
            syn = dict(d.get("synthetic", {}))
            _check_keys(syn, ("n_samples", "target_base_ctr", "n_categorical_fields",
                              "n_numeric_fields", "vocab_size", "noise_sigma"),
                        "data.synthetic")
            syn.setdefault("n_samples", 20000)
            syn.setdefault("target_base_ctr", 0.033)
            if isinstance(syn.get("vocab_size"), list):
                syn["vocab_size"] = tuple(syn["vocab_size"])
            return DataSection(source="synthetic", synthetic=syn)
        if source == "csv":
            c = dict(d.get("csv", {}))
            _check_keys(c, ("path", "label", "numeric", "categorical"), "data.csv")
            if "path" not in c:
                raise ConfigError("data.csv.path is required for csv source")
            return DataSection(source="csv", csv_path=str(c["path"]),
                               csv_label=str(c.get("label", "label")),
                               csv_numeric=tuple(c.get("numeric", ())),
                               csv_categorical=tuple(c.get("categorical", ())))
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {source!r}")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    out: str
    seeds: tuple[int, ...]
    data: DataSection
    model: Mapping                     # kwargs for ModelConfig minus layout/seed
    train: Mapping                     # kwargs for TrainConfig minus shuffle_seed
    loss: LossSettings
    loss_grid: tuple[LossSettings, ...]
    beta_grid: tuple[float, ...]
    alpha_grid: tuple[float, ...]
    gamma_grid: tuple[float, ...]
    keep_rate_grid: tuple[float, ...]
    grad_log_every: int
    gradcheck_batches: int
    gradcheck_property_batches: int
    landscape: Mapping
    bias: Mapping
    assert_checks: bool
    loss_filter: str | None
    echo: Mapping                      # the merged raw config, for the manifest

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(shuffle_seed=derive_seed(seed, "shuffle"), **dict(self.train))

    def model_config(self, dataset: Dataset, kind: str, seed: int) -> ModelConfig:
        kw = dict(self.model)
        buckets = kw.pop("hash_buckets", 1024)
        if isinstance(buckets, (list, tuple)):
            buckets = tuple(int(b) for b in buckets)
        else:
            buckets = (int(buckets),) * dataset.n_cat_fields
        if "hidden_sizes" in kw:
            kw["hidden_sizes"] = tuple(kw["hidden_sizes"])
        return ModelConfig(hash_buckets=buckets, n_numeric=dataset.n_num_fields,
                           n_outputs=2 if kind in DUAL_LOGIT_KINDS else 1,
                           seed=derive_seed(seed, "model"), **kw)


_TOP_KEYS = ("experiment", "out", "seeds", "data", "model", "train", "loss",
             "loss_grid", "grids", "diagnostics", "gradcheck", "landscape", "bias")


def load_config(path: str | None = None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Read a YAML config and apply CLI overrides; flags beat file keys."""
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
    overrides = dict(overrides or {})
    if overrides.get("seeds") is not None:
        raw["seeds"] = overrides["seeds"]
    if overrides.get("out") is not None:
        raw["out"] = overrides["out"]
    assert_checks = bool(overrides.get("assert_checks", False))
    loss_filter = overrides.get("loss_filter")
    if loss_filter is not None and loss_filter not in LOSS_KINDS:
        raise ConfigError(f"--loss must be one of {', '.join(LOSS_KINDS)}")

    _check_keys(raw, _TOP_KEYS, "config")
    seeds = tuple(int(s) for s in raw.get("seeds", (1, 2, 3)))
    if not seeds:
        raise ConfigError("seeds must be non-empty")

    model = dict(raw.get("model", {}))
    _check_keys(model, ("hash_buckets", "embed_dim", "hidden_sizes", "activation",
                        "init_scale"), "model")
    train_kw = dict(raw.get("train", {}))
    _check_keys(train_kw, ("optimizer", "learning_rate", "batch_size", "epochs",
                           "adam_beta1", "adam_beta2", "adam_eps"), "train")

    grids = dict(raw.get("grids", {}))
    _check_keys(grids, ("beta", "alpha", "gamma", "keep_rate"), "grids")

    diag = dict(raw.get("diagnostics", {}))
    _check_keys(diag, ("grad_log_every",), "diagnostics")
    gc = dict(raw.get("gradcheck", {}))
    _check_keys(gc, ("n_batches", "n_property_batches"), "gradcheck")
    landscape = dict(raw.get("landscape", {}))
    _check_keys(landscape, ("radius", "k", "sample_size", "checkpoints", "kinds"),
                "landscape")
    bias = dict(raw.get("bias", {}))
    _check_keys(bias, ("n_buckets", "checkpoints"), "bias")

    loss = LossSettings.from_mapping(raw.get("loss", {"kind": "bce"}), "loss")
    loss_grid = tuple(LossSettings.from_mapping(d, f"loss_grid[{i}]")
                      for i, d in enumerate(raw.get("loss_grid", ())))

    echo = dict(raw)
    echo["seeds"] = list(seeds)
    echo["assert"] = assert_checks

    return ExperimentConfig(
        experiment=str(raw.get("experiment", "adhoc")),
        out=str(raw.get("out", "runs/adhoc")),
        seeds=seeds,
        data=DataSection.from_mapping(raw.get("data", {})),
        model=model,
        train=train_kw,
        loss=loss,
        loss_grid=loss_grid,
        beta_grid=tuple(float(b) for b in grids.get("beta", (0.8, 0.6, 0.4, 0.2, 0.1))),
        alpha_grid=tuple(float(a) for a in grids.get("alpha", (1.0, 0.9, 0.7, 0.5, 0.3, 0.1))),
        gamma_grid=tuple(float(g) for g in grids.get("gamma", (0.0, 1.0, 2.0))),
        keep_rate_grid=tuple(float(k) for k in grids.get("keep_rate", (1.0, 0.5, 0.25))),
        grad_log_every=int(diag.get("grad_log_every", 1)),
        gradcheck_batches=int(gc.get("n_batches", 100)),
        gradcheck_property_batches=int(gc.get("n_property_batches", 1000)),
        landscape=landscape,
        bias=bias,
        assert_checks=assert_checks,
        loss_filter=loss_filter,
        echo=echo,
    )


# ---------------------------------------------------------------------------
# training points


@dataclasses.dataclass(frozen=True)
class ResultRow:
    experiment: str
    seed: int
    loss_kind: str
    alpha: float
    beta_pos: float
    gamma: float
    keep_rate: float
    epoch: int
    train_logloss: float
    val_logloss: float
    val_auc: float
    test_logloss: float
    test_auc: float
    neg_grad_mean: float
    neg_grad_p90: float

    def to_list(self) -> list:
        return [getattr(self, c) for c in RESULT_COLUMNS]


@dataclasses.dataclass
class PointResult:
    rows: list[ResultRow]
    recorder: diagnostics.GradStatsRecorder
    model_config: ModelConfig
    params: object
    final_test_auc: float
    final_test_logloss: float


def _epoch_grad_aggregate(recorder: diagnostics.GradStatsRecorder, epoch: int) -> tuple[float, float]:
    stats = [s for s in recorder.epoch_stats(epoch) if s.neg.count]
    if not stats:
        return float("nan"), float("nan")
    return (float(np.mean([s.neg.mean_abs for s in stats])),
            float(np.mean([s.neg.p90_abs for s in stats])))


def run_training_point(cfg: ExperimentConfig, dataset: Dataset, settings: LossSettings,
                       seed: int, keep_rate: float = 1.0) -> PointResult:
    """Train one (loss settings, seed) point and collect its result rows."""
    spec = settings.spec()
    model_config = cfg.model_config(dataset, settings.kind, seed)
    params = init_model(model_config)
    recorder = diagnostics.GradStatsRecorder(cfg.grad_log_every)

    test_idx = dataset.split_indices(TEST)
    enc_test = encode_dataset(model_config, dataset, test_idx)
    y_test = dataset.labels[test_idx]
    w_test = dataset.base_weight[test_idx] * np.where(y_test == 1, eval_beta(spec), 1.0)
    test_by_epoch: dict[int, tuple[float, float]] = {}

    def eval_test(epoch: int, p) -> None:
        pred = predict_pctr(model_config, p, enc_test)
        ll = metrics.logloss(pred, y_test, w_test)
        try:
            a = metrics.auc(pred, y_test)
        except UndefinedMetricError:
            a = float("nan")
        test_by_epoch[epoch] = (ll, a)

    log = train(model_config, params, dataset, spec, cfg.train_config(seed),
                hooks=(recorder,), epoch_hooks=(eval_test,))

    rows = []
    for rec in log.epoch_records:
        if rec.epoch == 0:
            continue
        ll, a = test_by_epoch[rec.epoch]
        gmean, gp90 = _epoch_grad_aggregate(recorder, rec.epoch)
        rows.append(ResultRow(
            experiment=cfg.experiment, seed=seed, loss_kind=settings.kind,
            alpha=settings.alpha, beta_pos=settings.beta_pos, gamma=settings.gamma,
            keep_rate=keep_rate, epoch=rec.epoch, train_logloss=rec.train_logloss,
            val_logloss=rec.val_logloss, val_auc=rec.val_auc, test_logloss=ll,
            test_auc=a, neg_grad_mean=gmean, neg_grad_p90=gp90))
    final_epoch = log.epoch_records[-1].epoch
    return PointResult(rows, recorder, model_config, params,
                       final_test_auc=test_by_epoch[final_epoch][1],
                       final_test_logloss=test_by_epoch[final_epoch][0])


# ---------------------------------------------------------------------------
# output plumbing


def write_results_csv(path: str, rows: Sequence[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in row.to_list()])


def write_table(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_grad_curves(path: str, per_seed: Sequence[tuple[int, diagnostics.GradStatsRecorder]]) -> None:
    """Per-step per-class grad-norm summaries for one method, all seeds."""
    header = ["seed", "step", "epoch", "label_class", "count", "mean_abs",
              "p90_abs", "max_abs"]
    rows = []
    for seed, recorder in per_seed:
        for epoch, st in zip(recorder.epochs, recorder.stats):
            for cls, rec in (("pos", st.pos), ("neg", st.neg)):
                rows.append([seed, st.step, epoch, cls, rec.count, rec.mean_abs,
                             rec.p90_abs, rec.max_abs])
    write_table(path, header, rows)


@dataclasses.dataclass
class Check:
    name: str
    passed: bool
    detail: str


class CommandOutput:
    """Accumulates files, checks, and point errors; writes the manifest last."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out_dir = cfg.out
        os.makedirs(self.out_dir, exist_ok=True)
        self.files: list[str] = []
        self.checks: list[Check] = []
        self.errors: list[tuple[str, str]] = []   # (point id, message)

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.out_dir, name)

    def record_error(self, point: str, exc: Exception) -> None:
        self.errors.append((point, f"{type(exc).__name__}: {exc}"))

    def check(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(Check(name, bool(passed), detail))
        print(f"[check] {name}: {'PASS' if passed else 'FAIL'} ({detail})")

    def finish(self, enforce: bool) -> int:
        with open(os.path.join(self.out_dir, "errors.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point", "error"])
            writer.writerows(self.errors)
        self.files.append("errors.csv")
        manifest = {
            "command": self.command,
            "config": _jsonable(self.cfg.echo),
            "outputs": {},
            "checks": [dataclasses.asdict(c) for c in self.checks],
            "checks_enforced": bool(enforce),
            "n_point_errors": len(self.errors),
        }
        for name in sorted(set(self.files)):
            with open(os.path.join(self.out_dir, name), "rb") as fh:
                manifest["outputs"][name] = hashlib.sha256(fh.read()).hexdigest()
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        n_fail = sum(1 for c in self.checks if not c.passed)
        print(f"{self.command}: {len(self.files) + 1} files in {self.out_dir}; "
              f"{len(self.checks) - n_fail}/{len(self.checks)} checks passed; "
              f"{len(self.errors)} point errors")
        if enforce and n_fail:
            return 2
        return 0


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _seed_mean(values: Iterable[float]) -> float:
    vals = [v for v in values]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# gradcheck batch generation (shared with the test suite)


FD_SPECS = {
    "bce": LossSpec("bce", beta_pos=0.5),
    "ranknet": LossSpec("ranknet"),
    "combined_pair": LossSpec("combined_pair", alpha=0.6, beta_pos=0.7),
    "listnet": LossSpec("listnet"),
    "combined_list": LossSpec("combined_list", alpha=0.5, beta_pos=0.5),
    "rcr_rank": LossSpec("rcr_rank"),
    "rcr_combined": LossSpec("rcr_combined", alpha=0.7, beta_pos=0.8),
    "jrc": LossSpec("jrc", alpha=0.5),
    "focal": LossSpec("focal", gamma=2.0),
    "focal_normalized": LossSpec("focal_normalized", gamma=2.0),
}


def random_mixed_labels(rng: np.random.Generator, n: int, pos_rate: float = 0.3) -> np.ndarray:
    y = (rng.random(n) < pos_rate).astype(np.int8)
    if y.sum() == 0:
        y[rng.integers(n)] = 1
    if y.sum() == n:
        y[rng.integers(n)] = 0
    return y


def random_fd_batch(rng: np.random.Generator, kind: str, min_grad: float = 1e-4) -> LabeledBatch:
    """Random mixed batch whose gradient coordinates a central difference at
    eps=1e-6 can resolve: float64 rounding puts ~3e-10 of absolute noise on
    the difference quotient, so coordinates below ~3e-5 measure noise, not
    correctness. The 1e-4 floor keeps the relative noise near 1e-6, an order
    of magnitude inside the 1e-5 gate; smaller batches are redrawn."""
    spec = FD_SPECS[kind]
    for _ in range(200):
        n = int(rng.integers(4, 33))
        y = random_mixed_labels(rng, n)
        w = rng.uniform(0.5, 2.0, n)
        if kind in DUAL_LOGIT_KINDS:
            batch = LabeledBatch(None, y, weights=w,
                                 dual_logits=rng.uniform(-2.2, 2.2, (n, 2)))
        else:
            batch = LabeledBatch(rng.uniform(-2.2, 2.2, n), y, weights=w)
        grad = evaluate(spec, batch).grad_logits
        if np.abs(grad).min() >= min_grad:
            return batch
    raise RuntimeError(f"could not draw a resolvable batch for {kind}")


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "gradcheck")
    kinds = [cfg.loss_filter] if cfg.loss_filter else list(LOSS_KINDS)
    rng = np.random.default_rng(derive_seed(cfg.seeds[0], "gradcheck"))
    table = []
    for kind in kinds:
        worst = 0.0
        for _ in range(cfg.gradcheck_batches):
            batch = random_fd_batch(rng, kind)
            worst = max(worst, diagnostics.finite_diff_check(FD_SPECS[kind], batch, 1e-6))
        table.append([kind, cfg.gradcheck_batches, worst, FD_TOLERANCE,
                      worst <= FD_TOLERANCE])
        out.check(f"finite_diff[{kind}]", worst <= FD_TOLERANCE,
                  f"worst rel err {worst:.3e}")
    write_table(out.path("gradcheck.csv"),
                ["loss_kind", "n_batches", "worst_rel_err", "tolerance", "passed"],
                table)

    if cfg.loss_filter is None or cfg.loss_filter in ("bce", "ranknet"):
        n_prop = cfg.gradcheck_property_batches
        disagreements = 0
        violations = 0
        for _ in range(n_prop):
            n = int(rng.integers(4, 65))
            y = random_mixed_labels(rng, n)
            z = rng.normal(0.0, 2.0, n)
            if diagnostics.direction_audit(LabeledBatch(z, y)).agreement_fraction < 1.0:
                disagreements += 1
            zd = np.where(y == 1, rng.normal(-3.0, 0.5, n), rng.normal(0.0, 2.0, n))
            rep = diagnostics.dominance_check(LabeledBatch(zd, y))
            violations += rep.n_negatives - rep.n_dominated
        out.check("direction_agreement", disagreements == 0,
                  f"{disagreements} disagreeing batches of {n_prop}")
        out.check("dominance", violations == 0,
                  f"{violations} undominated negatives over {n_prop} batches")
    return out.finish(enforce=True)


def cmd_train(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "train")
    rows: list[ResultRow] = []
    for seed in cfg.seeds:
        point = f"train[{cfg.loss.kind}]seed{seed}"
        try:
            dataset = cfg.data.build(seed)
            res = run_training_point(cfg, dataset, cfg.loss, seed)
            rows.extend(res.rows)
            save_checkpoint(out.path(f"ckpt_{cfg.loss.kind}_seed{seed}.bin"),
                            res.model_config, res.params)
            diagnostics.grad_stats_to_csv(out.path(f"grad_stats_seed{seed}.csv"),
                                          res.recorder)
        except CtrlabError as exc:
            out.record_error(point, exc)
    write_results_csv(out.path("results.csv"), rows)
    return out.finish(enforce=cfg.assert_checks)


def cmd_sweep_beta(cfg: ExperimentConfig) -> int:
    """BCE vs the pairwise combination over the positive down-weight grid."""
    out = CommandOutput(cfg, "sweep-beta")
    rows: list[ResultRow] = []
    # final-epoch test metrics: metric[(kind, beta, seed)] = (auc, logloss)
    final: dict[tuple[str, float, int], tuple[float, float]] = {}
    for seed in cfg.seeds:
        try:
            dataset = cfg.data.build(seed)
        except CtrlabError as exc:
            out.record_error(f"data_seed{seed}", exc)
            continue
        for beta in cfg.beta_grid:
            for settings in (LossSettings("bce", beta_pos=beta),
                             cfg.loss.replace(kind="combined_pair", beta_pos=beta)):
                point = f"beta{slug(beta)}[{settings.kind}]seed{seed}"
                try:
                    res = run_training_point(cfg, dataset, settings, seed)
                    rows.extend(res.rows)
                    final[(settings.kind, beta, seed)] = (res.final_test_auc,
                                                          res.final_test_logloss)
                except CtrlabError as exc:
                    out.record_error(point, exc)
    write_results_csv(out.path("results.csv"), rows)

    gap_rows = []
    gaps: dict[float, float] = {}
    for beta in cfg.beta_grid:
        dauc, dll = [], []
        for seed in cfg.seeds:
            if ("bce", beta, seed) in final and ("combined_pair", beta, seed) in final:
                auc_b, ll_b = final[("bce", beta, seed)]
                auc_c, ll_c = final[("combined_pair", beta, seed)]
                dauc.append(auc_c - auc_b)
                dll.append(ll_b - ll_c)
        gaps[beta] = _seed_mean(dauc)
        gap_rows.append([beta, _seed_mean(dauc), _seed_mean(dll), len(dauc)])
    write_table(out.path("beta_gaps.csv"),
                ["beta_pos", "d_auc_mean", "d_logloss_mean", "n_seeds"], gap_rows)

    lo, hi = min(cfg.beta_grid), max(cfg.beta_grid)
    out.check("gap_grows_with_sparsity", gaps[lo] > gaps[hi],
              f"d_auc at beta={lo:g} is {gaps[lo]:.5f}, at beta={hi:g} is {gaps[hi]:.5f}")
    out.check("gap_positive_at_sparsest", gaps[lo] > 0,
              f"d_auc at beta={lo:g} is {gaps[lo]:.5f}")
    return out.finish(enforce=cfg.assert_checks)


def cmd_sweep_alpha(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "sweep-alpha")
    rows: list[ResultRow] = []
    bce_rows: list[ResultRow] = []
    alpha1_rows: list[ResultRow] = []
    final: dict[tuple[float, int], tuple[float, float]] = {}
    for seed in cfg.seeds:
        try:
            dataset = cfg.data.build(seed)
        except CtrlabError as exc:
            out.record_error(f"data_seed{seed}", exc)
            continue
        try:
            bce_rows.extend(run_training_point(
                cfg, dataset, LossSettings("bce", beta_pos=cfg.loss.beta_pos),
                seed).rows)
        except CtrlabError as exc:
            out.record_error(f"alpha[bce]seed{seed}", exc)
        for alpha in cfg.alpha_grid:
            settings = cfg.loss.replace(kind="combined_pair", alpha=alpha)
            point = f"alpha{slug(alpha)}seed{seed}"
            try:
                res = run_training_point(cfg, dataset, settings, seed)
                rows.extend(res.rows)
                if alpha == 1.0:
                    alpha1_rows.extend(res.rows)
                final[(alpha, seed)] = (res.final_test_auc, res.final_test_logloss)
            except CtrlabError as exc:
                out.record_error(point, exc)
    write_results_csv(out.path("results.csv"), rows)
    write_results_csv(out.path("results_bce.csv"), bce_rows)

    trade_rows = []
    mean_by_alpha: dict[float, tuple[float, float]] = {}
    for alpha in cfg.alpha_grid:
        aucs = [final[(alpha, s)][0] for s in cfg.seeds if (alpha, s) in final]
        lls = [final[(alpha, s)][1] for s in cfg.seeds if (alpha, s) in final]
        mean_by_alpha[alpha] = (_seed_mean(aucs), _seed_mean(lls))
        trade_rows.append([alpha, 1.0 - alpha, _seed_mean(aucs),
                           -_seed_mean(lls), len(aucs)])
    write_table(out.path("alpha_tradeoff.csv"),
                ["alpha", "rank_weight", "test_auc_mean", "neg_test_logloss_mean",
                 "n_seeds"], trade_rows)

    if 1.0 in mean_by_alpha:
        # weight 1.0 on the cross-entropy term leaves no ranking contribution,
        # so this endpoint must be bit-identical to a plain BCE run
        same = bool(bce_rows) and (
            [dataclasses.replace(r, loss_kind="combined_pair", alpha=1.0)
             for r in bce_rows] == alpha1_rows)
        out.check("alpha1_matches_bce", same,
                  f"{len(alpha1_rows)} alpha=1 rows vs {len(bce_rows)} bce rows")
        auc1, ll1 = mean_by_alpha[1.0]
        dominating = [a for a, (auc, ll) in mean_by_alpha.items()
                      if a < 1.0 and auc >= auc1 and ll <= ll1]
        out.check("some_alpha_dominates_pure_bce", bool(dominating),
                  f"alpha values weakly dominating 1.0: {sorted(dominating)}")
    return out.finish(enforce=cfg.assert_checks)


COMPARE_REQUIRED = ("bce", "combined_pair", "jrc", "combined_list", "rcr_combined")


def cmd_compare_losses(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "compare-losses")
    grid = cfg.loss_grid or tuple(
        LossSettings(k) if k == "bce" else LossSettings(k, alpha=cfg.loss.alpha)
        for k in COMPARE_REQUIRED)
    kinds = [s.kind for s in grid]
    missing = [k for k in COMPARE_REQUIRED if k not in kinds]
    if missing:
        raise ConfigError(f"compare-losses loss_grid must include {', '.join(missing)}")

    rows: list[ResultRow] = []
    recorders: dict[str, list[tuple[int, diagnostics.GradStatsRecorder]]] = {k: [] for k in kinds}
    final_auc: dict[tuple[str, int], float] = {}
    for seed in cfg.seeds:
        try:
            dataset = cfg.data.build(seed)
        except CtrlabError as exc:
            out.record_error(f"data_seed{seed}", exc)
            continue
        for settings in grid:
            point = f"compare[{settings.kind}]seed{seed}"
            try:
                res = run_training_point(cfg, dataset, settings, seed)
                rows.extend(res.rows)
                recorders[settings.kind].append((seed, res.recorder))
                final_auc[(settings.kind, seed)] = res.final_test_auc
                save_checkpoint(out.path(f"ckpt_{settings.kind}_seed{seed}.bin"),
                                res.model_config, res.params)
            except CtrlabError as exc:
                out.record_error(point, exc)
    write_results_csv(out.path("results.csv"), rows)
    for kind in kinds:
        write_grad_curves(out.path(f"grad_curve_{kind}.csv"), recorders[kind])

    means = {k: epoch1_neg_grad_mean(recorders[k]) for k in kinds}
    for kind in kinds:
        if kind == "bce":
            continue
        out.check(f"epoch1_neg_grad[{kind}]>bce", means[kind] > means["bce"],
                  f"{means[kind]:.3e} vs bce {means['bce']:.3e}")
    auc_bce = _seed_mean([final_auc[k] for k in final_auc if k[0] == "bce"])
    for kind in kinds:
        if kind == "bce":
            continue
        auc_k = _seed_mean([final_auc[k] for k in final_auc if k[0] == kind])
        out.check(f"auc_floor[{kind}]", auc_k >= auc_bce - 0.001,
                  f"{auc_k:.5f} vs bce {auc_bce:.5f} - 0.001")
    return out.finish(enforce=cfg.assert_checks)


def neg_grad_mean(per_seed: Sequence[tuple[int, diagnostics.GradStatsRecorder]],
                  epoch: int | None = None) -> float:
    """Seed-mean of the average per-step negative |grad| mean.

    ``epoch`` restricts the average to one epoch's steps; None uses every
    recorded step.
    """
    per_seed_means = []
    for _, recorder in per_seed:
        if epoch is None:
            stats = recorder.stats
        else:
            stats = recorder.epoch_stats(epoch)
        vals = [s.neg.mean_abs for s in stats if s.neg.count]
        if vals:
            per_seed_means.append(float(np.mean(vals)))
    return _seed_mean(per_seed_means)


def epoch1_neg_grad_mean(per_seed: Sequence[tuple[int, diagnostics.GradStatsRecorder]]) -> float:
    """Seed-mean of the epoch-1 average per-step negative |grad| mean."""
    return neg_grad_mean(per_seed, epoch=1)


def cmd_focal(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "focal")
    rows: list[ResultRow] = []
    recorders: dict[tuple[str, float], list[tuple[int, diagnostics.GradStatsRecorder]]] = {}
    bce_rows: list[ResultRow] = []
    gamma0_rows: dict[str, list[ResultRow]] = {"focal": [], "focal_normalized": []}
    weight_mean_err = 0.0
    for seed in cfg.seeds:
        try:
            dataset = cfg.data.build(seed)
        except CtrlabError as exc:
            out.record_error(f"data_seed{seed}", exc)
            continue
        try:
            bce_res = run_training_point(cfg, dataset, LossSettings("bce"), seed)
            bce_rows.extend(bce_res.rows)
        except CtrlabError as exc:
            out.record_error(f"focal[bce]seed{seed}", exc)
        for kind in ("focal", "focal_normalized"):
            for gamma in cfg.gamma_grid:
                settings = LossSettings(kind, gamma=gamma)
                point = f"focal[{kind}]gamma{slug(gamma)}seed{seed}"
                try:
                    res = run_training_point(cfg, dataset, settings, seed)
                    rows.extend(res.rows)
                    recorders.setdefault((kind, gamma), []).append((seed, res.recorder))
                    if gamma == 0.0:
                        gamma0_rows[kind].extend(res.rows)
                except CtrlabError as exc:
                    out.record_error(point, exc)
        # applied negative weights p^gamma + offset must average exactly 1
        idx = dataset.split_indices(TEST)[:256]
        rng = np.random.default_rng(derive_seed(seed, "focal_weights"))
        batch = LabeledBatch(rng.normal(-1.0, 1.5, idx.size), dataset.labels[idx])
        if (batch.labels == 0).any():
            for gamma in cfg.gamma_grid:
                pgam = np.exp(gamma * log_sigmoid(batch.logits[batch.labels == 0]))
                off = focal_normalized_offset(batch, gamma)
                weight_mean_err = max(weight_mean_err,
                                      abs(float(np.mean(pgam + off)) - 1.0))
    write_results_csv(out.path("results.csv"), rows)
    write_results_csv(out.path("results_bce.csv"), bce_rows)
    for (kind, gamma), recs in sorted(recorders.items()):
        write_grad_curves(out.path(f"grad_curve_{kind}_gamma{slug(gamma)}.csv"), recs)

    # gamma=0 must equal plain BCE step for step, for both focal kinds
    same = bool(bce_rows)
    for kind, kind_rows in gamma0_rows.items():
        same = same and ([dataclasses.replace(r, loss_kind="bce", gamma=0.0)
                          for r in kind_rows] == bce_rows)
    out.check("gamma0_equals_bce", same,
              f"{sum(len(v) for v in gamma0_rows.values())} gamma=0 rows vs "
              f"{len(bce_rows)} bce rows per kind")
    # The plain focal weight p^gamma never exceeds 1, so its negative grads sit
    # below BCE's by construction; the monotone-in-gamma claim is about the
    # normalized variant, whose per-batch negative weights average exactly 1.
    gmeans = [neg_grad_mean(recorders.get(("focal_normalized", g), []))
              for g in cfg.gamma_grid]
    monotone = all(b >= a for a, b in zip(gmeans, gmeans[1:])) and len(gmeans) > 1
    out.check("neg_grad_nondecreasing_in_gamma", monotone,
              " -> ".join(f"{g:.3e}" for g in gmeans))
    out.check("normalized_weights_average_one", weight_mean_err <= 1e-12,
              f"max |mean-1| = {weight_mean_err:.2e}")
    return out.finish(enforce=cfg.assert_checks)


def cmd_negsample(cfg: ExperimentConfig) -> int:
    out = CommandOutput(cfg, "negsample")
    rows: list[ResultRow] = []
    final: dict[tuple[float, int], float] = {}
    for seed in cfg.seeds:
        try:
            dataset = cfg.data.build(seed)
        except CtrlabError as exc:
            out.record_error(f"data_seed{seed}", exc)
            continue
        train_part = dataset.take(dataset.split_mask("train"))
        eval_part = dataset.take(~dataset.split_mask("train"))
        for rate in cfg.keep_rate_grid:
            point = f"keep{slug(rate)}seed{seed}"
            try:
                sampled = negative_sample(train_part, rate,
                                          seed=derive_seed(seed, f"negsample{slug(rate)}"))
                ds_rate = concat([sampled, eval_part])
                res = run_training_point(cfg, ds_rate, cfg.loss, seed, keep_rate=rate)
                rows.extend(res.rows)
                final[(rate, seed)] = res.final_test_auc
            except CtrlabError as exc:
                out.record_error(point, exc)
    write_results_csv(out.path("results.csv"), rows)

    summary = []
    mean_auc: dict[float, float] = {}
    for rate in cfg.keep_rate_grid:
        aucs = [final[(rate, s)] for s in cfg.seeds if (rate, s) in final]
        mean_auc[rate] = _seed_mean(aucs)
        summary.append([rate, mean_auc[rate], len(aucs)])
    write_table(out.path("keep_rate_summary.csv"),
                ["keep_rate", "test_auc_mean", "n_seeds"], summary)
    lo, hi = min(cfg.keep_rate_grid), max(cfg.keep_rate_grid)
    out.check("subsampling_does_not_help", mean_auc[lo] <= mean_auc[hi],
              f"auc at keep={lo:g} is {mean_auc[lo]:.5f}, at keep={hi:g} is {mean_auc[hi]:.5f}")
    return out.finish(enforce=cfg.assert_checks)


BIAS_KINDS = ("bce", "combined_pair")


def cmd_bias_report(cfg: ExperimentConfig) -> int:
    """Bucketized calibration bias of trained checkpoints on held-out data."""
    out = CommandOutput(cfg, "bias-report")
    ckpt_dir = cfg.bias.get("checkpoints", cfg.out)
    n_buckets = int(cfg.bias.get("n_buckets", 10))
    bucket_rows = []
    errs: dict[str, list[float]] = {k: [] for k in BIAS_KINDS}
    for seed in cfg.seeds:
        dataset = cfg.data.build(seed)
        test = dataset.take(dataset.split_mask("test"))
        for kind in BIAS_KINDS:
            path = os.path.join(ckpt_dir, f"ckpt_{kind}_seed{seed}.bin")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing checkpoint {path}; train it first")
            model_config, params = load_checkpoint(path)
            enc = encode_dataset(model_config, test, None)
            pred = predict_pctr(model_config, params, enc)
            report = metrics.bias_buckets(pred, test.labels, n_buckets=n_buckets)
            errs[kind].append(report.mean_abs_bias_error)
            for b in report.buckets:
                bucket_rows.append([kind, seed, b.index, b.n, b.n_pos, b.score_lo,
                                    b.score_hi, b.mean_pred, b.empirical_ctr, b.bias])
    write_table(out.path("bias_report.csv"),
                ["loss_kind", "seed", "bucket", "n", "n_pos", "score_lo", "score_hi",
                 "mean_pred", "empirical_ctr", "bias"], bucket_rows)
    summary = [[k, _seed_mean(errs[k]), len(errs[k])] for k in BIAS_KINDS]
    write_table(out.path("bias_summary.csv"),
                ["loss_kind", "mean_abs_bias_error", "n_seeds"], summary)
    mean_bce = _seed_mean(errs["bce"])
    mean_cp = _seed_mean(errs["combined_pair"])
    out.check("combined_bias_not_worse", mean_cp <= mean_bce,
              f"combined_pair {mean_cp:.4f} vs bce {mean_bce:.4f}")
    return out.finish(enforce=cfg.assert_checks)


def cmd_landscape(cfg: ExperimentConfig) -> int:
    """Loss-surface slices around trained checkpoints."""
    out = CommandOutput(cfg, "landscape")
    ckpt_dir = cfg.landscape.get("checkpoints", cfg.out)
    radius = float(cfg.landscape.get("radius", 0.5))
    k = int(cfg.landscape.get("k", 10))
    sample_size = int(cfg.landscape.get("sample_size", 2048))
    kinds = tuple(cfg.landscape.get("kinds", ("bce", "combined_pair")))
    flat_rows = []
    for seed in cfg.seeds:
        dataset = cfg.data.build(seed)
        test = dataset.take(dataset.split_mask("test"))
        rng = np.random.default_rng(derive_seed(seed, "landscape_sample"))
        for kind in kinds:
            path = os.path.join(ckpt_dir, f"ckpt_{kind}_seed{seed}.bin")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing checkpoint {path}; train it first")
            model_config, params = load_checkpoint(path)
            sample = test
            if test.n > sample_size:
                for _ in range(50):
                    idx = rng.choice(test.n, size=sample_size, replace=False)
                    sample = test.take(idx)
                    if 0 < sample.labels.sum() < sample.n:
                        break
            spec = cfg.loss.replace(kind=kind).spec()
            point = f"landscape[{kind}]seed{seed}"
            try:
                sl = diagnostics.landscape_slice(
                    model_config, params, sample, spec, radius=radius, k=k,
                    seed=derive_seed(seed, "landscape"))
                sl.to_csv(out.path(f"landscape_{kind}_seed{seed}.csv"))
                mean_rise = float(np.mean(np.abs(sl.grid - sl.center_loss)))
                flat_rows.append([kind, seed, sl.center_loss, mean_rise])
            except CtrlabError as exc:
                out.record_error(point, exc)
    write_table(out.path("flatness_summary.csv"),
                ["loss_kind", "seed", "center_loss", "mean_abs_rise"], flat_rows)
    return out.finish(enforce=cfg.assert_checks)


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "sweep-beta": cmd_sweep_beta,
    "sweep-alpha": cmd_sweep_alpha,
    "compare-losses": cmd_compare_losses,
    "focal": cmd_focal,
    "negsample": cmd_negsample,
    "bias-report": cmd_bias_report,
    "landscape": cmd_landscape,
}
