"""Dataset synthesis and ingestion for desk-scale CTR experiments.

A Dataset is a flat table of categorical token codes, standardised numeric
values, binary labels, per-row base weights, and a train/val/test split tag.
Synthetic data comes from a hidden linear teacher whose intercept is solved
so the positive rate hits a target; the teacher's per-row click probability
is stored alongside the labels for calibration experiments.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InvalidInputError, ParseError

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

# Reserved token code for empty categorical cells in CSV input.
OOV_TOKEN = np.uint64(0)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def token_code(token: str) -> np.uint64:
    """Stable 64-bit code for a raw categorical token.

    The empty token is the reserved out-of-vocabulary code 0; every real token
    hashes to an odd value, so the two ranges cannot collide.
    """
    if token == "":
        return OOV_TOKEN
    return np.uint64(_fnv1a64(token.encode("utf-8")) | 1)


@dataclasses.dataclass
class Dataset:
    """Rows of categorical token codes and standardised numeric features."""

    cat_tokens: np.ndarray          # (n, n_cat) uint64
    num_values: np.ndarray          # (n, n_num) float64, standardised
    labels: np.ndarray              # (n,) int8
    base_weight: np.ndarray         # (n,) float64
    split: np.ndarray               # (n,) uint8 in {TRAIN, VAL, TEST}
    true_pctr: np.ndarray | None = None
    num_mean: np.ndarray | None = None
    num_std: np.ndarray | None = None
    cat_fields: tuple[str, ...] = ()
    num_fields: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_cat_fields(self) -> int:
        return self.cat_tokens.shape[1]

    @property
    def n_num_fields(self) -> int:
        return self.num_values.shape[1]

    def split_mask(self, split) -> np.ndarray:
        code = SPLIT_NAMES[split] if isinstance(split, str) else split
        return self.split == code

    def split_indices(self, split) -> np.ndarray:
        return np.flatnonzero(self.split_mask(split))

    @property
    def positive_rate(self) -> float:
        return float(self.labels.mean())

    def take(self, index) -> "Dataset":
        """Row subset (boolean mask or index array); split tags are kept."""
        return Dataset(
            cat_tokens=self.cat_tokens[index],
            num_values=self.num_values[index],
            labels=self.labels[index],
            base_weight=self.base_weight[index],
            split=self.split[index],
            true_pctr=None if self.true_pctr is None else self.true_pctr[index],
            num_mean=self.num_mean,
            num_std=self.num_std,
            cat_fields=self.cat_fields,
            num_fields=self.num_fields,
        )


def concat(datasets: list[Dataset]) -> Dataset:
    """Stack datasets with identical field layouts."""
    first = datasets[0]
    for d in datasets[1:]:
        if d.n_cat_fields != first.n_cat_fields or d.n_num_fields != first.n_num_fields:
            raise InvalidInputError("datasets have different field layouts")
    has_pctr = all(d.true_pctr is not None for d in datasets)
    return Dataset(
        cat_tokens=np.concatenate([d.cat_tokens for d in datasets]),
        num_values=np.concatenate([d.num_values for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        base_weight=np.concatenate([d.base_weight for d in datasets]),
        split=np.concatenate([d.split for d in datasets]),
        true_pctr=np.concatenate([d.true_pctr for d in datasets]) if has_pctr else None,
        num_mean=first.num_mean,
        num_std=first.num_std,
        cat_fields=first.cat_fields,
        num_fields=first.num_fields,
    )


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the linear-teacher generator."""

    n_samples: int
    target_base_ctr: float
    n_categorical_fields: int = 5
    n_numeric_fields: int = 3
    vocab_size: int | tuple[int, ...] = 50
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 10:
            raise ConfigError("n_samples must be >= 10")
        if not 0.0 < self.target_base_ctr < 1.0:
            raise ConfigError("target_base_ctr must lie strictly inside (0, 1)")
        if self.n_categorical_fields < 0 or self.n_numeric_fields < 0:
            raise ConfigError("field counts must be non-negative")
        if self.n_categorical_fields + self.n_numeric_fields == 0:
            raise ConfigError("need at least one feature field")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        vocab = self.vocab_size
        if isinstance(vocab, int):
            vocab = (vocab,) * self.n_categorical_fields
        else:
            vocab = tuple(int(v) for v in vocab)
        if len(vocab) != self.n_categorical_fields or any(v < 2 for v in vocab):
            raise ConfigError("vocab_size needs one entry >= 2 per categorical field")
        object.__setattr__(self, "vocab_size", vocab)


def _assign_splits(n: int, rng: np.random.Generator) -> np.ndarray:
    n_train = round(0.7 * n)
    n_val = round(0.2 * n)
    split = np.full(n, TEST, dtype=np.uint8)
    perm = rng.permutation(n)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_val]] = VAL
    return split


def _standardize(num_values: np.ndarray, split: np.ndarray):
    """Shift/scale numeric columns by train-split statistics; zero-variance columns pass through."""
    train_rows = num_values[split == TRAIN]
    if train_rows.shape[0] == 0 or num_values.shape[1] == 0:
        mean = np.zeros(num_values.shape[1])
        std = np.ones(num_values.shape[1])
        return num_values, mean, std
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return (num_values - mean) / std, mean, std


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw rows from a hidden linear teacher calibrated to the target CTR.

    The teacher score is a sum of per-token weights and numeric
    contributions, scaled to unit variance, plus optional Gaussian noise.
    The intercept is found by bisection so the mean click probability equals
    ``target_base_ctr``; labels are then Bernoulli draws from the per-row
    probability. The realised positive rate must land within 5% relative of
    the target or a ConfigError is raised. Identical configs (seed included)
    reproduce the dataset bit for bit.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    n_cat = config.n_categorical_fields
    n_num = config.n_numeric_fields
    vocab = config.vocab_size

    cat = np.zeros((n, n_cat), dtype=np.uint64)
    score = np.zeros(n)
    for f in range(n_cat):
        tokens = rng.integers(0, vocab[f], size=n)
        weights = rng.standard_normal(vocab[f])
        cat[:, f] = tokens.astype(np.uint64)
        score += weights[tokens]
    num = rng.standard_normal((n, n_num))
    if n_num:
        num_w = rng.standard_normal(n_num)
        score += num @ num_w
    score /= np.sqrt(n_cat + n_num)
    if config.noise_sigma > 0:
        score += config.noise_sigma * rng.standard_normal(n)

    target = config.target_base_ctr
    lo, hi = -40.0, 40.0
    intercept = 0.0
    for _ in range(64):
        intercept = 0.5 * (lo + hi)
        rate = float(expit(score + intercept).mean())
        if abs(rate - target) <= 0.001 * target:
            break
        if rate < target:
            lo = intercept
        else:
            hi = intercept
    else:
        rate = float(expit(score + intercept).mean())
        if abs(rate - target) > 0.05 * target:
            raise ConfigError(
                f"intercept bisection failed: mean pCTR {rate:.5f} vs target {target:.5f}")

    pctr = expit(score + intercept)
    labels = (rng.random(n) < pctr).astype(np.int8)
    realized = float(labels.mean())
    if abs(realized - target) > 0.05 * target:
        raise ConfigError(
            f"realised positive rate {realized:.5f} outside 5% of target {target:.5f}; "
            "increase n_samples or adjust the target")

    split = _assign_splits(n, rng)
    num_std, mean, std = _standardize(num, split)
    return Dataset(
        cat_tokens=cat,
        num_values=num_std,
        labels=labels,
        base_weight=np.ones(n),
        split=split,
        true_pctr=pctr,
        num_mean=mean,
        num_std=std,
        cat_fields=tuple(f"cat{f}" for f in range(n_cat)),
        num_fields=tuple(f"num{j}" for j in range(n_num)),
    )


@dataclasses.dataclass(frozen=True)
class CsvSchema:
    """Column roles for CSV ingestion."""

    label: str
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(self.numeric))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        names = [self.label, *self.numeric, *self.categorical]
        if len(set(names)) != len(names):
            raise ConfigError("schema columns must be distinct")
        if not self.numeric and not self.categorical:
            raise ConfigError("schema needs at least one feature column")


def load_csv(path, schema: CsvSchema, split_seed: int = 0) -> Dataset:
    """Load a labelled CSV into a Dataset.

    Labels must be literal 0/1. Empty numeric cells are imputed as 0 before
    standardisation; empty categorical cells map to a reserved OOV token.
    Any malformed cell or row raises ParseError naming the 1-based line.
    Rows are split 70/20/10 by a seeded shuffle, then numeric columns are
    standardised by train-split statistics.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        col_index = {name: i for i, name in enumerate(header)}
        for name in (schema.label, *schema.numeric, *schema.categorical):
            if name not in col_index:
                raise ParseError(f"{path}: missing column {name!r} in header")
        label_i = col_index[schema.label]
        num_i = [col_index[c] for c in schema.numeric]
        cat_i = [col_index[c] for c in schema.categorical]

        labels = []
        nums = []
        cats = []
        code_memo: dict[str, np.uint64] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}")
            raw_label = row[label_i].strip()
            if raw_label not in ("0", "1"):
                raise ParseError(
                    f"{path}: line {line_no}: label must be 0 or 1, got {raw_label!r}")
            labels.append(int(raw_label))
            num_row = []
            for ci, name in zip(num_i, schema.numeric):
                cell = row[ci].strip()
                if cell == "":
                    num_row.append(0.0)
                else:
                    try:
                        num_row.append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"{path}: line {line_no}: column {name!r} is not numeric: "
                            f"{cell!r}") from None
            nums.append(num_row)
            cat_row = []
            for ci in cat_i:
                cell = row[ci].strip()
                if cell == "":
                    cat_row.append(OOV_TOKEN)
                else:
                    code = code_memo.get(cell)
                    if code is None:
                        code = token_code(cell)
                        code_memo[cell] = code
                    cat_row.append(code)
            cats.append(cat_row)

    if not labels:
        raise ParseError(f"{path}: no data rows")
    n = len(labels)
    rng = np.random.default_rng(split_seed)
    split = _assign_splits(n, rng)
    num_arr = np.asarray(nums, dtype=np.float64).reshape(n, len(schema.numeric))
    num_arr, mean, std = _standardize(num_arr, split)
    return Dataset(
        cat_tokens=np.asarray(cats, dtype=np.uint64).reshape(n, len(schema.categorical)),
        num_values=num_arr,
        labels=np.asarray(labels, dtype=np.int8),
        base_weight=np.ones(n),
        split=split,
        true_pctr=None,
        num_mean=mean,
        num_std=std,
        cat_fields=schema.categorical,
        num_fields=schema.numeric,
    )


def effective_ctr(base_ctr: float, beta_pos: float) -> float:
    """Positive rate after down-weighting positives by beta_pos.

    effective = base * beta / (base * beta + (1 - base)); e.g. a 25.6% base
    rate at beta 0.1 lands near 3.3%.
    """
    if not 0.0 < base_ctr < 1.0:
        raise InvalidInputError("base_ctr must lie strictly inside (0, 1)")
    if not 0.0 < beta_pos <= 1.0:
        raise InvalidInputError("beta_pos must lie in (0, 1]")
    return base_ctr * beta_pos / (base_ctr * beta_pos + (1.0 - base_ctr))


def negative_sample(dataset: Dataset, keep_rate: float, seed: int) -> Dataset:
    """Keep every positive; keep each negative independently with ``keep_rate``.

    No weight correction is applied, so the surviving rows are genuinely
    denser in positives. keep_rate = 1 returns the dataset unchanged.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise InvalidInputError("keep_rate must lie in (0, 1]")
    if keep_rate == 1.0:
        return dataset
    rng = np.random.default_rng(seed)
    keep = (dataset.labels == 1) | (rng.random(dataset.n) < keep_rate)
    return dataset.take(keep)
