"""Hashed-embedding MLP with hand-written forward/backward and a training loop.

The model is deliberately small: one embedding table per categorical field
(tokens hashed into a fixed number of buckets), standardised numeric
features appended, a stack of dense layers, and a linear output head with
one logit per sample (two for the dual-logit loss). Gradients are exact and
computed by hand so per-step logit gradients can be handed to diagnostics
untouched.

Feature rows are encoded once (hashing plus column layout checks) via
``encode_rows`` and the encoded form is what ``forward``/``backward``
consume; this keeps repeated evaluation (training epochs, loss landscapes)
cheap.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import metrics
from .data import TRAIN, VAL, Dataset
from .errors import InvalidInputError, UndefinedMetricError
from .losses import DUAL_LOGIT_KINDS, BETA_KINDS, LabeledBatch, LossSpec, evaluate_with_rank_fallback

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """64-bit multiplicative mixer (splitmix64 finaliser), vectorised on uint64.

    Relies on modular uint64 wrap-around, so the overflow warning is noise.
    """
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _U64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _U64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _U64
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed for a (run seed, purpose) pair."""
    h = np.uint64(seed & 0x7FFFFFFFFFFFFFFF)
    for b in tag.encode():
        h = _splitmix64(h ^ np.uint64(b))
    return int(h & np.uint64(0x7FFFFFFFFFFFFFFF))


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture and init settings; fully determines parameter shapes."""

    hash_buckets: tuple[int, ...]       # one bucket count per categorical field
    n_numeric: int
    embed_dim: int = 8
    hidden_sizes: tuple[int, ...] = (32,)
    activation: str = "relu"
    n_outputs: int = 1                  # 2 for the dual-logit loss
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        buckets = tuple(int(b) for b in self.hash_buckets)
        if any(b < 1 for b in buckets):
            raise InvalidInputError("hash bucket counts must be positive")
        object.__setattr__(self, "hash_buckets", buckets)
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.n_numeric < 0:
            raise InvalidInputError("n_numeric must be >= 0")
        if self.embed_dim < 1:
            raise InvalidInputError("embed_dim must be >= 1")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise InvalidInputError("hidden_sizes must be non-empty and positive")
        if self.activation not in ("relu", "tanh"):
            raise InvalidInputError("activation must be 'relu' or 'tanh'")
        if self.n_outputs not in (1, 2):
            raise InvalidInputError("n_outputs must be 1 or 2")
        if self.init_scale < 0:
            raise InvalidInputError("init_scale must be >= 0")
        if len(buckets) + self.n_numeric == 0:
            raise InvalidInputError("model needs at least one input field")

    @property
    def input_dim(self) -> int:
        return len(self.hash_buckets) * self.embed_dim + self.n_numeric


def config_for_dataset(dataset: Dataset, hash_buckets: int | Sequence[int],
                       **kwargs) -> ModelConfig:
    """Build a ModelConfig whose field layout matches a dataset."""
    if isinstance(hash_buckets, int):
        buckets = (hash_buckets,) * dataset.n_cat_fields
    else:
        buckets = tuple(hash_buckets)
    return ModelConfig(hash_buckets=buckets, n_numeric=dataset.n_num_fields, **kwargs)


@dataclasses.dataclass
class ModelParams:
    """All trainable arrays; also reused as the container for their gradients."""

    embeddings: list[np.ndarray]
    hidden_w: list[np.ndarray]
    hidden_b: list[np.ndarray]
    out_w: np.ndarray
    out_b: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        named = [(f"emb{f}", e) for f, e in enumerate(self.embeddings)]
        for i, (w, b) in enumerate(zip(self.hidden_w, self.hidden_b)):
            named += [(f"w{i}", w), (f"b{i}", b)]
        named += [("out_w", self.out_w), ("out_b", self.out_b)]
        return named

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "ModelParams":
        return ModelParams(
            embeddings=[e.copy() for e in self.embeddings],
            hidden_w=[w.copy() for w in self.hidden_w],
            hidden_b=[b.copy() for b in self.hidden_b],
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
        )


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        embeddings=[np.zeros_like(e) for e in params.embeddings],
        hidden_w=[np.zeros_like(w) for w in params.hidden_w],
        hidden_b=[np.zeros_like(b) for b in params.hidden_b],
        out_w=np.zeros_like(params.out_w),
        out_b=np.zeros_like(params.out_b),
    )


def init_model(config: ModelConfig) -> ModelParams:
    """Draw every parameter from Uniform(-init_scale, init_scale); bit-reproducible per seed."""
    rng = np.random.default_rng(config.seed)
    s = config.init_scale

    def draw(*shape):
        return rng.uniform(-s, s, size=shape)

    embeddings = [draw(b, config.embed_dim) for b in config.hash_buckets]
    sizes = [config.input_dim, *config.hidden_sizes]
    hidden_w = [draw(sizes[i], sizes[i + 1]) for i in range(len(config.hidden_sizes))]
    hidden_b = [draw(sizes[i + 1]) for i in range(len(config.hidden_sizes))]
    out_w = draw(sizes[-1], config.n_outputs)
    out_b = draw(config.n_outputs)
    return ModelParams(embeddings, hidden_w, hidden_b, out_w, out_b)


@dataclasses.dataclass(frozen=True)
class EncodedRows:
    """Hashed bucket indices and numeric features, ready for forward()."""

    cat_idx: np.ndarray   # (n, n_cat) int64
    num: np.ndarray       # (n, n_num) float64

    @property
    def n(self) -> int:
        return self.cat_idx.shape[0] if self.cat_idx.size else self.num.shape[0]

    def take(self, index) -> "EncodedRows":
        return EncodedRows(self.cat_idx[index], self.num[index])


_FIELD_SALTS_CACHE: dict[int, np.uint64] = {}


def _field_salt(field: int) -> np.uint64:
    salt = _FIELD_SALTS_CACHE.get(field)
    if salt is None:
        salt = np.uint64(_splitmix64(np.uint64(field + 1)))
        _FIELD_SALTS_CACHE[field] = salt
    return salt


def encode_rows(config: ModelConfig, cat_tokens: np.ndarray,
                num_values: np.ndarray) -> EncodedRows:
    """Hash (field, token) pairs into per-field buckets; collisions are accepted."""
    cat_tokens = np.asarray(cat_tokens, dtype=np.uint64)
    num_values = np.asarray(num_values, dtype=np.float64)
    if cat_tokens.ndim != 2 or cat_tokens.shape[1] != len(config.hash_buckets):
        raise InvalidInputError(
            f"got {cat_tokens.shape[1] if cat_tokens.ndim == 2 else '?'} categorical "
            f"fields, model expects {len(config.hash_buckets)}")
    if num_values.ndim != 2 or num_values.shape[1] != config.n_numeric:
        raise InvalidInputError(
            f"got {num_values.shape[1] if num_values.ndim == 2 else '?'} numeric "
            f"fields, model expects {config.n_numeric}")
    n = cat_tokens.shape[0]
    idx = np.empty((n, len(config.hash_buckets)), dtype=np.int64)
    for f, buckets in enumerate(config.hash_buckets):
        hashed = _splitmix64(cat_tokens[:, f] ^ _field_salt(f))
        idx[:, f] = (hashed % np.uint64(buckets)).astype(np.int64)
    return EncodedRows(idx, num_values)


def encode_dataset(config: ModelConfig, dataset: Dataset, index=None) -> EncodedRows:
    if index is None:
        return encode_rows(config, dataset.cat_tokens, dataset.num_values)
    return encode_rows(config, dataset.cat_tokens[index], dataset.num_values[index])


def _assemble_input(config: ModelConfig, params: ModelParams, rows: EncodedRows) -> np.ndarray:
    n = rows.n
    x = np.empty((n, config.input_dim))
    d = config.embed_dim
    for f, table in enumerate(params.embeddings):
        x[:, f * d:(f + 1) * d] = table[rows.cat_idx[:, f]]
    if config.n_numeric:
        x[:, len(params.embeddings) * d:] = rows.num
    return x


def _forward_cached(config, params, rows):
    x = _assemble_input(config, params, rows)
    acts = [x]
    pres = []
    h = x
    for w, b in zip(params.hidden_w, params.hidden_b):
        pre = h @ w + b
        pres.append(pre)
        h = np.maximum(pre, 0.0) if config.activation == "relu" else np.tanh(pre)
        acts.append(h)
    out = h @ params.out_w + params.out_b
    return out, acts, pres


def forward(config: ModelConfig, params: ModelParams, rows: EncodedRows) -> np.ndarray:
    """Logits for each row: shape (n,) for scalar output, (n, 2) for dual."""
    out, _, _ = _forward_cached(config, params, rows)
    return out[:, 0] if config.n_outputs == 1 else out


def backward(config: ModelConfig, params: ModelParams, rows: EncodedRows,
             grad_logits: np.ndarray) -> ModelParams:
    """Gradient of sum_i grad_logits[i] . logits[i] with respect to every parameter."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if config.n_outputs == 1:
        g_out = grad_logits.reshape(-1, 1)
    else:
        g_out = grad_logits
    if g_out.shape != (rows.n, config.n_outputs):
        raise InvalidInputError("grad_logits shape does not match rows and n_outputs")

    _, acts, pres = _forward_cached(config, params, rows)
    grads = zeros_like_params(params)
    grads.out_w[:] = acts[-1].T @ g_out
    grads.out_b[:] = g_out.sum(axis=0)
    gh = g_out @ params.out_w.T
    for i in range(len(params.hidden_w) - 1, -1, -1):
        if config.activation == "relu":
            gpre = gh * (pres[i] > 0.0)
        else:
            gpre = gh * (1.0 - np.tanh(pres[i]) ** 2)
        grads.hidden_w[i][:] = acts[i].T @ gpre
        grads.hidden_b[i][:] = gpre.sum(axis=0)
        gh = gpre @ params.hidden_w[i].T
    # gh now holds the input-layer gradient; scatter the embedding slices.
    d = config.embed_dim
    for f in range(len(params.embeddings)):
        np.add.at(grads.embeddings[f], rows.cat_idx[:, f], gh[:, f * d:(f + 1) * d])
    return grads


def predict_pctr(config: ModelConfig, params: ModelParams, rows: EncodedRows) -> np.ndarray:
    """Click probability per row: sigmoid of the logit, or the dual-logit softmax."""
    z = forward(config, params, rows)
    if config.n_outputs == 1:
        return expit(z)
    return expit(z[:, 1] - z[:, 0])


class SgdOptimizer:
    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        for p, g in zip(params.arrays(), grads.arrays()):
            p -= self.lr * g


class AdamOptimizer:
    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        arrays = params.arrays()
        garrays = grads.arrays()
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(arrays, garrays, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for train()."""

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 512
    epochs: int = 1
    shuffle_seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidInputError("optimizer must be 'sgd' or 'adam'")
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SgdOptimizer(config.learning_rate)
    return AdamOptimizer(config.learning_rate, config.adam_beta1,
                         config.adam_beta2, config.adam_eps)


@dataclasses.dataclass(frozen=True)
class StepInfo:
    """Everything a per-step hook sees for one optimiser step."""

    step: int
    epoch: int
    loss: float
    logits: np.ndarray
    labels: np.ndarray
    grad_logits: np.ndarray
    bottom_weight_grad: np.ndarray   # gradient of the first dense layer's weights
    degenerate: bool


@dataclasses.dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    train_loss: float
    degenerate: bool


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_logloss: float
    val_logloss: float
    val_auc: float


@dataclasses.dataclass
class TrainLog:
    step_records: list[StepRecord]
    epoch_records: list[EpochRecord]
    degenerate_steps: int


def eval_beta(spec: LossSpec) -> float:
    """beta_pos as it applies to evaluation weighting (1 for kinds that ignore it)."""
    return spec.beta_pos if spec.kind in BETA_KINDS else 1.0


def _split_eval(config, params, enc, labels, base_weight, spec):
    p = predict_pctr(config, params, enc)
    w = base_weight * np.where(labels == 1, eval_beta(spec), 1.0)
    ll = metrics.logloss(p, labels, w)
    try:
        a = metrics.auc(p, labels)
    except UndefinedMetricError:
        a = float("nan")
    return ll, a


def train(config: ModelConfig, params: ModelParams, dataset: Dataset,
          loss_spec: LossSpec, train_config: TrainConfig,
          hooks: Sequence[Callable[[StepInfo], None]] = (),
          epoch_hooks: Sequence[Callable[[int, ModelParams], None]] = ()) -> TrainLog:
    """Mini-batch training over the dataset's train split; params update in place.

    Every optimiser step invokes each hook exactly once with the step's
    logits, labels, per-logit loss gradients, and the bottom dense layer's
    weight gradient. Single-class batches fall back to a zero ranking term
    and are counted in ``degenerate_steps``. Epoch records hold weighted
    logloss (loss_spec's beta_pos applied to positives) on the full train
    and validation splits; epoch 0 is the pre-training state. Identical
    seeds and data give bit-identical logs and final parameters.
    """
    if (config.n_outputs == 2) != (loss_spec.kind in DUAL_LOGIT_KINDS):
        raise InvalidInputError(
            f"loss {loss_spec.kind!r} needs n_outputs="
            f"{2 if loss_spec.kind in DUAL_LOGIT_KINDS else 1}")
    train_idx = dataset.split_indices(TRAIN)
    val_idx = dataset.split_indices(VAL)
    if train_idx.size < train_config.batch_size and train_idx.size < 2:
        raise InvalidInputError("train split too small")
    enc_train = encode_dataset(config, dataset, train_idx)
    enc_val = encode_dataset(config, dataset, val_idx)
    y_train = dataset.labels[train_idx]
    y_val = dataset.labels[val_idx]
    w_train = dataset.base_weight[train_idx]
    w_val = dataset.base_weight[val_idx]

    optimizer = make_optimizer(train_config)
    rng = np.random.default_rng(train_config.shuffle_seed)
    step_records: list[StepRecord] = []
    epoch_records: list[EpochRecord] = []
    degenerate_steps = 0

    def record_epoch(epoch):
        tr_ll, _ = _split_eval(config, params, enc_train, y_train, w_train, loss_spec)
        if val_idx.size:
            va_ll, va_auc = _split_eval(config, params, enc_val, y_val, w_val, loss_spec)
        else:
            va_ll, va_auc = float("nan"), float("nan")
        epoch_records.append(EpochRecord(epoch, tr_ll, va_ll, va_auc))

    record_epoch(0)
    for eh in epoch_hooks:
        eh(0, params)

    step = 0
    n_train = train_idx.size
    for epoch in range(1, train_config.epochs + 1):
        perm = rng.permutation(n_train)
        for lo in range(0, n_train, train_config.batch_size):
            # partial tail batches are kept; single-class cases (including a
            # 1-row tail) go through the degenerate-batch fallback
            sel = perm[lo:lo + train_config.batch_size]
            rows = enc_train.take(sel)
            logits = forward(config, params, rows)
            if config.n_outputs == 1:
                batch = LabeledBatch(logits, y_train[sel], weights=w_train[sel])
            else:
                batch = LabeledBatch(None, y_train[sel], weights=w_train[sel],
                                     dual_logits=logits)
            out, degenerate = evaluate_with_rank_fallback(loss_spec, batch)
            grads = backward(config, params, rows, out.grad_logits)
            optimizer.step(params, grads)
            step += 1
            degenerate_steps += int(degenerate)
            info = StepInfo(step=step, epoch=epoch, loss=out.loss, logits=logits,
                            labels=batch.labels, grad_logits=out.grad_logits,
                            bottom_weight_grad=grads.hidden_w[0], degenerate=degenerate)
            for hook in hooks:
                hook(info)
            step_records.append(StepRecord(step, epoch, out.loss, degenerate))
        record_epoch(epoch)
        for eh in epoch_hooks:
            eh(epoch, params)
    return TrainLog(step_records, epoch_records, degenerate_steps)
