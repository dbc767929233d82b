"""Losses for click-through-rate models, each with its exact per-logit gradient.

Every loss is a pure function of a LabeledBatch and returns a LossOutput
holding the scalar loss and d(loss)/d(logit) for every logit in the batch.
Gradients are closed-form, not autodiff, so they can be audited against
finite differences and logged cheaply during training.

Conventions shared by all kinds:

* ``sigma`` denotes the logistic sigmoid; ``log sigma(x)`` is always computed
  as ``-softplus(-x)`` so raw logits are never exponentiated.
* Per-sample ``weights`` and the positive down-weight ``beta_pos`` apply to
  plain cross-entropy terms only. Ranking terms are functions of raw logits
  alone and ignore both, and the focal kinds carry their own modulating
  weights instead of the batch's.
* Batches with a single label class raise DegenerateBatchError from any
  ranking term; ``evaluate_with_rank_fallback`` implements the training-loop
  policy of letting the ranking term contribute zero for that step.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatchError, InvalidInputError

LOSS_KINDS = (
    "bce",
    "ranknet",
    "combined_pair",
    "listnet",
    "combined_list",
    "rcr_rank",
    "rcr_combined",
    "jrc",
    "focal",
    "focal_normalized",
)

# Kinds that read LossSpec.beta_pos; all others ignore it.
BETA_KINDS = ("bce", "combined_pair", "combined_list", "rcr_combined")

# Kinds that consume two logits (non-click, click) per sample.
DUAL_LOGIT_KINDS = ("jrc",)


def log_sigmoid(x):
    """log sigma(x) = -softplus(-x), stable for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class LabeledBatch:
    """One batch of logits with binary labels.

    Exactly one of ``logits`` (shape (n,)) and ``dual_logits`` (shape (n, 2),
    columns ordered non-click then click) must be given; dual logits are
    consumed only by the two-logit loss. ``weights`` defaults to ones and
    must be strictly positive. Arrays are normalised to float64 once here so
    the loss kernels can stay allocation-light.
    """

    logits: np.ndarray | None
    labels: np.ndarray
    weights: np.ndarray | None = None
    dual_logits: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise InvalidInputError("batch needs a 1-d, non-empty label array")
        if not np.isin(labels, (0, 1)).all():
            raise InvalidInputError("labels must be 0 or 1")
        labels = labels.astype(np.int8)
        n = labels.size

        if (self.logits is None) == (self.dual_logits is None):
            raise InvalidInputError("provide exactly one of logits and dual_logits")
        if self.logits is not None:
            z = np.asarray(self.logits, dtype=np.float64)
            if z.shape != (n,):
                raise InvalidInputError(f"logits shape {z.shape} != ({n},)")
            if not np.isfinite(z).all():
                raise InvalidInputError("logits must be finite")
            object.__setattr__(self, "logits", z)
        else:
            zz = np.asarray(self.dual_logits, dtype=np.float64)
            if zz.shape != (n, 2):
                raise InvalidInputError(f"dual_logits shape {zz.shape} != ({n}, 2)")
            if not np.isfinite(zz).all():
                raise InvalidInputError("dual_logits must be finite")
            object.__setattr__(self, "dual_logits", zz)

        if self.weights is None:
            w = np.ones(n, dtype=np.float64)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise InvalidInputError(f"weights shape {w.shape} != ({n},)")
            if not (np.isfinite(w).all() and (w > 0).all()):
                raise InvalidInputError("weights must be finite and strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def n_neg(self) -> int:
        return self.n - self.n_pos


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """Fully determines a loss: kind plus its scalar knobs.

    ``alpha`` weights the classification term of combined kinds (the ranking
    term gets 1 - alpha); ``gamma`` is the focusing exponent of the focal
    kinds; ``beta_pos`` down-weights positive samples in BCE-containing kinds
    and is ignored everywhere else.
    """

    kind: str
    alpha: float = 1.0
    gamma: float = 0.0
    beta_pos: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in [0, 1]")
        if self.gamma < 0.0:
            raise InvalidInputError("gamma must be >= 0")
        if not 0.0 < self.beta_pos <= 1.0:
            raise InvalidInputError("beta_pos must lie in (0, 1]")


@dataclasses.dataclass(frozen=True)
class LossOutput:
    """Scalar loss and its gradient with respect to every batch logit."""

    loss: float
    grad_logits: np.ndarray


def _single(batch: LabeledBatch) -> np.ndarray:
    if batch.logits is None:
        raise InvalidInputError("this loss consumes single logits, not dual_logits")
    return batch.logits


def _dual(batch: LabeledBatch) -> np.ndarray:
    if batch.dual_logits is None:
        raise InvalidInputError("this loss consumes dual_logits")
    return batch.dual_logits


def _check_beta(beta_pos: float):
    if not 0.0 < beta_pos <= 1.0:
        raise InvalidInputError("beta_pos must lie in (0, 1]")


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")


def bce(batch: LabeledBatch, beta_pos: float = 1.0) -> LossOutput:
    """Weighted binary cross-entropy over sigmoid(logit).

    loss = -(1/n) * sum_i w_i * [beta_pos^{y_i}] * (y_i log p_i + (1-y_i) log(1-p_i))

    Per-logit gradient: w_i * beta_pos * (p_i - 1) / n for positives and
    w_j * p_j / n for negatives, with p = sigma(z). Under a calibrated model
    on sparse data the negative gradient is roughly (base rate)/n, which is
    the vanishing term the ranking losses are meant to repair.
    """
    z = _single(batch)
    _check_beta(beta_pos)
    y = batch.labels.astype(np.float64)
    n = batch.n
    w_eff = batch.weights * np.where(batch.labels == 1, beta_pos, 1.0)
    log_p = log_sigmoid(z)
    log_q = log_sigmoid(-z)
    loss = -np.sum(w_eff * (y * log_p + (1.0 - y) * log_q)) / n
    grad = w_eff * (expit(z) - y) / n
    return LossOutput(float(loss), grad)


def ranknet_pairwise(batch: LabeledBatch) -> LossOutput:
    """Pairwise logistic ranking loss over all positive-negative pairs.

    loss = -(1/(n_pos*n_neg)) * sum_{i in pos} sum_{j in neg} log sigma(z_i - z_j)

    Gradients: +sigma(z_j - z_i) averaged over pairs for negatives,
    -(1 - sigma(z_i - z_j)) averaged for positives. They sum to zero and are
    invariant to a constant logit shift. Per-sample weights are ignored.
    """
    z = _single(batch)
    pos = batch.labels == 1
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = batch.n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateBatchError("pairwise ranking needs both label classes")
    zp = z[pos]
    zn = z[neg]
    diff = zp[:, None] - zn[None, :]
    n_pairs = n_pos * n_neg
    loss = float(np.sum(np.logaddexp(0.0, -diff)) / n_pairs)
    s = expit(-diff)  # sigma(z_j - z_i), one entry per (pos, neg) pair
    grad = np.zeros_like(z)
    grad[pos] = -s.sum(axis=1) / n_pairs
    grad[neg] = s.sum(axis=0) / n_pairs
    return LossOutput(loss, grad)


def listnet(batch: LabeledBatch) -> LossOutput:
    """Top-one listwise softmax loss over the positives of the batch.

    loss = -(1/n_pos) * sum_{i in pos} log softmax(z)_i

    The softmax runs over the whole batch, so every negative receives
    gradient p_k (its softmax mass) regardless of how calibrated the model
    is. Requires at least one positive; weights are ignored.
    """
    z = _single(batch)
    pos = batch.labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateBatchError("listwise loss needs at least one positive")
    m = z.max()
    shifted = z - m
    lse = m + np.log(np.sum(np.exp(shifted)))
    p = np.exp(shifted)
    p /= p.sum()
    loss = float(-(np.sum(z[pos]) - n_pos * lse) / n_pos)
    grad = p - batch.labels.astype(np.float64) / n_pos
    return LossOutput(loss, grad)


def rcr_rank(batch: LabeledBatch) -> LossOutput:
    """Regression-compatible listwise term: softmax replaced by a sigmoid ratio.

    loss = -(1/n_pos) * sum_{i in pos} log( sigma(z_i) / sum_k sigma(z_k) )

    grad_k = s_k (1 - s_k) / S - y_k (1 - s_k) / n_pos, with s = sigma(z) and
    S = sum_k s_k. Keeps the listwise shape while staying on the sigmoid
    scale used for calibration.
    """
    z = _single(batch)
    pos = batch.labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateBatchError("listwise loss needs at least one positive")
    s = expit(z)
    total = float(s.sum())
    log_p = log_sigmoid(z)
    loss = float(-(np.sum(log_p[pos]) - n_pos * np.log(total)) / n_pos)
    sprime = s * (1.0 - s)
    grad = sprime / total - batch.labels.astype(np.float64) * (1.0 - s) / n_pos
    return LossOutput(loss, grad)


def _combine(batch, alpha, beta_pos, rank_fn) -> LossOutput:
    # alpha == 1 must not touch the ranking term: single-class batches are
    # legal at that endpoint.
    _check_alpha(alpha)
    if alpha == 1.0:
        return bce(batch, beta_pos)
    if alpha == 0.0:
        return rank_fn(batch)
    c = bce(batch, beta_pos)
    r = rank_fn(batch)
    return LossOutput(
        alpha * c.loss + (1.0 - alpha) * r.loss,
        alpha * c.grad_logits + (1.0 - alpha) * r.grad_logits,
    )


def combined_pair(batch: LabeledBatch, alpha: float, beta_pos: float = 1.0) -> LossOutput:
    """alpha * bce + (1 - alpha) * ranknet_pairwise, gradients combined the same way."""
    return _combine(batch, alpha, beta_pos, ranknet_pairwise)


def combined_list(batch: LabeledBatch, alpha: float, beta_pos: float = 1.0) -> LossOutput:
    """alpha * bce + (1 - alpha) * listnet."""
    return _combine(batch, alpha, beta_pos, listnet)


def rcr_combined(batch: LabeledBatch, alpha: float, beta_pos: float = 1.0) -> LossOutput:
    """alpha * bce + (1 - alpha) * rcr_rank."""
    return _combine(batch, alpha, beta_pos, rcr_rank)


def _row_log_softmax(zz: np.ndarray) -> np.ndarray:
    m = zz.max(axis=1, keepdims=True)
    shifted = zz - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _jrc_classification(batch: LabeledBatch) -> LossOutput:
    zz = _dual(batch)
    y = batch.labels
    n = batch.n
    log_probs = _row_log_softmax(zz)
    loss = float(-np.sum(log_probs[np.arange(n), y]) / n)
    grad = np.exp(log_probs)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return LossOutput(loss, grad)


def jrc(batch: LabeledBatch, alpha: float) -> LossOutput:
    """Two-logit loss joining per-row classification with per-column ranking.

    Each sample carries logits (z0, z1) for non-click/click. The
    classification term is the per-row two-way softmax cross-entropy. The
    ranking term normalises each sample's labelled logit against the same
    column across the batch:

    L_rank = -(1/n) * sum_i log( exp(z_{i,y_i}) / sum_k exp(z_{k,y_i}) )

    so positives compete in the click column and negatives in the non-click
    column. Total = alpha * L_clf + (1 - alpha) * L_rank. alpha = 1 skips the
    ranking term entirely; otherwise both label classes must be present.
    """
    _check_alpha(alpha)
    clf = _jrc_classification(batch)
    if alpha == 1.0:
        return clf
    zz = batch.dual_logits
    y = batch.labels
    n = batch.n
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateBatchError("two-logit ranking term needs both label classes")

    col_losses = np.zeros(2)
    grad_rank = np.zeros_like(zz)
    for col, members, count in ((0, ~pos, n_neg), (1, pos, n_pos)):
        zc = zz[:, col]
        m = zc.max()
        shifted = zc - m
        lse = m + np.log(np.sum(np.exp(shifted)))
        q = np.exp(shifted)
        q /= q.sum()
        col_losses[col] = -(np.sum(zc[members]) - count * lse)
        grad_rank[:, col] = (count * q - np.where(members, 1.0, 0.0)) / n
    loss_rank = float(col_losses.sum() / n)
    return LossOutput(
        alpha * clf.loss + (1.0 - alpha) * loss_rank,
        alpha * clf.grad_logits + (1.0 - alpha) * grad_rank,
    )


def focal(batch: LabeledBatch, gamma: float) -> LossOutput:
    """Focal loss with the full product-rule gradient.

    loss = -(1/n) * sum_i [ y_i (1-p_i)^gamma log p_i
                            + (1-y_i) p_i^gamma log(1-p_i) ]

    The modulating factor is differentiated through, so for a negative
    grad = p^gamma * (p - gamma (1-p) log(1-p)) / n and for a positive
    grad = (1-p)^gamma * ((p - 1) + gamma p log p) / n. At gamma = 0 the
    factor is exactly 1.0 and both value and gradient reproduce unweighted
    BCE bit for bit. Per-sample weights and beta_pos do not apply.
    """
    z = _single(batch)
    if gamma < 0.0:
        raise InvalidInputError("gamma must be >= 0")
    y = batch.labels.astype(np.float64)
    n = batch.n
    log_p = log_sigmoid(z)
    log_q = log_sigmoid(-z)
    p = expit(z)
    # (1-p)^gamma for positives, p^gamma for negatives, via exp(gamma*log(.)).
    mod = np.exp(gamma * np.where(batch.labels == 1, log_q, log_p))
    loss = float(-np.sum(mod * np.where(batch.labels == 1, log_p, log_q)) / n)
    corr = np.where(batch.labels == 1, p * log_p, -(1.0 - p) * log_q)
    grad = mod * ((p - y) + gamma * corr) / n
    return LossOutput(loss, grad)


def focal_normalized_offset(batch: LabeledBatch, gamma: float) -> float:
    """Per-batch additive offset that makes the negative focal weights average 1."""
    z = _single(batch)
    if gamma < 0.0:
        raise InvalidInputError("gamma must be >= 0")
    neg = batch.labels == 0
    if not neg.any():
        raise DegenerateBatchError("normalisation needs at least one negative")
    pgam = np.exp(gamma * log_sigmoid(z[neg]))
    return float(1.0 - pgam.mean())


def focal_normalized(batch: LabeledBatch, gamma: float,
                     frozen_offset: float | None = None) -> LossOutput:
    """Focal loss whose negative weights are shifted to average exactly 1.

    Negative i is weighted by p_i^gamma + offset with
    offset = 1 - mean_{k in neg}(p_k^gamma), recomputed every batch. The
    offset is a stop-gradient constant: it shifts weights, not the loss
    geometry. Pass ``frozen_offset`` to evaluate the loss surface consistent
    with that convention (finite-difference checks must hold the offset at
    its unperturbed-batch value). Positives are plain focal terms.
    """
    z = _single(batch)
    if gamma < 0.0:
        raise InvalidInputError("gamma must be >= 0")
    neg = batch.labels == 0
    if not neg.any():
        raise DegenerateBatchError("normalisation needs at least one negative")
    n = batch.n
    y1 = batch.labels == 1
    log_p = log_sigmoid(z)
    log_q = log_sigmoid(-z)
    p = expit(z)
    pgam_neg = np.exp(gamma * log_p[neg])
    if frozen_offset is None:
        offset = 1.0 - float(pgam_neg.mean())
    else:
        offset = float(frozen_offset)

    loss_terms = np.zeros(n)
    loss_terms[y1] = np.exp(gamma * log_q[y1]) * log_p[y1]
    loss_terms[neg] = (pgam_neg + offset) * log_q[neg]
    loss = float(-loss_terms.sum() / n)

    grad = np.zeros(n)
    grad[y1] = np.exp(gamma * log_q[y1]) * ((p[y1] - 1.0) + gamma * p[y1] * log_p[y1])
    # focal gradient plus offset * d(-log(1-p))/dz = offset * p
    grad[neg] = pgam_neg * (p[neg] - gamma * (1.0 - p[neg]) * log_q[neg]) + offset * p[neg]
    grad /= n
    return LossOutput(loss, grad)


def evaluate(spec: LossSpec, batch: LabeledBatch) -> LossOutput:
    """Dispatch a LossSpec to the matching loss function."""
    k = spec.kind
    if k == "bce":
        return bce(batch, spec.beta_pos)
    if k == "ranknet":
        return ranknet_pairwise(batch)
    if k == "combined_pair":
        return combined_pair(batch, spec.alpha, spec.beta_pos)
    if k == "listnet":
        return listnet(batch)
    if k == "combined_list":
        return combined_list(batch, spec.alpha, spec.beta_pos)
    if k == "rcr_rank":
        return rcr_rank(batch)
    if k == "rcr_combined":
        return rcr_combined(batch, spec.alpha, spec.beta_pos)
    if k == "jrc":
        return jrc(batch, spec.alpha)
    if k == "focal":
        return focal(batch, spec.gamma)
    if k == "focal_normalized":
        return focal_normalized(batch, spec.gamma)
    raise InvalidInputError(f"unknown loss kind {k!r}")


def evaluate_with_rank_fallback(spec: LossSpec, batch: LabeledBatch) -> tuple[LossOutput, bool]:
    """Evaluate a loss, letting ranking terms contribute zero on degenerate batches.

    Returns (output, degenerate). For combined kinds the fallback is
    alpha * classification term; for pure ranking kinds it is a zero loss
    with zero gradients (the step becomes a no-op); for the normalised focal
    kind an all-positive batch falls back to plain focal, whose positive
    terms are identical.
    """
    try:
        return evaluate(spec, batch), False
    except DegenerateBatchError:
        k = spec.kind
        if k in ("combined_pair", "combined_list", "rcr_combined"):
            out = bce(batch, spec.beta_pos)
            return LossOutput(spec.alpha * out.loss, spec.alpha * out.grad_logits), True
        if k == "jrc":
            out = _jrc_classification(batch)
            return LossOutput(spec.alpha * out.loss, spec.alpha * out.grad_logits), True
        if k == "focal_normalized":
            return focal(batch, spec.gamma), True
        zeros = np.zeros_like(batch.logits if batch.logits is not None else batch.dual_logits)
        return LossOutput(0.0, zeros), True
