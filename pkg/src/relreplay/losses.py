"""Replay objectives: per-pair weighted losses, baselines, and the buffer loss.

Each training step pairs an incoming batch with an equally sized buffer batch.
The inner loss is a mean over pairs of weighted terms:

    (1/B) * sum_j  w_new[j] * L(new_j) + w_buf[j] * L(buf_j) + w_kd[j] * KD(buf_j)

Baselines are the same computation with every row of weights pinned to a
constant preset, which is what makes the reduction tests bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .mainnet import (
    MainNet,
    Prediction,
    ce_upstream,
    cross_entropy,
    normalize_class_set,
    predict,
)
from .tensor import Array, dense_backward, per_sample_gradients

OBJECTIVES = ("er", "er-ace", "derpp")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar total plus the per-pair weighted terms that sum to it.

    per_pair_terms has columns [new, buffer, distill]; total is the mean of the
    row sums.
    """

    total: float
    per_pair_terms: Array
    weights_used: Array


@dataclass(frozen=True)
class OuterLoss:
    total: float
    per_sample: Array


def kd_values(pred: Prediction, stored_logits: Array, n_seen: int, on_probabilities: bool = False) -> Array:
    """Per-sample mean squared gap between current and stored outputs over seen slots."""
    if stored_logits is None:
        raise ConfigError("distillation needs stored logits")
    stored_logits = np.asarray(stored_logits, dtype=np.float64)
    if stored_logits.shape != pred.logits.shape:
        raise ConfigError("stored logits shape does not match predictions")
    cur = pred.logits[:, :n_seen]
    old = stored_logits[:, :n_seen]
    if on_probabilities:
        cur = _softmax(cur)
        old = _softmax(old)
    return np.mean((cur - old) ** 2, axis=1)


def kd_upstream(pred: Prediction, stored_logits: Array, n_seen: int, on_probabilities: bool = False) -> Array:
    """Per-sample d KD / d logits, zero outside the seen slots."""
    stored_logits = np.asarray(stored_logits, dtype=np.float64)
    cur = pred.logits[:, :n_seen]
    old = stored_logits[:, :n_seen]
    up = np.zeros_like(pred.logits)
    if on_probabilities:
        p = _softmax(cur)
        q = _softmax(old)
        g = 2.0 * (p - q) / n_seen
        up[:, :n_seen] = p * (g - np.sum(g * p, axis=1, keepdims=True))
    else:
        up[:, :n_seen] = 2.0 * (cur - old) / n_seen
    return up


def _softmax(z: Array) -> Array:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PairBatch:
    """One step's paired batches with predictions and relation-net features.

    Feature losses are the per-sample cross-entropies of the objective (the
    distillation term never feeds the relation net), taken at the parameters
    the step starts from. The buffer side is absent while the buffer is empty.
    """

    objective: str
    x_new: Array
    y_new: Array
    pred_new: Prediction
    curr_set: Array
    seen_set: Array
    x_buf: Array | None = None
    y_buf: Array | None = None
    stored_logits: Array | None = None
    pred_buf: Prediction | None = None
    kd_pred: Prediction | None = None
    kd_stored: Array | None = None
    feat_losses: Array | None = None
    feat_norms: Array | None = None

    @property
    def batch_size(self) -> int:
        return int(self.y_new.shape[0])

    @property
    def has_buffer(self) -> bool:
        return self.pred_buf is not None


def new_class_set(objective: str, curr_set: Array, seen_set: Array) -> Array:
    # the asymmetric variant trains incoming samples only against current classes
    return curr_set if objective == "er-ace" else seen_set


def build_pair_batch(
    net: MainNet,
    x_new: Array,
    y_new: Array,
    x_buf: Array | None,
    y_buf: Array | None,
    stored_logits: Array | None,
    objective: str,
    curr_set,
    seen_set,
    kd_x: Array | None = None,
    kd_stored: Array | None = None,
    kd_on_probabilities: bool = False,
) -> PairBatch:
    """Run the forward passes for one step and cache the pair features."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    curr_set = normalize_class_set(curr_set, net.total_slots)
    seen_set = normalize_class_set(seen_set, net.total_slots)
    y_new = np.asarray(y_new, dtype=np.int64)
    pred_new = predict(net, x_new)
    losses_new = cross_entropy(pred_new, y_new, new_class_set(objective, curr_set, seen_set))
    if x_buf is None or (hasattr(x_buf, "shape") and x_buf.shape[0] == 0):
        return PairBatch(objective, np.asarray(x_new, dtype=np.float64), y_new, pred_new, curr_set, seen_set)
    y_buf = np.asarray(y_buf, dtype=np.int64)
    if y_buf.shape[0] != y_new.shape[0]:
        raise ConfigError("pair batches must share one batch size")
    pred_buf = predict(net, x_buf)
    losses_buf = cross_entropy(pred_buf, y_buf, seen_set)
    kd_pred = None
    kd_tgt = None
    if objective == "derpp":
        if kd_x is not None:
            kd_pred = predict(net, kd_x)
            kd_tgt = np.asarray(kd_stored, dtype=np.float64)
        else:
            kd_pred = pred_buf
            kd_tgt = stored_logits
        if kd_tgt is None:
            raise ConfigError("distillation objective needs stored logits")
    return PairBatch(
        objective,
        np.asarray(x_new, dtype=np.float64),
        y_new,
        pred_new,
        curr_set,
        seen_set,
        np.asarray(x_buf, dtype=np.float64),
        y_buf,
        None if stored_logits is None else np.asarray(stored_logits, dtype=np.float64),
        pred_buf,
        kd_pred,
        None if kd_tgt is None else np.asarray(kd_tgt, dtype=np.float64),
        np.stack([losses_new, losses_buf], axis=1),
        np.stack([pred_new.logit_norms, pred_buf.logit_norms], axis=1),
    )


def _expand_weights(weights: Array, batch: int, n_out: int) -> Array:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = np.tile(weights, (batch, 1))
    if weights.shape != (batch, n_out):
        raise ConfigError(f"weights shape {weights.shape} does not match ({batch}, {n_out})")
    return weights


def pair_loss_values(pairs: PairBatch, kd_on_probabilities: bool) -> tuple[Array, Array, Array]:
    b = pairs.batch_size
    l_new = cross_entropy(
        pairs.pred_new, pairs.y_new, new_class_set(pairs.objective, pairs.curr_set, pairs.seen_set)
    )
    if not pairs.has_buffer:
        return l_new, np.zeros(b), np.zeros(b)
    l_buf = cross_entropy(pairs.pred_buf, pairs.y_buf, pairs.seen_set)
    if pairs.objective == "derpp":
        n_seen = int(pairs.seen_set.max()) + 1
        l_kd = kd_values(pairs.kd_pred, pairs.kd_stored, n_seen, kd_on_probabilities)
    else:
        l_kd = np.zeros(b)
    return l_new, l_buf, l_kd


def weighted_inner_loss(
    net: MainNet, pairs: PairBatch, weights: Array, kd_on_probabilities: bool = False
) -> LossBreakdown:
    """Mean over pairs of the weighted loss terms; weights may be one row per pair."""
    n_out = 3 if pairs.objective == "derpp" else 2
    weights = _expand_weights(weights, pairs.batch_size, n_out)
    if np.any(weights < 0.0):
        raise ConfigError("loss weights must be >= 0")
    l_new, l_buf, l_kd = pair_loss_values(pairs, kd_on_probabilities)
    terms = np.zeros((pairs.batch_size, 3))
    terms[:, 0] = weights[:, 0] * l_new
    if pairs.has_buffer:
        terms[:, 1] = weights[:, 1] * l_buf
        if n_out == 3:
            terms[:, 2] = weights[:, 2] * l_kd
    return LossBreakdown(float(np.mean(terms.sum(axis=1))), terms, weights)


def inner_loss_gradient(
    net: MainNet, pairs: PairBatch, weights: Array, kd_on_probabilities: bool = False
) -> tuple[LossBreakdown, Array]:
    """Loss breakdown plus the exact flat gradient w.r.t. the classifier."""
    bd = weighted_inner_loss(net, pairs, weights, kd_on_probabilities)
    b = pairs.batch_size
    w = bd.weights_used
    up_new = ce_upstream(
        pairs.pred_new, pairs.y_new, new_class_set(pairs.objective, pairs.curr_set, pairs.seen_set)
    )
    grad, _ = dense_backward(net.params, pairs.pred_new.trace, up_new * (w[:, 0] / b)[:, None])
    if pairs.has_buffer:
        up_buf = ce_upstream(pairs.pred_buf, pairs.y_buf, pairs.seen_set) * (w[:, 1] / b)[:, None]
        if pairs.objective == "derpp" and pairs.kd_pred is pairs.pred_buf:
            n_seen = int(pairs.seen_set.max()) + 1
            up_buf = up_buf + kd_upstream(
                pairs.pred_buf, pairs.kd_stored, n_seen, kd_on_probabilities
            ) * (w[:, 2] / b)[:, None]
        g_buf, _ = dense_backward(net.params, pairs.pred_buf.trace, up_buf)
        grad = grad + g_buf
        if pairs.objective == "derpp" and pairs.kd_pred is not pairs.pred_buf:
            n_seen = int(pairs.seen_set.max()) + 1
            up_kd = kd_upstream(pairs.kd_pred, pairs.kd_stored, n_seen, kd_on_probabilities)
            g_kd, _ = dense_backward(net.params, pairs.kd_pred.trace, up_kd * (w[:, 2] / b)[:, None])
            grad = grad + g_kd
    return bd, grad


def er_loss(net, x_new, y_new, x_buf, y_buf, w_new: float, w_buf: float, class_set) -> LossBreakdown:
    """Replay baseline: weighted cross-entropy on both batches over class_set."""
    _check_preset(w_new, w_buf)
    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "er", class_set, class_set)
    return weighted_inner_loss(net, pairs, np.array([w_new, w_buf]))


def derpp_loss(
    net,
    x_new,
    y_new,
    x_buf,
    y_buf,
    stored_logits,
    w_new: float,
    w_buf: float,
    w_kd: float,
    class_set,
    kd_x=None,
    kd_stored=None,
) -> LossBreakdown:
    """Replay plus logit distillation against the stored buffer outputs.

    By default one buffer batch serves both the cross-entropy and distillation
    terms; pass kd_x/kd_stored to draw them from a second batch instead.
    """
    _check_preset(w_new, w_buf, w_kd)
    pairs = build_pair_batch(
        net, x_new, y_new, x_buf, y_buf, stored_logits, "derpp", class_set, class_set,
        kd_x=kd_x, kd_stored=kd_stored,
    )
    return weighted_inner_loss(net, pairs, np.array([w_new, w_buf, w_kd]))


def erace_loss(net, x_new, y_new, x_buf, y_buf, w_new: float, w_buf: float, curr_set, seen_set) -> LossBreakdown:
    """Asymmetric replay: incoming samples score only against current classes."""
    _check_preset(w_new, w_buf)
    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "er-ace", curr_set, seen_set)
    return weighted_inner_loss(net, pairs, np.array([w_new, w_buf]))


def _check_preset(*weights: float) -> None:
    for w in weights:
        if w < 0.0:
            raise ConfigError(f"loss weight must be >= 0, got {w}")


def outer_loss(
    net: MainNet,
    x: Array,
    y: Array,
    stored_logits: Array | None,
    objective: str,
    class_set,
    kd_on_probabilities: bool = False,
) -> OuterLoss:
    """Mean buffer loss used by the outer level: cross-entropy, plus the
    distillation gap when the objective carries one."""
    ol, _, _ = _outer_parts(net, x, y, stored_logits, objective, class_set, kd_on_probabilities)
    return ol


def _outer_parts(net, x, y, stored_logits, objective, class_set, kd_on_probabilities):
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    cs = normalize_class_set(class_set, net.total_slots)
    y = np.asarray(y, dtype=np.int64)
    pred = predict(net, x)
    per = cross_entropy(pred, y, cs)
    up = ce_upstream(pred, y, cs)
    if objective == "derpp":
        n_seen = int(cs.max()) + 1
        per = per + kd_values(pred, stored_logits, n_seen, kd_on_probabilities)
        up = up + kd_upstream(pred, stored_logits, n_seen, kd_on_probabilities)
    return OuterLoss(float(per.mean()), per), pred, up


def outer_loss_gradient(
    net: MainNet,
    x: Array,
    y: Array,
    stored_logits: Array | None,
    objective: str,
    class_set,
    kd_on_probabilities: bool = False,
) -> tuple[OuterLoss, Array]:
    """Outer loss plus the flat gradient of its batch mean."""
    ol, pred, up = _outer_parts(net, x, y, stored_logits, objective, class_set, kd_on_probabilities)
    grad, _ = dense_backward(net.params, pred.trace, up / up.shape[0])
    return ol, grad


def outer_loss_per_sample_gradients(
    net: MainNet,
    x: Array,
    y: Array,
    stored_logits: Array | None,
    objective: str,
    class_set,
    kd_on_probabilities: bool = False,
) -> tuple[OuterLoss, Array]:
    """Outer loss plus each sample's flat parameter gradient ([batch, n_params])."""
    ol, pred, up = _outer_parts(net, x, y, stored_logits, objective, class_set, kd_on_probabilities)
    return ol, per_sample_gradients(net.params, pred.trace, up)
