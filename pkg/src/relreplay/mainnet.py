"""The classifier under continual training and its cross-entropy machinery.

The output layer has one slot per class the stream will ever contain; only the
first `num_classes` slots count as "seen" and participate in logit norms.
Cross-entropy is always computed over an explicit class set, so the same
forward pass serves full, task-restricted, and seen-so-far losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import (
    Array,
    ForwardTrace,
    LayerSpec,
    ParamVector,
    dense_forward,
    init_params,
    per_sample_gradients,
)


@dataclass
class MainNet:
    params: ParamVector
    num_classes: int = 0

    @property
    def input_dim(self) -> int:
        return self.params.layout[0].in_dim

    @property
    def total_slots(self) -> int:
        return self.params.layout[-1].out_dim


def build_main_net(
    input_dim: int,
    hidden_dims: Sequence[int],
    total_classes: int,
    rng: np.random.Generator,
    activation: str = "relu",
    num_classes: int | None = None,
) -> MainNet:
    """MLP classifier with an identity output layer sized for the whole stream."""
    if total_classes < 1:
        raise ConfigError("total_classes must be >= 1")
    dims = [input_dim, *hidden_dims]
    layout = [LayerSpec(dims[i], dims[i + 1], activation) for i in range(len(dims) - 1)]
    layout.append(LayerSpec(dims[-1], total_classes, "identity"))
    n_seen = total_classes if num_classes is None else num_classes
    if not 0 <= n_seen <= total_classes:
        raise ConfigError("num_classes must lie in [0, total_classes]")
    return MainNet(init_params(layout, rng), n_seen)


@dataclass(frozen=True)
class Prediction:
    """Logits for a batch plus the retained forward state.

    logit_norms is the l2 norm of each row restricted to the first
    `num_classes` slots, the "seen" part of the output layer.
    """

    logits: Array
    logit_norms: Array
    trace: ForwardTrace
    num_classes: int


def predict(net: MainNet, batch: Array) -> Prediction:
    if net.num_classes < 1:
        raise ConfigError("classifier has no registered classes yet")
    trace = dense_forward(net.params, batch)
    norms = np.linalg.norm(trace.output[:, : net.num_classes], axis=1)
    return Prediction(trace.output, norms, trace, net.num_classes)


def normalize_class_set(class_set: Sequence[int] | Array, total_slots: int) -> Array:
    cs = np.unique(np.asarray(class_set, dtype=np.int64))
    if cs.size == 0:
        raise ConfigError("class set is empty")
    if cs[0] < 0 or cs[-1] >= total_slots:
        raise ConfigError(f"class set {cs.tolist()} outside [0, {total_slots})")
    return cs


def _restricted_log_probs(pred: Prediction, class_set: Array) -> tuple[Array, Array]:
    # returns (log softmax over class_set columns, the column-restricted logits)
    sub = pred.logits[:, class_set]
    m = sub.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sub - m).sum(axis=1))
    return sub - lse[:, None], sub


def cross_entropy(pred: Prediction, labels: Array, class_set: Sequence[int] | Array) -> Array:
    """Per-sample cross-entropy with the softmax restricted to class_set columns.

    Labels must be members of class_set; everything else in the output layer is
    ignored, so untrained slots cannot leak probability mass.
    """
    cs = normalize_class_set(class_set, pred.logits.shape[1])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (pred.logits.shape[0],):
        raise ConfigError("labels must be a vector matching the batch")
    if not np.all(np.isin(labels, cs)):
        bad = labels[~np.isin(labels, cs)]
        raise UsageError(f"labels {sorted(set(bad.tolist()))} not in class set {cs.tolist()}")
    logp, _ = _restricted_log_probs(pred, cs)
    pos = np.searchsorted(cs, labels)
    return -logp[np.arange(labels.size), pos]


def ce_upstream(pred: Prediction, labels: Array, class_set: Sequence[int] | Array) -> Array:
    """Per-sample dCE/dlogits, zero in columns outside class_set."""
    cs = normalize_class_set(class_set, pred.logits.shape[1])
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isin(labels, cs)):
        raise UsageError("labels not in class set")
    logp, _ = _restricted_log_probs(pred, cs)
    up = np.zeros_like(pred.logits)
    up[:, cs] = np.exp(logp)
    up[np.arange(labels.size), labels] -= 1.0
    return up


def ce_gradient(net: MainNet, batch: Array, labels: Array, class_set: Sequence[int] | Array) -> Array:
    """Per-sample flat parameter gradients of the restricted cross-entropy."""
    pred = predict(net, batch)
    up = ce_upstream(pred, labels, class_set)
    return per_sample_gradients(net.params, pred.trace, up)


def task_masked_accuracy(net: MainNet, batch: Array, labels: Array, class_set: Sequence[int] | Array) -> float:
    """Accuracy with the argmax restricted to class_set columns."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ConfigError("accuracy needs a non-empty 2-d batch")
    labels = np.asarray(labels, dtype=np.int64)
    cs = normalize_class_set(class_set, net.total_slots)
    pred = predict(net, batch)
    masked = np.full_like(pred.logits, -np.inf)
    masked[:, cs] = pred.logits[:, cs]
    return float(np.mean(masked.argmax(axis=1) == labels))
