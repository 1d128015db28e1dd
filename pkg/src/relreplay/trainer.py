"""Bi-level training: an inner classifier step and an outer relation-net step.

The inner level takes one SGD step on the pair-weighted replay loss. The outer
level asks how the buffer loss at the post-step parameters would change if the
relation net had emitted different weights, and answers it in closed form: each
pair's weight receives the dot product between the mean buffer-loss gradient
(at the post-step parameters) and that pair's own unweighted loss gradient (at
the pre-step parameters), scaled by -eta/B, then chained through the relation
net's parameter Jacobian. No second-order terms are involved because the inner
step is a single explicit SGD update.

Scheduling follows two knobs. During the first `iter_warm` steps of each task
the classifier uses preset weights while the relation net already trains
against a hypothetical weighted step; afterwards the emitted weights drive the
classifier directly. Outer updates fire every `interval`-th replay-capable
step. The `vanilla` variant instead updates both levels jointly at every step
from the same objective, with the weights treated as plain multipliers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .buffer import ReservoirBuffer
from .errors import ConfigError, NumericError, TrainingDiverged, UsageError
from .losses import (
    LossBreakdown,
    PairBatch,
    build_pair_batch,
    inner_loss_gradient,
    kd_upstream,
    new_class_set,
    outer_loss_gradient,
    outer_loss_per_sample_gradients,
    pair_loss_values,
)
from .mainnet import MainNet, ce_upstream
from .rrn import RelationNet, rrn_apply, rrn_batch_jacobian
from .tensor import AdamState, Array, adam_step, per_sample_gradients, sgd_step

VARIANTS = ("rer", "rer-ace", "rder", "vanilla", "baseline-only")
BASELINES = ("er", "er-ace", "derpp")
DEFAULT_PRESETS = {2: (1.0, 0.5), 3: (1.0, 0.5, 0.2)}


def _canon(token: str) -> str:
    return token.strip().lower().replace("_", "-").replace("der++", "derpp")


@dataclass
class TrainerConfig:
    """Everything the training loop needs besides the data stream."""

    variant: str = "rer"
    baseline: str = "er"
    eta_theta: float = 0.03
    eta_phi: float = 0.001
    weight_decay_phi: float = 1e-4
    batch_size: int = 32
    epochs_per_task: int = 50
    iter_warm: float | None = None
    interval: int | None = None
    preset_weights: tuple[float, ...] | None = None
    split_buffer: float | None = None
    hidden_dims: tuple[int, ...] = (100, 100)
    activation: str = "relu"
    rrn_hidden: int = 16
    kd_on_probabilities: bool = False
    derpp_two_buffer_batches: bool = False
    gbf_at_inner_start: bool = False

    def __post_init__(self) -> None:
        self.variant = _canon(self.variant)
        self.baseline = _canon(self.baseline)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}, expected one of {BASELINES}")
        if self.eta_theta < 0 or self.eta_phi < 0 or self.weight_decay_phi < 0:
            raise ConfigError("learning rates and weight decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be >= 1")
        if self.interval is not None and self.interval < 1:
            raise ConfigError("interval must be >= 1")
        if self.iter_warm is not None:
            if not (self.iter_warm >= 0 or math.isinf(self.iter_warm)):
                raise ConfigError("iter_warm must be >= 0 or infinite")
        if self.preset_weights is not None:
            self.preset_weights = tuple(float(w) for w in self.preset_weights)
            if len(self.preset_weights) != self.n_out:
                raise ConfigError(
                    f"preset_weights needs {self.n_out} entries for this objective, got {len(self.preset_weights)}"
                )
            if any(w < 0 for w in self.preset_weights):
                raise ConfigError("preset weights must be >= 0")
        if self.split_buffer is not None:
            if not 0.0 < self.split_buffer < 1.0:
                raise ConfigError("split_buffer must lie strictly inside (0, 1)")
            if not (self.relational or self.variant == "vanilla"):
                raise ConfigError("split_buffer needs a variant with an outer loop")
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden dims must be >= 1")
        if self.rrn_hidden < 1:
            raise ConfigError("rrn_hidden must be >= 1")

    @property
    def relational(self) -> bool:
        return self.variant in ("rer", "rer-ace", "rder")

    @property
    def objective(self) -> str:
        return {"rer": "er", "rer-ace": "er-ace", "rder": "derpp", "vanilla": "derpp"}.get(
            self.variant, self.baseline
        )

    @property
    def n_out(self) -> int:
        return 3 if self.objective == "derpp" else 2

    @property
    def presets(self) -> Array:
        chosen = self.preset_weights or DEFAULT_PRESETS[self.n_out]
        return np.asarray(chosen, dtype=np.float64)

    @property
    def method_name(self) -> str:
        return self.baseline if self.variant == "baseline-only" else self.variant

    def resolve_interval(self) -> int:
        if self.interval is not None:
            return int(self.interval)
        return max(1, self.epochs_per_task // 10)

    def resolve_iter_warm(self, steps_per_task: int) -> float:
        if self.iter_warm is None:
            return steps_per_task // 2
        return self.iter_warm


def inner_step(
    net: MainNet, pairs: PairBatch, weights: Array, eta_theta: float, kd_on_probabilities: bool = False
) -> tuple[MainNet, LossBreakdown]:
    """One SGD step of the classifier on the weighted pair loss."""
    bd, grad = inner_loss_gradient(net, pairs, weights, kd_on_probabilities)
    return MainNet(sgd_step(net.params, grad, eta_theta), net.num_classes), bd


@dataclass(frozen=True)
class MetaGradient:
    """Outer-level gradient and the per-pair alignment coefficients behind it."""

    grad_phi: Array
    coefficients: Array
    gbf_mean: Array
    outer_total: float


def pair_coefficients(gbf_mean: Array, g_new: Array, g_buf: Array, g_kd: Array | None) -> Array:
    """Dot each pair's unweighted loss gradients against the mean buffer gradient."""
    cols = [g_new @ gbf_mean, g_buf @ gbf_mean]
    if g_kd is not None:
        cols.append(g_kd @ gbf_mean)
    return np.stack(cols, axis=1)


def class_grouped_coefficients(
    gbf_samples: Array, bf_labels: Array, g_new: Array, g_buf: Array, g_kd: Array | None
) -> Array:
    """Same coefficients, accumulated class by class over the buffer batch.

    The buffer-batch gradients are first summed within each label group, each
    group is dotted separately, and the group contributions are added up. Pure
    reordering of the flat sum, so the result agrees to float accumulation
    error.
    """
    bf_labels = np.asarray(bf_labels)
    b = gbf_samples.shape[0]
    n_out = 2 if g_kd is None else 3
    out = np.zeros((g_new.shape[0], n_out))
    for c in np.unique(bf_labels):
        s_c = gbf_samples[bf_labels == c].sum(axis=0)
        out[:, 0] += g_new @ s_c
        out[:, 1] += g_buf @ s_c
        if g_kd is not None:
            out[:, 2] += g_kd @ s_c
    return out / b


def meta_gradient(
    net_k: MainNet,
    net_k1: MainNet,
    rnet: RelationNet,
    pairs: PairBatch,
    bf_x: Array,
    bf_y: Array,
    bf_logits: Array | None,
    eta_theta: float,
    kd_on_probabilities: bool = False,
    gbf_at_inner_start: bool = False,
    grouped: bool = False,
) -> MetaGradient:
    """Exact gradient of the post-step buffer loss w.r.t. the relation net.

    Args:
        net_k: parameters the inner step started from; `pairs` must have been
            built under them.
        net_k1: parameters after one weighted SGD step from net_k.
        bf_x, bf_y, bf_logits: the buffer batch the outer loss is measured on.
        gbf_at_inner_start: evaluate the buffer-loss gradient at net_k instead
            of net_k1. Cheaper by one forward set but no longer the exact
            derivative, so finite-difference checks only hold when this is off.
        grouped: accumulate the coefficients class by class (equivalent path).
    """
    if not pairs.has_buffer:
        raise UsageError("meta gradient needs pair batches with a buffer side")
    if net_k1.params.layout != net_k.params.layout:
        raise UsageError("post-step parameters do not share the starting layout")
    b = pairs.batch_size
    up_new = ce_upstream(
        pairs.pred_new, pairs.y_new, new_class_set(pairs.objective, pairs.curr_set, pairs.seen_set)
    )
    # raises if the pair batch was built under parameters other than net_k
    g_new = per_sample_gradients(net_k.params, pairs.pred_new.trace, up_new)
    up_buf = ce_upstream(pairs.pred_buf, pairs.y_buf, pairs.seen_set)
    g_buf = per_sample_gradients(net_k.params, pairs.pred_buf.trace, up_buf)
    g_kd = None
    if pairs.objective == "derpp":
        n_seen = int(pairs.seen_set.max()) + 1
        up_kd = kd_upstream(pairs.kd_pred, pairs.kd_stored, n_seen, kd_on_probabilities)
        g_kd = per_sample_gradients(net_k.params, pairs.kd_pred.trace, up_kd)
    eval_net = net_k if gbf_at_inner_start else net_k1
    ol, gbf_samples = outer_loss_per_sample_gradients(
        eval_net, bf_x, bf_y, bf_logits, pairs.objective, pairs.seen_set, kd_on_probabilities
    )
    if grouped:
        coeff = class_grouped_coefficients(gbf_samples, bf_y, g_new, g_buf, g_kd)
    else:
        coeff = pair_coefficients(gbf_samples.mean(axis=0), g_new, g_buf, g_kd)
    jac = rrn_batch_jacobian(rnet, pairs.feat_losses, pairs.feat_norms)
    grad_phi = -(eta_theta / b) * np.einsum("bk,bkp->p", coeff, jac)
    return MetaGradient(grad_phi, coeff, gbf_samples.mean(axis=0), ol.total)


def outer_step(
    rnet: RelationNet,
    adam_state: AdamState,
    mg: MetaGradient,
    eta_phi: float = 0.001,
    weight_decay: float = 1e-4,
) -> tuple[RelationNet, AdamState]:
    """One Adam step of the relation net along the meta gradient."""
    new_params, new_state = adam_step(
        adam_state, rnet.params, mg.grad_phi, lr=eta_phi, weight_decay=weight_decay
    )
    return RelationNet(new_params), new_state


def vanilla_step(
    net: MainNet,
    rnet: RelationNet,
    adam_state: AdamState,
    pairs: PairBatch,
    bf_x: Array,
    bf_y: Array,
    bf_logits: Array | None,
    cfg: TrainerConfig,
) -> tuple[MainNet, RelationNet, AdamState, LossBreakdown, float]:
    """Joint single-backward update of both nets from one objective.

    The objective is the weighted pair loss plus the buffer loss. The relation
    net sees gradient only through the weight multipliers, with the per-pair
    loss values held constant for that path; the buffer loss does not reach it
    at all, which is exactly what makes this a degenerate alternative to the
    two-level scheme.
    """
    weights = rrn_apply(rnet, pairs.feat_losses, pairs.feat_norms)
    bd, g_tr = inner_loss_gradient(net, pairs, weights, cfg.kd_on_probabilities)
    ol, g_bf = outer_loss_gradient(
        net, bf_x, bf_y, bf_logits, pairs.objective, pairs.seen_set, cfg.kd_on_probabilities
    )
    l_new, l_buf, l_kd = pair_loss_values(pairs, cfg.kd_on_probabilities)
    vals = [l_new, l_buf] + ([l_kd] if pairs.objective == "derpp" else [])
    jac = rrn_batch_jacobian(rnet, pairs.feat_losses, pairs.feat_norms)
    grad_phi = np.einsum("bk,bkp->p", np.stack(vals, axis=1), jac) / pairs.batch_size
    new_net = MainNet(sgd_step(net.params, g_tr + g_bf, cfg.eta_theta), net.num_classes)
    new_rnet_params, new_adam = adam_step(
        adam_state, rnet.params, grad_phi, lr=cfg.eta_phi, weight_decay=cfg.weight_decay_phi
    )
    return new_net, RelationNet(new_rnet_params), new_adam, bd, ol.total


@dataclass
class TrainState:
    """Mutable run state threaded through the tasks of one seed."""

    net: MainNet
    buffer: ReservoirBuffer
    data_rng: np.random.Generator
    meta_rng: np.random.Generator
    split_rng: np.random.Generator
    rnet: RelationNet | None = None
    adam: AdamState | None = None
    trace: list = field(default_factory=list)
    global_step: int = 0


def _draw_outer_batch(state: TrainState, batch_size: int, replay_idx: Array, pool: Array | None) -> Array:
    # the outer batch must not be the replay batch as an index set,
    # unless the buffer is too small for two distinct sets to exist
    for _ in range(100):
        idx = state.buffer.sample_indices(batch_size, state.meta_rng, pool=pool)
        if pool is not None or len(state.buffer) <= batch_size:
            return idx
        if not np.array_equal(np.sort(idx), np.sort(replay_idx)):
            return idx
    raise UsageError("could not draw an outer batch distinct from the replay batch")


def train_task(
    state: TrainState,
    stream,
    task_index: int,
    cfg: TrainerConfig,
    step_callback: Callable | None = None,
) -> None:
    """Train one task in place, appending one trace row per step.

    Incoming samples enter the reservoir every step together with the logits
    they had under the pre-step classifier. The split-buffer mode repartitions
    the buffer once per epoch and falls back to the unsplit draw while the
    buffer is still too small to give both sides at least one entry.
    """
    task = stream.tasks[task_index]
    curr = np.asarray(task.class_ids, dtype=np.int64)
    seen = np.unique(np.concatenate([np.asarray(t.class_ids) for t in stream.tasks[: task_index + 1]]))
    state.net.num_classes = max(state.net.num_classes, int(seen.max()) + 1)
    n = task.train_x.shape[0]
    b = cfg.batch_size
    steps_per_epoch = n // b
    if steps_per_epoch < 1:
        raise ConfigError(f"task {task.task_id} has {n} train samples, fewer than one batch of {b}")
    warm = cfg.resolve_iter_warm(steps_per_epoch * cfg.epochs_per_task)
    interval = cfg.resolve_interval()
    replay_steps = 0
    step_in_task = 0
    for epoch in range(cfg.epochs_per_task):
        order = state.data_rng.permutation(n)
        inner_pool = outer_pool = None
        if cfg.split_buffer is not None and len(state.buffer) >= 2:
            try:
                inner_pool, outer_pool = state.buffer.split_partition(cfg.split_buffer, state.split_rng)
            except ConfigError:
                inner_pool = outer_pool = None
        for k in range(steps_per_epoch):
            step_in_task += 1
            state.global_step += 1
            rows = order[k * b : (k + 1) * b]
            x_new = task.train_x[rows]
            y_new = task.train_y[rows]
            row = {
                "step": state.global_step,
                "epoch": epoch,
                "task": task.task_id,
                "inner_loss": None,
                "outer_loss": None,
                "mean_w_new": None,
                "mean_w_buf": None,
                "mean_w_kd": None,
                "mean_g_new": None,
                "mean_g_buf": None,
            }
            if not state.buffer.is_empty:
                replay_steps += 1
            try:
                pairs, bd = _run_step(state, cfg, x_new, y_new, row, curr, seen,
                                      warm, interval, step_in_task, replay_steps,
                                      inner_pool, outer_pool)
            except TrainingDiverged:
                raise
            except NumericError as err:
                raise TrainingDiverged(
                    f"non-finite numbers at step {state.global_step} "
                    f"(task {task.task_id}, epoch {epoch})",
                    state.trace[-5:],
                ) from err
            if not np.isfinite(bd.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {state.global_step} (task {task.task_id}, epoch {epoch})",
                    state.trace[-5:],
                )
            row["inner_loss"] = float(bd.total)
            row["mean_w_new"] = float(bd.weights_used[:, 0].mean())
            if pairs.has_buffer:
                row["mean_w_buf"] = float(bd.weights_used[:, 1].mean())
                if bd.weights_used.shape[1] == 3:
                    row["mean_w_kd"] = float(bd.weights_used[:, 2].mean())
            for i in range(b):
                state.buffer.insert_sample(x_new[i], y_new[i], pairs.pred_new.logits[i], task.task_id)
            state.trace.append(row)
            if step_callback is not None:
                step_callback(task_index, step_in_task, state.global_step, state.net.params.values.copy())


def _run_step(state, cfg, x_new, y_new, row, curr, seen, warm, interval,
              step_in_task, replay_steps, inner_pool, outer_pool):
    """One training step's updates; returns (pair batch, loss breakdown)."""
    b = x_new.shape[0]
    relational = cfg.relational
    if state.buffer.is_empty:
        pairs = build_pair_batch(
            state.net, x_new, y_new, None, None, None, cfg.objective, curr, seen
        )
        state.net, bd = inner_step(
            state.net, pairs, cfg.presets, cfg.eta_theta, cfg.kd_on_probabilities
        )
        return pairs, bd
    midx = state.buffer.sample_indices(b, state.data_rng, pool=inner_pool)
    bx, by, blog, _ = state.buffer.gather(midx)
    kd_x = kd_stored = None
    if cfg.derpp_two_buffer_batches and cfg.objective == "derpp":
        kidx = state.buffer.sample_indices(b, state.data_rng, pool=inner_pool)
        kd_x, _, kd_stored, _ = state.buffer.gather(kidx)
    pairs = build_pair_batch(
        state.net, x_new, y_new, bx, by, blog, cfg.objective, curr, seen,
        kd_x=kd_x, kd_stored=kd_stored, kd_on_probabilities=cfg.kd_on_probabilities,
    )
    if cfg.variant == "vanilla":
        bf_idx = _draw_outer_batch(state, b, midx, outer_pool)
        bfx, bfy, bflog, _ = state.buffer.gather(bf_idx)
        state.net, state.rnet, state.adam, bd, outer_total = vanilla_step(
            state.net, state.rnet, state.adam, pairs, bfx, bfy, bflog, cfg
        )
        row["outer_loss"] = float(outer_total)
        return pairs, bd
    rrn_w = (
        rrn_apply(state.rnet, pairs.feat_losses, pairs.feat_norms)
        if relational
        else None
    )
    use_rrn = relational and step_in_task > warm
    weights = rrn_w if use_rrn else cfg.presets
    net_next, bd = inner_step(
        state.net, pairs, weights, cfg.eta_theta, cfg.kd_on_probabilities
    )
    if relational and replay_steps % interval == 0:
        bf_idx = _draw_outer_batch(state, b, midx, outer_pool)
        bfx, bfy, bflog, _ = state.buffer.gather(bf_idx)
        if use_rrn:
            net_virtual = net_next
        else:
            # during warm-up the classifier follows presets, so the
            # outer level differentiates a hypothetical weighted step
            net_virtual, _ = inner_step(
                state.net, pairs, rrn_w, cfg.eta_theta, cfg.kd_on_probabilities
            )
        mg = meta_gradient(
            state.net, net_virtual, state.rnet, pairs, bfx, bfy, bflog,
            cfg.eta_theta, cfg.kd_on_probabilities, cfg.gbf_at_inner_start,
        )
        state.rnet, state.adam = outer_step(
            state.rnet, state.adam, mg, cfg.eta_phi, cfg.weight_decay_phi
        )
        row["outer_loss"] = float(mg.outer_total)
        row["mean_g_new"] = float(mg.coefficients[:, 0].mean())
        row["mean_g_buf"] = float(mg.coefficients[:, 1].mean())
    state.net = net_next
    return pairs, bd
