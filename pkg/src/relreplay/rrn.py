"""Relation net: maps pair statistics to loss weights in (0, 1).

Two small branches encode a pair of samples drawn from the incoming batch and
the rehearsal buffer. Branch A sees their two loss values, branch B the two
seen-slot logit norms; the relu branch outputs are concatenated and a sigmoid
merge layer emits one weight per loss term (2 for plain replay, 3 when a
distillation term is present).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .mainnet import Prediction
from .tensor import Array, LayerSpec, ParamVector, check_finite, init_params


@dataclass
class RelationNet:
    params: ParamVector

    @property
    def hidden(self) -> int:
        return self.params.layout[0].out_dim

    @property
    def n_out(self) -> int:
        return self.params.layout[2].out_dim


@dataclass(frozen=True)
class PairFeatures:
    """Inputs for one pair: losses = [new, buffer], norms = [new, buffer]."""

    losses: Array
    norms: Array

    def __post_init__(self) -> None:
        losses = np.asarray(self.losses, dtype=np.float64)
        norms = np.asarray(self.norms, dtype=np.float64)
        if losses.shape != (2,) or norms.shape != (2,):
            raise ConfigError("pair features are two losses and two norms")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "norms", norms)


def build_relation_net(rng: np.random.Generator, n_out: int = 2, hidden: int = 16) -> RelationNet:
    if n_out not in (2, 3):
        raise ConfigError(f"n_out must be 2 or 3, got {n_out}")
    if hidden < 1:
        raise ConfigError("hidden width must be >= 1")
    layout = (
        LayerSpec(2, hidden, "relu"),
        LayerSpec(2, hidden, "relu"),
        LayerSpec(2 * hidden, n_out, "sigmoid"),
    )
    return RelationNet(init_params(layout, rng))


def _forward_parts(net: RelationNet, losses: Array, norms: Array):
    (wa, ba), (wb, bb), (wm, bm) = net.params.layers()
    za = losses @ wa.T + ba
    aa = np.maximum(za, 0.0)
    zb = norms @ wb.T + bb
    ab = np.maximum(zb, 0.0)
    merged = np.concatenate([aa, ab], axis=1)
    zm = merged @ wm.T + bm
    out = expit(zm)
    return za, zb, merged, out


def _as_feature_matrix(arr: Array, what: str) -> Array:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError(f"{what} must have shape [batch, 2]")
    check_finite(arr, what)
    return arr


def rrn_apply(net: RelationNet, losses: Array, norms: Array) -> Array:
    """Weights for a batch of pairs; rows are [w_new, w_buf(, w_kd)] in (0, 1)."""
    losses = _as_feature_matrix(losses, "pair losses")
    norms = _as_feature_matrix(norms, "pair norms")
    if losses.shape[0] != norms.shape[0]:
        raise ConfigError("losses and norms disagree on batch size")
    return _forward_parts(net, losses, norms)[3]


def rrn_forward(net: RelationNet, feats: PairFeatures) -> Array:
    """Weight vector for a single pair."""
    return rrn_apply(net, feats.losses[None, :], feats.norms[None, :])[0]


def rrn_batch_weights(
    net: RelationNet,
    pred_new: Prediction,
    pred_buf: Prediction,
    losses_new: Array,
    losses_buf: Array,
) -> Array:
    """Pairs row i of the incoming batch with row i of the buffer batch."""
    losses_new = np.asarray(losses_new, dtype=np.float64)
    losses_buf = np.asarray(losses_buf, dtype=np.float64)
    sizes = {losses_new.shape[0], losses_buf.shape[0], pred_new.logits.shape[0], pred_buf.logits.shape[0]}
    if len(sizes) != 1:
        raise ConfigError("pair batches must share one batch size")
    losses = np.stack([losses_new, losses_buf], axis=1)
    norms = np.stack([pred_new.logit_norms, pred_buf.logit_norms], axis=1)
    return rrn_apply(net, losses, norms)


def rrn_batch_jacobian(net: RelationNet, losses: Array, norms: Array) -> Array:
    """d weight[k] / d params for every pair: shape [batch, n_out, n_params].

    Written out by hand so each (pair, output) slice is exact; verified against
    finite differences in the test suite.
    """
    losses = _as_feature_matrix(losses, "pair losses")
    norms = _as_feature_matrix(norms, "pair norms")
    za, zb, merged, out = _forward_parts(net, losses, norms)
    (wa, _), (wb, _), (wm, _) = net.params.layers()
    batch, k = out.shape
    h = net.hidden

    s = out * (1.0 - out)  # [B,K] sigmoid slope at each output
    # merge layer: only row k of the weight matrix sees output k
    d_wm = np.zeros((batch, k, k, 2 * h))
    idx = np.arange(k)
    d_wm[:, idx, idx, :] = s[:, :, None] * merged[:, None, :]
    d_bm = np.zeros((batch, k, k))
    d_bm[:, idx, idx] = s
    # back into the branches
    d_merged = s[:, :, None] * wm[None, :, :]          # [B,K,2H]
    d_za = d_merged[:, :, :h] * (za > 0.0)[:, None, :]  # [B,K,H]
    d_zb = d_merged[:, :, h:] * (zb > 0.0)[:, None, :]
    d_wa = np.einsum("bkh,bi->bkhi", d_za, losses).reshape(batch, k, -1)
    d_wb = np.einsum("bkh,bi->bkhi", d_zb, norms).reshape(batch, k, -1)

    jac = np.concatenate(
        [d_wa, d_za, d_wb, d_zb, d_wm.reshape(batch, k, -1), d_bm], axis=2
    )
    if jac.shape[2] != net.params.size:
        raise ConfigError("jacobian assembly does not match parameter layout")
    return jac


def rrn_param_jacobian(net: RelationNet, feats: PairFeatures) -> Array:
    """[n_out, n_params] Jacobian for a single pair."""
    return rrn_batch_jacobian(net, feats.losses[None, :], feats.norms[None, :])[0]
