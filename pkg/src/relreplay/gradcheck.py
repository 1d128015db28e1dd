"""Finite-difference verification of the outer-level gradient.

Each trial draws a random small classifier, relation net, and paired batches,
takes the weighted inner step, and compares the analytic relation-net gradient
of the post-step buffer loss against central differences component by
component. The class-grouped coefficient path is checked against the flat one
at the same time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import build_pair_batch, outer_loss
from .mainnet import MainNet, build_main_net
from .rrn import RelationNet, build_relation_net, rrn_apply
from .tensor import ParamVector
from . import trainer as _trainer
from .trainer import inner_step

FD_STEP = 1e-5


@dataclass(frozen=True)
class TrialResult:
    objective: str
    rel_err: float
    grouped_err: float
    n_phi: int


@dataclass
class GradcheckReport:
    trials: list[TrialResult]
    tol: float
    grouped_tol: float
    elapsed: float

    @property
    def max_rel_err(self) -> float:
        return max(t.rel_err for t in self.trials)

    @property
    def max_grouped_err(self) -> float:
        return max(t.grouped_err for t in self.trials)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol and self.max_grouped_err <= self.grouped_tol


def _random_instance(rng: np.random.Generator, objective: str):
    dim = int(rng.integers(3, 6))
    hidden = [(6,), (8, 6)][int(rng.integers(0, 2))]
    n_classes = int(rng.integers(4, 7))
    batch = int(rng.integers(4, 9))
    net = build_main_net(dim, hidden, n_classes, rng)
    # moderate scale keeps softmax away from saturation so differences stay informative
    net = MainNet(ParamVector(net.params.layout, net.params.values * 0.7), n_classes)
    rnet = build_relation_net(rng, n_out=3 if objective == "derpp" else 2)
    seen = np.arange(n_classes)
    curr = np.arange(n_classes // 2, n_classes)
    new_pool = curr if objective == "er-ace" else seen
    x_new = rng.standard_normal((batch, dim))
    y_new = rng.choice(new_pool, size=batch)
    x_buf = rng.standard_normal((batch, dim))
    y_buf = rng.choice(seen, size=batch)
    stored = 0.5 * rng.standard_normal((batch, n_classes)) if objective == "derpp" else None
    bf_x = rng.standard_normal((batch, dim))
    bf_y = rng.choice(seen, size=batch)
    bf_logits = 0.5 * rng.standard_normal((batch, n_classes)) if objective == "derpp" else None
    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, stored, objective, curr, seen)
    return net, rnet, pairs, (bf_x, bf_y, bf_logits)


def _fd_gradient(net, rnet, pairs, bf, eta_theta: float, h: float) -> np.ndarray:
    bf_x, bf_y, bf_logits = bf

    def value(phi_values: np.ndarray) -> float:
        probe = RelationNet(ParamVector(rnet.params.layout, phi_values))
        weights = rrn_apply(probe, pairs.feat_losses, pairs.feat_norms)
        stepped, _ = inner_step(net, pairs, weights, eta_theta)
        return outer_loss(stepped, bf_x, bf_y, bf_logits, pairs.objective, pairs.seen_set).total

    base = rnet.params.values
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        grad[i] = (value(plus) - value(minus)) / (2.0 * h)
    return grad


def _relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)))
    return 0.0 if scale < 1e-14 else float(np.linalg.norm(analytic - fd)) / scale


def run_gradcheck(
    trials: int = 50,
    seed: int = 20240,
    tol: float = 1e-5,
    grouped_tol: float = 1e-12,
    eta_theta: float = 0.03,
) -> GradcheckReport:
    """Run `trials` random configurations cycling over the three objectives."""
    start = time.perf_counter()
    objectives = ("er", "derpp", "er-ace")
    results = []
    for k in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        objective = objectives[k % len(objectives)]
        net, rnet, pairs, bf = _random_instance(rng, objective)
        weights = rrn_apply(rnet, pairs.feat_losses, pairs.feat_norms)
        stepped, _ = inner_step(net, pairs, weights, eta_theta)
        mg = _trainer.meta_gradient(net, stepped, rnet, pairs, *bf, eta_theta)
        rel_err = np.inf
        # a relu crossing inside the probe interval poisons the quotient; the
        # straddle vanishes once h undershoots the distance to the kink,
        # whereas a wrong analytic gradient disagrees at every h
        for h in (FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0):
            fd = _fd_gradient(net, rnet, pairs, bf, eta_theta, h)
            rel_err = min(rel_err, _relative_error(mg.grad_phi, fd))
            if rel_err <= tol:
                break
        mg_grouped = _trainer.meta_gradient(net, stepped, rnet, pairs, *bf, eta_theta, grouped=True)
        grouped_err = float(np.max(np.abs(mg.coefficients - mg_grouped.coefficients)))
        results.append(TrialResult(objective, rel_err, grouped_err, rnet.params.size))
    return GradcheckReport(results, tol, grouped_tol, time.perf_counter() - start)


def format_report(report: GradcheckReport) -> str:
    lines = [
        f"trials: {len(report.trials)}",
        f"max relative error vs central differences: {report.max_rel_err:.3e} (tol {report.tol:.0e})",
        f"max grouped-vs-flat coefficient gap: {report.max_grouped_err:.3e} (tol {report.grouped_tol:.0e})",
        f"elapsed: {report.elapsed:.2f}s",
        "PASS" if report.passed else "FAIL",
    ]
    return "\n".join(lines)
