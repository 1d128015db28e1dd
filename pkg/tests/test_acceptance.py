"""End-to-end acceptance checks.

One test per criterion; each records a single PASS/FAIL line that pytest
prints in the terminal summary. Shared fixtures keep the expensive training
runs to one execution per module.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy import stats
from conftest import record_criterion

from relreplay.buffer import BufferEntry, ReservoirBuffer
from relreplay.gradcheck import _random_instance, run_gradcheck
from relreplay.harness import (
    compute_acc,
    compute_bwt,
    pair_weight_probe,
    parse_config,
    run_bounds,
    run_experiment,
    run_single,
)
from relreplay.streams import build_stream
from relreplay.trainer import TrainerConfig

DESK_SCENARIO = {"kind": "gaussian", "num_tasks": 5, "classes_per_task": 2,
                 "samples_per_class": 120, "feature_dim": 32, "class_sep": 3.0,
                 "seed": 7}
SIM_SCENARIO = {"kind": "similarity", "num_tasks": 2, "classes_per_task": 2,
                "samples_per_class": 120, "feature_dim": 16, "class_sep": 3.0,
                "seed": 11}
TINY_SCENARIO = {"kind": "gaussian", "num_tasks": 2, "classes_per_task": 2,
                 "samples_per_class": 20, "feature_dim": 4, "class_sep": 3.0,
                 "seed": 3}


def make_config(variant, scenario, seeds, output_dir="unused", buffer_size=200,
                **trainer):
    t = {"batch_size": 32, "epochs_per_task": 20}
    t.update(trainer)
    if variant == "er":
        t.update(variant="baseline-only", baseline="er")
    else:
        t["variant"] = variant
    raw = {"scenario": dict(scenario), "trainer": t, "buffer_size": buffer_size,
           "eval_mode": "class_il", "seeds": list(seeds), "output_dir": output_dir}
    return parse_config(raw)


def class_il_metrics(result):
    accs = [compute_acc(r.matrices["class_il"]) for r in result.runs]
    bwts = [compute_bwt(r.matrices["class_il"]) for r in result.runs]
    return accs, bwts


@pytest.fixture(scope="module")
def gradcheck_report():
    return run_gradcheck(trials=50, seed=20240, tol=1e-5)


@pytest.fixture(scope="module")
def desk():
    """Five-task desk-scale stream: all four methods plus both bounds."""
    seeds = (0, 1, 2, 3, 4)
    out = {}
    for variant in ("er", "rer", "rder", "vanilla"):
        cfg = make_config(variant, DESK_SCENARIO, seeds)
        start = time.perf_counter()
        result = run_experiment(cfg, write=False)
        elapsed = time.perf_counter() - start
        assert not result.errors, result.errors
        accs, bwts = class_il_metrics(result)
        out[variant] = {"acc": accs, "bwt": bwts, "elapsed": elapsed}
    out["bounds"] = run_bounds(make_config("er", DESK_SCENARIO, seeds), write=False)
    out["seeds"] = seeds
    return out


@pytest.fixture(scope="module")
def similarity():
    """ER and RER on a two-task stream at low and high class overlap."""
    seeds = tuple(range(10))
    out = {}
    for overlap in (0.1, 0.9):
        scenario = dict(SIM_SCENARIO, overlap=overlap)
        er_cfg = make_config("er", scenario, seeds)
        er = run_experiment(er_cfg, write=False)
        rer = run_experiment(make_config("rer", scenario, seeds), write=False)
        assert not er.errors and not rer.errors
        stream = build_stream(er_cfg.scenario)
        t1, t2 = stream.tasks
        w_bufs = []
        for run in rer.runs:
            w = pair_weight_probe(run.net, run.rnet, "er",
                                  t2.train_x, t2.train_y, t1.train_x, t1.train_y,
                                  t2.class_ids, (0, 1, 2, 3),
                                  rng=np.random.default_rng(123))
            w_bufs.append(float(w[1]))
        out[overlap] = {
            "er_acc": class_il_metrics(er)[0],
            "rer_acc": class_il_metrics(rer)[0],
            "w_buf": w_bufs,
        }
    return out


def test_criterion_01_meta_gradient_matches_finite_differences(gradcheck_report):
    report = gradcheck_report
    sizes = []
    for k in range(len(report.trials)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=20240, spawn_key=(k,)))
        objective = ("er", "derpp", "er-ace")[k % 3]
        net, _, _, _ = _random_instance(rng, objective)
        sizes.append(net.params.size)
    ok = (len(report.trials) >= 50 and report.max_rel_err <= 1e-5
          and report.elapsed <= 60.0 and max(sizes) <= 500)
    line = record_criterion(
        1, "meta-gradient vs central differences",
        ok, f"max rel err {report.max_rel_err:.2e} over {len(report.trials)} trials, "
            f"nets <= {max(sizes)} params, {report.elapsed:.1f}s")
    assert ok, line


def test_criterion_02_grouped_coefficients_equal_flat(gradcheck_report):
    report = gradcheck_report
    ok = report.max_grouped_err <= 1e-12
    line = record_criterion(
        2, "class-grouped coefficients equal flat",
        ok, f"max abs gap {report.max_grouped_err:.2e} over {len(report.trials)} trials")
    assert ok, line


def test_criterion_03_warm_forever_rer_is_bitwise_er():
    er_cfg = make_config("er", TINY_SCENARIO, [0], batch_size=8,
                         epochs_per_task=3, hidden_dims=[8])
    rer_cfg = make_config("rer", TINY_SCENARIO, [0], batch_size=8,
                          epochs_per_task=3, hidden_dims=[8],
                          iter_warm="inf", interval=1, preset_weights=[1.0, 0.5])
    assert math.isinf(rer_cfg.trainer.iter_warm)
    stream = build_stream(er_cfg.scenario)
    trajectories = {}
    for name, cfg in (("er", er_cfg), ("rer", rer_cfg)):
        snaps = []
        run_single(stream, cfg, seed=0,
                   step_callback=lambda ti, si, gs, theta: snaps.append(theta))
        trajectories[name] = snaps
    n = len(trajectories["er"])
    identical = sum(np.array_equal(a, b)
                    for a, b in zip(trajectories["er"], trajectories["rer"]))
    ok = n >= 10 and len(trajectories["rer"]) == n and identical == n
    line = record_criterion(
        3, "infinite warm-up matches the plain baseline",
        ok, f"{identical}/{n} steps bit-identical (need all of >= 10)")
    assert ok, line


def test_criterion_04_reservoir_inclusion_uniformity():
    capacity, stream_len, trials = 200, 1000, 20000
    x = np.zeros(1)
    logits = np.zeros(1)
    counts = np.zeros(stream_len, dtype=np.int64)
    for child in np.random.SeedSequence(20240).spawn(trials):
        buf = ReservoirBuffer(capacity, child)
        for i in range(stream_len):
            buf.insert(BufferEntry(x, i, logits, 0))
        for entry in buf.entries:
            counts[entry.y] += 1
    freq = counts / trials
    max_dev = float(np.max(np.abs(freq - capacity / stream_len)))
    pvalue = float(stats.chisquare(counts).pvalue)
    ok = max_dev <= 0.01 and pvalue > 0.01
    line = record_criterion(
        4, "reservoir inclusion is uniform",
        ok, f"max |freq - 0.200| = {max_dev:.4f} (tol 0.01), chi-square p = {pvalue:.3f}")
    assert ok, line


def test_criterion_05_relational_beats_plain_replay(desk):
    er, rer = desk["er"], desk["rer"]
    acc_er, acc_rer = np.mean(er["acc"]), np.mean(rer["acc"])
    bwt_er, bwt_rer = np.mean(er["bwt"]), np.mean(rer["bwt"])
    elapsed = er["elapsed"] + rer["elapsed"]
    ok = acc_rer > acc_er and bwt_rer > bwt_er and elapsed <= 900.0
    line = record_criterion(
        5, "meta-learned weights beat plain replay",
        ok, f"acc {acc_er:.4f} -> {acc_rer:.4f}, bwt {bwt_er:+.4f} -> {bwt_rer:+.4f}, "
            f"{elapsed:.0f}s")
    assert ok, line


def test_criterion_06_joint_variant_does_not_beat_alternating(desk):
    acc_vanilla = np.mean(desk["vanilla"]["acc"])
    acc_rder = np.mean(desk["rder"]["acc"])
    ok = acc_vanilla <= acc_rder
    line = record_criterion(
        6, "single-level variant stays below the bi-level one",
        ok, f"vanilla {acc_vanilla:.4f} <= rder {acc_rder:.4f}")
    assert ok, line


def test_criterion_07_every_method_sits_between_the_bounds(desk):
    upper = desk["bounds"]["upper"]["class_il"]["per_seed"]
    lower = desk["bounds"]["lower"]["class_il"]["per_seed"]
    margins = []
    ok = True
    for variant in ("er", "rer", "rder", "vanilla"):
        for seed, acc in zip(desk["seeds"], desk[variant]["acc"]):
            up, lo = upper[str(seed)], lower[str(seed)]
            ok = ok and lo < acc < up
            margins.append(min(up - acc, acc - lo))
    line = record_criterion(
        7, "upper bound > every method > lower bound per seed",
        ok, f"smallest margin {min(margins):.4f} over "
            f"{len(margins)} method-seed pairs")
    assert ok, line


def test_criterion_08_overlap_probe_direction(similarity):
    low, high = similarity[0.1], similarity[0.9]
    gap_er = np.mean(low["er_acc"]) - np.mean(high["er_acc"])
    gap_rer = np.mean(low["rer_acc"]) - np.mean(high["rer_acc"])
    w_low, w_high = np.mean(low["w_buf"]), np.mean(high["w_buf"])
    ok = gap_rer < gap_er and w_high > w_low
    line = record_criterion(
        8, "task-similarity response",
        ok, f"acc gap er {gap_er:.4f} vs rer {gap_rer:.4f}; "
            f"buffer weight {w_low:.3f} -> {w_high:.3f} as overlap rises")
    assert ok, line


def test_criterion_09_reruns_are_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("RER_OUTPUT_DIR", raising=False)
    files = ("results.csv", "trace_seed0.csv", "summary.json", "bounds.json")
    for leg in ("a", "b"):
        cfg = make_config("rer", TINY_SCENARIO, [0], batch_size=8,
                          epochs_per_task=3, hidden_dims=[8], iter_warm=2,
                          interval=1, output_dir=str(tmp_path / leg))
        run_experiment(cfg)
        run_bounds(cfg)
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in files]
    ok = all(same)
    line = record_criterion(
        9, "same-seed reruns are byte-identical",
        ok, f"{sum(same)}/{len(files)} files identical ({', '.join(files)})")
    assert ok, line


def test_criterion_10_schedule_resolution_and_update_counts():
    cfg50 = TrainerConfig(variant="rer", epochs_per_task=50)
    resolved_interval = cfg50.resolve_interval()
    halves = [(200, 100), (100, 50), (7, 3)]
    half_ok = all(cfg50.resolve_iter_warm(s) == expect for s, expect in halves)

    scenario = dict(TINY_SCENARIO, samples_per_class=10)
    cfg = make_config("rer", scenario, [0], batch_size=8, epochs_per_task=50,
                      hidden_dims=[8])
    stream = build_stream(cfg.scenario)
    run = run_single(stream, cfg, seed=0)
    per_task_replay = {}
    observed = 0
    preset_rows = 0
    preset_expected = 0
    for row in run.trace:
        if row["mean_w_buf"] is None:
            continue
        per_task_replay[row["task"]] = per_task_replay.get(row["task"], 0) + 1
        if row["outer_loss"] is not None:
            observed += 1
        # steps/task = 100 here, so the resolved warm-up covers the first 50
        task_step = per_task_replay[row["task"]] + (1 if row["task"] == 0 else 0)
        if task_step <= 50:
            preset_expected += 1
            if row["mean_w_new"] == 1.0 and row["mean_w_buf"] == 0.5:
                preset_rows += 1
    expected = sum(r // resolved_interval for r in per_task_replay.values())
    ok = (resolved_interval == 5 and half_ok and observed == expected
          and expected == 39 and preset_rows == preset_expected)
    line = record_criterion(
        10, "schedule defaults and update counts",
        ok, f"interval {resolved_interval}, warm-up = half the task steps, "
            f"{observed} outer updates (expected {expected})")
    assert ok, line
