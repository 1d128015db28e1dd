"""Experiment harness: config parsing, seeded runs, metrics, delimited output.

A run writes three things into its output directory, all byte-reproducible:
results.csv with one accuracy per (seed, after_task, eval_task, eval_mode),
one trace_seed<k>.csv per seed with the per-step training record, and
summary.json with mean and sample std of the final metrics over seeds.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .buffer import ReservoirBuffer
from .errors import ConfigError, RelReplayError, UsageError
from .losses import new_class_set
from .mainnet import MainNet, build_main_net, cross_entropy, predict, task_masked_accuracy
from .rrn import RelationNet, build_relation_net, rrn_apply
from .streams import ScenarioSpec, Task, TaskStream, build_stream
from .tensor import init_adam
from .trainer import TrainState, TrainerConfig, train_task

EVAL_MODES = ("class_il", "task_il")

TRACE_COLUMNS = (
    "step", "epoch", "task", "inner_loss", "outer_loss",
    "mean_w_new", "mean_w_buf", "mean_w_kd", "mean_g_new", "mean_g_buf",
)


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec
    trainer: TrainerConfig
    buffer_size: int = 200
    eval_mode: str = "both"
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/out"

    def __post_init__(self) -> None:
        if self.buffer_size < 0:
            raise ConfigError("buffer_size must be >= 0")
        if self.eval_mode not in (*EVAL_MODES, "both"):
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES + ('both',)}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be unique")

    @property
    def eval_modes(self) -> tuple[str, ...]:
        return EVAL_MODES if self.eval_mode == "both" else (self.eval_mode,)


def _strict_kwargs(obj: dict, cls, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    return dict(obj)


def parse_config(obj: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from plain JSON data; unknown keys are errors."""
    top = _strict_kwargs(obj, ExperimentConfig, "config")
    scenario = ScenarioSpec(**_strict_kwargs(top.pop("scenario", {}), ScenarioSpec, "scenario"))
    trainer_raw = _strict_kwargs(top.pop("trainer", {}), TrainerConfig, "trainer")
    if isinstance(trainer_raw.get("iter_warm"), str):
        token = trainer_raw["iter_warm"].strip().lower()
        if token not in ("inf", "infinity"):
            raise ConfigError(f"iter_warm string must be 'inf', got {trainer_raw['iter_warm']!r}")
        trainer_raw["iter_warm"] = math.inf
    for key in ("preset_weights", "hidden_dims"):
        if isinstance(trainer_raw.get(key), list):
            trainer_raw[key] = tuple(trainer_raw[key])
    trainer = TrainerConfig(**trainer_raw)
    return ExperimentConfig(scenario=scenario, trainer=trainer, **top)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid json: {exc}") from exc
    return parse_config(raw)


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    """RER_OUTPUT_DIR overrides the configured directory when set."""
    return Path(os.environ.get("RER_OUTPUT_DIR") or cfg.output_dir)


class AccuracyMatrix:
    """Lower-triangular record: rows[t][i] = accuracy on task i after task t."""

    def __init__(self) -> None:
        self.rows: list[list[float]] = []

    def add_row(self, accs) -> None:
        accs = [float(a) for a in accs]
        if len(accs) != len(self.rows) + 1:
            raise UsageError(f"row {len(self.rows)} must hold {len(self.rows) + 1} accuracies")
        for a in accs:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"accuracy {a} outside [0, 1]")
        self.rows.append(accs)

    @property
    def num_tasks(self) -> int:
        return len(self.rows)


def compute_acc(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the last one finished training."""
    if not matrix.rows:
        raise UsageError("accuracy matrix is empty")
    return float(np.mean(matrix.rows[-1]))


def compute_bwt(matrix: AccuracyMatrix) -> float | None:
    """Mean change of each earlier task's accuracy between its own end and the
    end of training; None for single-task runs where it is undefined."""
    t = matrix.num_tasks
    if t < 2:
        return None
    return float(np.mean([matrix.rows[-1][i] - matrix.rows[i][i] for i in range(t - 1)]))


@dataclass
class SeedRun:
    seed: int
    matrices: dict[str, AccuracyMatrix]
    trace: list[dict]
    net: MainNet
    rnet: RelationNet | None
    buffer: ReservoirBuffer


def _spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    # fixed fan-out order; every consumer gets its own stream so optional
    # outer-loop work never perturbs the classifier-side draws
    names = ("theta_init", "phi_init", "data", "reservoir", "meta", "split")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _eval_mask(stream: TaskStream, mode: str, after_task: int, eval_task: int):
    if mode == "class_il":
        return stream.seen_classes(after_task)
    return np.asarray(stream.tasks[eval_task].class_ids, dtype=np.int64)


def run_single(
    stream: TaskStream,
    cfg: ExperimentConfig,
    seed: int,
    step_callback=None,
) -> SeedRun:
    """Train one seed across the whole stream and evaluate after every task."""
    rngs = _spawn_rngs(seed)
    tcfg = cfg.trainer
    net = build_main_net(
        stream.feature_dim, tcfg.hidden_dims, stream.total_classes,
        rngs["theta_init"], tcfg.activation, num_classes=0,
    )
    rnet = None
    adam = None
    if tcfg.relational or tcfg.variant == "vanilla":
        rnet = build_relation_net(rngs["phi_init"], tcfg.n_out, tcfg.rrn_hidden)
        adam = init_adam(rnet.params.size)
    state = TrainState(
        net=net,
        buffer=ReservoirBuffer(cfg.buffer_size, rngs["reservoir"]),
        data_rng=rngs["data"],
        meta_rng=rngs["meta"],
        split_rng=rngs["split"],
        rnet=rnet,
        adam=adam,
    )
    matrices = {mode: AccuracyMatrix() for mode in cfg.eval_modes}
    for t in range(len(stream.tasks)):
        train_task(state, stream, t, tcfg, step_callback=step_callback)
        per_mode = {}
        for mode in cfg.eval_modes:
            accs = [
                task_masked_accuracy(
                    state.net, stream.tasks[i].test_x, stream.tasks[i].test_y,
                    _eval_mask(stream, mode, t, i),
                )
                for i in range(t + 1)
            ]
            matrices[mode].add_row(accs)
            per_mode[mode] = accs
        if "class_il" in per_mode and "task_il" in per_mode:
            for ci, ti in zip(per_mode["class_il"], per_mode["task_il"]):
                if ci > ti + 1e-12:
                    raise RelReplayError("internal check failed: class-il exceeded task-il accuracy")
    return SeedRun(seed, matrices, state.trace, state.net, state.rnet, state.buffer)


@dataclass
class ExperimentResult:
    method: str
    runs: list[SeedRun]
    errors: list[dict]
    summary: dict
    output_dir: Path | None = None


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


def summarize(method: str, runs: list[SeedRun], modes) -> dict:
    per_method: dict = {}
    for mode in modes:
        accs = [compute_acc(r.matrices[mode]) for r in runs]
        bwts = [compute_bwt(r.matrices[mode]) for r in runs]
        bwts = [b for b in bwts if b is not None]
        acc_mean, acc_std = _mean_std(accs)
        bwt_mean, bwt_std = _mean_std(bwts)
        per_method[mode] = {
            "acc_mean": acc_mean,
            "acc_std": acc_std,
            "bwt_mean": bwt_mean,
            "bwt_std": bwt_std,
        }
    return {method: per_method}


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_results_csv(path, runs: list[SeedRun]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "after_task", "eval_task", "eval_mode", "accuracy"])
        for run in runs:
            for mode, matrix in run.matrices.items():
                for after, row in enumerate(matrix.rows):
                    for task, acc in enumerate(row):
                        writer.writerow([run.seed, after, task, mode, _fmt(acc)])


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(
                [row["step"], row["epoch"], row["task"]]
                + [_fmt(row[c]) for c in TRACE_COLUMNS[3:]]
            )


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["after_task"] = int(row["after_task"])
        row["eval_task"] = int(row["eval_task"])
        row["accuracy"] = float(row["accuracy"])
    return rows


def run_experiment(
    cfg: ExperimentConfig, write: bool = True, step_callback=None, out_dir=None
) -> ExperimentResult:
    """Run every seed of one method; failed seeds are recorded, not fatal."""
    stream = build_stream(cfg.scenario)
    method = cfg.trainer.method_name
    runs: list[SeedRun] = []
    errors: list[dict] = []
    for seed in cfg.seeds:
        try:
            runs.append(run_single(stream, cfg, seed, step_callback=step_callback))
        except RelReplayError as exc:
            errors.append({"seed": seed, "error": str(exc)})
    summary = {
        "methods": summarize(method, runs, cfg.eval_modes) if runs else {method: {}},
        "seeds": list(cfg.seeds),
        "errors": errors,
    }
    if write:
        out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(out_dir / "results.csv", runs)
        for run in runs:
            write_trace_csv(out_dir / f"trace_seed{run.seed}.csv", run.trace)
        write_json(out_dir / "summary.json", summary)
    return ExperimentResult(method, runs, errors, summary, out_dir)


def _joint_stream(stream: TaskStream) -> TaskStream:
    """All tasks merged into one, for the joint-training upper bound."""
    all_classes = tuple(range(stream.total_classes))
    joint = Task(
        0,
        all_classes,
        np.concatenate([t.train_x for t in stream.tasks]),
        np.concatenate([t.train_y for t in stream.tasks]),
        np.concatenate([t.test_x for t in stream.tasks]),
        np.concatenate([t.test_y for t in stream.tasks]),
    )
    return TaskStream([joint], stream.feature_dim, stream.total_classes)


def _fine_tune_config(cfg: ExperimentConfig, buffer_size: int) -> ExperimentConfig:
    trainer = dataclasses.replace(
        cfg.trainer, variant="baseline-only", baseline="er",
        preset_weights=None, split_buffer=None,
    )
    return dataclasses.replace(cfg, trainer=trainer, buffer_size=buffer_size)


def run_bounds(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Joint-training upper bound and no-buffer fine-tuning lower bound.

    Both reuse the configured optimizer, batch size, and epochs; the upper
    bound trains one merged task and is still scored on each task's test set.
    """
    stream = build_stream(cfg.scenario)
    plain = _fine_tune_config(cfg, buffer_size=0)
    out: dict = {"upper": {}, "lower": {}}
    for mode in cfg.eval_modes:
        out["upper"][mode] = {"per_seed": {}}
        out["lower"][mode] = {"per_seed": {}}
    joint = _joint_stream(stream)
    for seed in cfg.seeds:
        up = run_single(joint, plain, seed)
        for mode in cfg.eval_modes:
            accs = [
                task_masked_accuracy(
                    up.net, stream.tasks[i].test_x, stream.tasks[i].test_y,
                    _eval_mask(stream, mode, len(stream.tasks) - 1, i),
                )
                for i in range(len(stream.tasks))
            ]
            out["upper"][mode]["per_seed"][str(seed)] = float(np.mean(accs))
        low = run_single(stream, plain, seed)
        for mode in cfg.eval_modes:
            out["lower"][mode]["per_seed"][str(seed)] = compute_acc(low.matrices[mode])
    for bound in ("upper", "lower"):
        for mode in cfg.eval_modes:
            vals = list(out[bound][mode]["per_seed"].values())
            mean, std = _mean_std(vals)
            out[bound][mode]["mean"] = mean
            out[bound][mode]["std"] = std
    if write:
        out_dir = resolve_output_dir(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "bounds.json", out)
    return out


def pair_weight_probe(
    net: MainNet,
    rnet: RelationNet,
    objective: str,
    x_new, y_new,
    x_old, y_old,
    curr_set, seen_set,
    rng: np.random.Generator,
):
    """Mean relation-net weights over random new/old sample pairings.

    Pairs every provided new sample with a randomly drawn old one and reports
    the column means of the emitted weights: [new, buffer(, distill)].
    """
    y_new = np.asarray(y_new, dtype=np.int64)
    y_old = np.asarray(y_old, dtype=np.int64)
    pick = rng.choice(len(y_old), size=len(y_new), replace=len(y_old) < len(y_new))
    pred_new = predict(net, x_new)
    pred_old = predict(net, np.asarray(x_old)[pick])
    curr_set = np.asarray(curr_set, dtype=np.int64)
    seen_set = np.asarray(seen_set, dtype=np.int64)
    l_new = cross_entropy(pred_new, y_new, new_class_set(objective, curr_set, seen_set))
    l_old = cross_entropy(pred_old, y_old[pick], seen_set)
    weights = rrn_apply(
        rnet,
        np.stack([l_new, l_old], axis=1),
        np.stack([pred_new.logit_norms, pred_old.logit_norms], axis=1),
    )
    return weights.mean(axis=0)


def set_by_path(obj: dict, dotted: str, value) -> None:
    """Assign into nested dicts along a dotted key path, creating levels."""
    keys = dotted.split(".")
    node = obj
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {key!r} along {dotted!r}")
    node[keys[-1]] = value


def run_sweep(raw_cfg: dict, grid: dict[str, list], base_dir: Path | None = None) -> dict:
    """Cartesian product over grid values; one run directory per point."""
    if not grid:
        raise ConfigError("sweep needs at least one --grid axis")
    import copy
    import itertools

    keys = sorted(grid)
    base = parse_config(copy.deepcopy(raw_cfg))
    root = Path(base_dir) if base_dir is not None else resolve_output_dir(base)
    root.mkdir(parents=True, exist_ok=True)
    points = {}
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        raw = copy.deepcopy(raw_cfg)
        label_parts = []
        for key, value in zip(keys, combo):
            set_by_path(raw, key, value)
            label_parts.append(f"{key.split('.')[-1]}={value}")
        name = f"point_{i:03d}_" + "_".join(label_parts).replace("/", "-")
        raw["output_dir"] = str(root / name)
        cfg = parse_config(raw)
        result = run_experiment(cfg, out_dir=root / name)
        points[name] = {
            "grid": dict(zip(keys, combo)),
            "summary": result.summary["methods"],
        }
    write_json(root / "sweep_summary.json", {"points": points})
    return points
