"""Task streams: Gaussian cluster tasks, IDX image files, and a similarity probe.

A stream is an ordered list of tasks with disjoint class sets. Class ids are
always relabelled to 0..C-1 in task order, so "the first C_t output slots"
and "classes seen so far" mean the same thing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Array

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass(frozen=True)
class Task:
    task_id: int
    class_ids: tuple[int, ...]
    train_x: Array
    train_y: Array
    test_x: Array
    test_y: Array


@dataclass
class TaskStream:
    tasks: list[Task]
    feature_dim: int
    total_classes: int

    def __post_init__(self) -> None:
        ids: list[int] = []
        for task in self.tasks:
            ids.extend(task.class_ids)
            for y, cs in ((task.train_y, task.class_ids), (task.test_y, task.class_ids)):
                if y.size and not np.all(np.isin(y, np.asarray(cs))):
                    raise ConfigError(f"task {task.task_id} holds labels outside its class set")
        if sorted(ids) != list(range(self.total_classes)):
            raise ConfigError("task class sets must partition 0..C-1 in task order")

    def seen_classes(self, upto: int) -> Array:
        ids: list[int] = []
        for task in self.tasks[: upto + 1]:
            ids.extend(task.class_ids)
        return np.asarray(sorted(ids), dtype=np.int64)


@dataclass
class ScenarioSpec:
    """Declarative description of a stream; `kind` selects the builder.

    gaussian: num_tasks, classes_per_task, samples_per_class, feature_dim,
        class_sep, cluster_std, shuffle_classes, seed.
    idx: num_tasks, classes_per_task, train_images, train_labels,
        test_images, test_labels.
    similarity: overlap, samples_per_class, feature_dim, class_sep,
        far_distance, near_offset, seed.
    """

    kind: str = "gaussian"
    num_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 100
    feature_dim: int = 16
    class_sep: float = 3.0
    cluster_std: float = 1.0
    shuffle_classes: bool = False
    seed: int = 0
    overlap: float = 0.0
    far_distance: float = 12.0
    near_offset: float = 0.5
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "idx", "similarity"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("num_tasks and classes_per_task must be >= 1")
        if self.samples_per_class < 5:
            raise ConfigError("samples_per_class must be >= 5 for an 80/20 split")
        if self.cluster_std <= 0:
            raise ConfigError("cluster_std must be > 0")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError("overlap must lie in [0, 1]")
        if self.kind == "idx":
            missing = [
                name
                for name in ("train_images", "train_labels", "test_images", "test_labels")
                if getattr(self, name) is None
            ]
            if missing:
                raise ConfigError(f"idx scenario needs file paths: {missing}")


def build_stream(spec: ScenarioSpec) -> TaskStream:
    if spec.kind == "gaussian":
        return make_gaussian_stream(spec)
    if spec.kind == "idx":
        return load_idx_stream(spec)
    return make_similarity_probe(spec)


def _split_class(x: Array) -> tuple[Array, Array]:
    n_train = int(round(0.8 * x.shape[0]))
    return x[:n_train], x[n_train:]


def _assemble_tasks(
    per_class_train: list[Array],
    per_class_test: list[Array],
    num_tasks: int,
    classes_per_task: int,
    feature_dim: int,
) -> TaskStream:
    tasks = []
    for t in range(num_tasks):
        cls = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        trx = np.concatenate([per_class_train[c] for c in cls])
        trl = np.concatenate([np.full(per_class_train[c].shape[0], c, dtype=np.int64) for c in cls])
        tex = np.concatenate([per_class_test[c] for c in cls])
        tel = np.concatenate([np.full(per_class_test[c].shape[0], c, dtype=np.int64) for c in cls])
        tasks.append(Task(t, tuple(cls), trx, trl, tex, tel))
    return TaskStream(tasks, feature_dim, num_tasks * classes_per_task)


def make_gaussian_stream(spec: ScenarioSpec) -> TaskStream:
    """Isotropic Gaussian clusters on mutually orthogonal directions.

    With feature_dim >= total classes the class means sit on an orthonormal
    frame scaled by class_sep, so pairwise mean distance is class_sep * sqrt(2)
    in units of cluster_std.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.num_tasks * spec.classes_per_task
    if spec.feature_dim >= total:
        q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, total)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((total, spec.feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = spec.class_sep * spec.cluster_std * dirs
    class_order = rng.permutation(total) if spec.shuffle_classes else np.arange(total)
    per_train, per_test = [], []
    for c in range(total):
        mean = means[class_order[c]]
        x = mean + spec.cluster_std * rng.standard_normal((spec.samples_per_class, spec.feature_dim))
        tr, te = _split_class(x)
        per_train.append(tr)
        per_test.append(te)
    return _assemble_tasks(per_train, per_test, spec.num_tasks, spec.classes_per_task, spec.feature_dim)


def make_similarity_probe(spec: ScenarioSpec) -> TaskStream:
    """Two tasks of two classes whose relatedness is dialled by `overlap`.

    Task-one means sit at +-class_sep on the first axis. Task-two means
    interpolate between anchors far away on the second axis (overlap 0) and
    points within near_offset of the task-one means (overlap 1).
    """
    if spec.feature_dim < 2:
        raise ConfigError("similarity probe needs feature_dim >= 2")
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim
    e1 = np.zeros(dim)
    e1[0] = 1.0
    e2 = np.zeros(dim)
    e2[1] = 1.0
    base = [-spec.class_sep * e1, spec.class_sep * e1]
    far = [m + spec.far_distance * e2 for m in base]
    near = [m + spec.near_offset * e2 for m in base]
    means = base + [spec.overlap * n + (1.0 - spec.overlap) * f for n, f in zip(near, far)]
    per_train, per_test = [], []
    for mean in means:
        x = mean + spec.cluster_std * rng.standard_normal((spec.samples_per_class, dim))
        tr, te = _split_class(x)
        per_train.append(tr)
        per_test.append(te)
    return _assemble_tasks(per_train, per_test, 2, 2, dim)


def _read_idx(path: str, expect_magic: int) -> Array:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an idx header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    body = np.frombuffer(blob, dtype=np.uint8, offset=header)
    if body.size != count:
        raise FormatError(f"{path}: payload holds {body.size} bytes, header promises {count}")
    return body.reshape(dims)


def load_idx_stream(spec: ScenarioSpec) -> TaskStream:
    """Split an IDX image/label corpus into sequential label-range tasks.

    Pixel values are scaled to [0, 1] and images flattened. Labels must cover
    0..C-1 for C = num_tasks * classes_per_task.
    """
    trx = _read_idx(spec.train_images, IDX_MAGIC_IMAGES)
    trl = _read_idx(spec.train_labels, IDX_MAGIC_LABELS)
    tex = _read_idx(spec.test_images, IDX_MAGIC_IMAGES)
    tel = _read_idx(spec.test_labels, IDX_MAGIC_LABELS)
    if trx.shape[0] != trl.shape[0] or tex.shape[0] != tel.shape[0]:
        raise FormatError("image and label counts disagree")
    total = spec.num_tasks * spec.classes_per_task
    # idx labels arrive as uint8; widen before any signed comparison
    labels_present = np.unique(np.concatenate([trl, tel]).astype(np.int64))
    if labels_present.max(initial=-1) + 1 < total:
        raise ConfigError(f"corpus holds labels {labels_present.tolist()}, need 0..{total - 1}")
    dim = int(np.prod(trx.shape[1:]))
    trx = trx.reshape(trx.shape[0], dim).astype(np.float64) / 255.0
    tex = tex.reshape(tex.shape[0], dim).astype(np.float64) / 255.0
    trl = trl.astype(np.int64)
    tel = tel.astype(np.int64)
    per_train = [trx[trl == c] for c in range(total)]
    per_test = [tex[tel == c] for c in range(total)]
    for c in range(total):
        if per_train[c].shape[0] == 0 or per_test[c].shape[0] == 0:
            raise ConfigError(f"class {c} has no samples in train or test")
    return _assemble_tasks(per_train, per_test, spec.num_tasks, spec.classes_per_task, dim)


def write_idx_images(path: str, images: Array) -> None:
    """Inverse of the reader, for building small corpora in tests and demos."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ConfigError("images must have shape [n, rows, cols]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path: str, labels: Array) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ConfigError("labels must be a vector")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())
