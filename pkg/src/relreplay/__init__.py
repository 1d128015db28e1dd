"""Continual-learning sandbox: replay baselines plus meta-learned pair weighting."""

from .buffer import BufferEntry, ReservoirBuffer, load_entries
from .errors import (
    ConfigError,
    EmptyBufferError,
    FormatError,
    NumericError,
    RelReplayError,
    TrainingDiverged,
    UsageError,
)
from .harness import (
    AccuracyMatrix,
    ExperimentConfig,
    compute_acc,
    compute_bwt,
    load_config,
    parse_config,
    run_bounds,
    run_experiment,
    run_single,
)
from .losses import (
    LossBreakdown,
    OuterLoss,
    PairBatch,
    build_pair_batch,
    derpp_loss,
    er_loss,
    erace_loss,
    outer_loss,
    weighted_inner_loss,
)
from .mainnet import MainNet, Prediction, build_main_net, cross_entropy, predict, task_masked_accuracy
from .rrn import PairFeatures, RelationNet, build_relation_net, rrn_batch_weights, rrn_forward
from .streams import ScenarioSpec, Task, TaskStream, build_stream
from .tensor import AdamState, LayerSpec, ParamVector, adam_step, sgd_step
from .trainer import (
    MetaGradient,
    TrainerConfig,
    TrainState,
    inner_step,
    meta_gradient,
    outer_step,
    train_task,
    vanilla_step,
)

__version__ = "0.1.0"
