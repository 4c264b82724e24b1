"""Training control: warmup, ReduceLROnPlateauV2 with forced decay and early
stopping, the cosine baseline, and the single / mutual-learning training loop.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import augment as aug
from .dataio import LabeledDataset, batches
from .evaluation import EvalResult, evaluate
from .losses import (AmSoftmaxParams, am_softmax_from_cosines, cross_entropy, dml_fast_loss,
                     dml_slow_loss, slow_distribution, with_targets)
from .modelcore import ClassifierModel, SeededRng, build_model, softmax
from .optim import DivergenceError, Optimizer

SCHEDULE_KINDS = ("plateau_v2", "cosine", "constant")
LOSS_KINDS = ("ce", "am_softmax", "dml_pair")
ACTIONS = ("none", "decay", "stop")


@dataclass
class TrainLoopConfig:
    """Loop, schedule and optimization knobs.

    ``min_lr`` defaults to ``initial_lr * 1e-3``.  Warmup applies to the
    plateau_v2 schedule only; the cosine baseline anneals from epoch 0.
    """

    max_epochs: int = 200
    warmup_epochs: int = 5
    patience: int = 5
    decay_factor: float = 0.1
    min_lr: Optional[float] = None
    forced_decay_fraction: float = 0.75
    improvement_threshold: float = 1e-4
    initial_lr: float = 0.013
    batch_size: int = 64
    schedule_kind: str = "plateau_v2"
    loss_kind: str = "ce"
    dml_slow_loss: str = "am_softmax"
    dml_slow_scale: float = 1.0
    dml_slow_margin: float = 0.0
    am_margin: float = 0.35
    optimizer: str = "sgd"
    sam_rho: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nbd: bool = True
    augment: str = "none"
    policy: aug.AugPolicy = field(default_factory=aug.AugPolicy)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = aug.AugPolicy(**self.policy)
        if self.min_lr is None:
            self.min_lr = self.initial_lr * 1e-3
        if not 0 < self.min_lr < self.initial_lr:
            raise ValueError("need 0 < min_lr < initial_lr")
        if not 0 < self.forced_decay_fraction < 1:
            raise ValueError("forced_decay_fraction must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs < max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule_kind must be one of {SCHEDULE_KINDS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.dml_slow_loss not in ("am_softmax", "ce"):
            raise ValueError("dml_slow_loss must be 'am_softmax' or 'ce'")
        if self.augment not in aug.AUGMENT_KINDS:
            raise ValueError(f"augment must be one of {aug.AUGMENT_KINDS}")
        if self.optimizer not in ("sgd", "sam"):
            raise ValueError("optimizer must be 'sgd' or 'sam'")

    @property
    def dml_enabled(self) -> bool:
        return self.loss_kind == "dml_pair"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["policy"] = self.policy.to_dict()
        return d

    def replace(self, **changes) -> "TrainLoopConfig":
        d = self.to_dict()
        d.update(changes)
        if "initial_lr" in changes and "min_lr" not in changes:
            d["min_lr"] = None
        return TrainLoopConfig(**d)


# ---------------------------------------------------------------- schedules


def warmup_lr(epoch_index: int, config: TrainLoopConfig) -> float:
    """Linear ramp initial_lr * (e + 1) / warmup_epochs; initial_lr afterwards."""
    if epoch_index < 0:
        raise ValueError("epoch_index must be >= 0")
    if epoch_index < config.warmup_epochs:
        return config.initial_lr * (epoch_index + 1) / config.warmup_epochs
    return config.initial_lr


def cosine_lr(epoch_index: int, config: TrainLoopConfig) -> float:
    return 0.5 * config.initial_lr * (1.0 + math.cos(math.pi * epoch_index / config.max_epochs))


@dataclass
class SchedulerState:
    current_lr: float
    best_avg_train_loss: float = math.inf
    epochs_since_train_improve: int = 0
    best_val_top1: float = -math.inf
    epochs_since_val_improve: int = 0
    decays_done: int = 0
    forced_decay_fired: bool = False
    diverged: bool = False


def forced_decay_epoch(config: TrainLoopConfig) -> int:
    return math.ceil(config.forced_decay_fraction * config.max_epochs)


def _decay(state: SchedulerState, config: TrainLoopConfig) -> None:
    new_lr = state.current_lr * config.decay_factor
    # snap so repeated decays land exactly on the floor
    if new_lr <= config.min_lr * (1.0 + 1e-9):
        new_lr = config.min_lr
    state.current_lr = new_lr
    state.decays_done += 1


def plateau_v2_update(state: SchedulerState, epoch_index: int, avg_train_loss: float,
                      val_top1: float, config: TrainLoopConfig) -> str:
    """Advance the ReduceLROnPlateauV2 state machine by one epoch; mutates ``state``.

    Returns "stop" (lr at floor and val top-1 stale for ``patience`` epochs, or
    divergence), "decay" (train loss stale for ``patience`` epochs, or the
    one-time forced decay once ``forced_decay_fraction`` of the budget has
    passed without any decay), else "none".
    """
    if not (math.isfinite(avg_train_loss) and math.isfinite(val_top1)):
        state.diverged = True
        return "stop"

    if val_top1 > state.best_val_top1:
        state.best_val_top1 = val_top1
        state.epochs_since_val_improve = 0
    else:
        state.epochs_since_val_improve += 1
    at_floor = state.current_lr <= config.min_lr
    if at_floor and state.epochs_since_val_improve >= config.patience:
        return "stop"

    if avg_train_loss < state.best_avg_train_loss * (1.0 - config.improvement_threshold) \
            or state.best_avg_train_loss == math.inf:
        state.best_avg_train_loss = avg_train_loss
        state.epochs_since_train_improve = 0
    else:
        state.epochs_since_train_improve += 1

    if at_floor:
        return "none"
    if state.epochs_since_train_improve >= config.patience:
        _decay(state, config)
        state.epochs_since_train_improve = 0
        return "decay"
    if epoch_index >= forced_decay_epoch(config) and state.decays_done == 0:
        _decay(state, config)
        state.forced_decay_fired = True
        return "decay"
    return "none"


# ---------------------------------------------------------------- reports


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float
    val_map: float
    action: str = "none"


@dataclass
class TrainReport:
    records: List[EpochRecord]
    epochs_run: int
    stop_reason: str
    final: Optional[EvalResult]
    config: dict
    seed: int
    role: str = "single"
    diverged: bool = False
    chosen_lr: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "stop_reason": self.stop_reason,
            "diverged": self.diverged,
            "chosen_lr": self.chosen_lr,
            "records": [asdict(r) for r in self.records],
            "final": self.final.to_dict() if self.final else None,
            "config": self.config,
        }


# ---------------------------------------------------------------- learner


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: int = 32
    channels: int = 4


class Learner:
    """Model(s) + optimizer(s) + batch stream for one training run.

    Holds either a single student or a fast/slow mutual-learning pair.  The
    batch stream is named so LR probes can replay an identical sequence.
    """

    def __init__(self, train_ds: LabeledDataset, val_ds: LabeledDataset, config: TrainLoopConfig,
                 seed: int, model_spec: Optional[ModelSpec] = None, same_init: bool = False):
        self.train_ds, self.val_ds = train_ds, val_ds
        self.config = config
        self.seed = int(seed)
        self.model_spec = model_spec or ModelSpec()
        self.rng = SeededRng(self.seed)
        c = train_ds.class_count
        shape = train_ds.sample_shape

        def make(head, role):
            init_rng = self.rng.child("init", "fast" if same_init else role)
            return build_model(self.model_spec.kind, shape, c, head=head, rng=init_rng,
                               hidden=self.model_spec.hidden, channels=self.model_spec.channels)

        self.am_params: Optional[AmSoftmaxParams] = None
        if config.loss_kind == "dml_pair":
            self.slow_params = AmSoftmaxParams(config.dml_slow_scale, config.dml_slow_margin)
            slow_head = "cosine" if config.dml_slow_loss == "am_softmax" else "linear"
            self.models = [make("linear", "fast"), make(slow_head, "slow")]
        elif config.loss_kind == "am_softmax":
            self.am_params = AmSoftmaxParams.for_classes(c, margin=config.am_margin)
            self.models = [make("cosine", "single")]
        else:
            self.models = [make("linear", "single")]
        self.optimizers = [Optimizer(m.params, config.optimizer, config.sam_rho, config.weight_decay,
                                     config.momentum, config.nbd) for m in self.models]
        lo, hi = float(train_ds.features.min()), float(train_ds.features.max())
        self.value_range = (lo, hi)
        self._stream_name = "train"
        self._stream_epoch = 0
        self._pending: List[np.ndarray] = []
        self.last_losses: List[float] = []
        self.epoch_losses: List[float] = []

    # -- batch stream

    def begin_stream(self, name: str) -> None:
        self._stream_name, self._stream_epoch, self._pending = name, 0, []

    def _next_batch(self) -> np.ndarray:
        if not self._pending:
            seed = self.rng.child("stream", self._stream_name).integers(2**63)
            self._pending = batches(len(self.train_ds), self.config.batch_size, int(seed), self._stream_epoch)
            self._stream_epoch += 1
        return self._pending.pop(0)

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.train_ds) / self.config.batch_size)

    # -- state

    def snapshot(self):
        return ([m.params.state() for m in self.models],
                [[{k: v.copy() for k, v in g.velocity.items()} for g in o.groups] for o in self.optimizers],
                (self._stream_name, self._stream_epoch, list(self._pending)))

    def restore(self, snap) -> None:
        params, velocities, stream = snap
        for m, s in zip(self.models, params):
            m.params.load_state(s)
        for o, vs in zip(self.optimizers, velocities):
            for g, v in zip(o.groups, vs):
                g.velocity = {k: a.copy() for k, a in v.items()}
        self._stream_name, self._stream_epoch, self._pending = stream[0], stream[1], list(stream[2])

    def reset_optimizers(self) -> None:
        for o in self.optimizers:
            o.reset()

    # -- losses

    def _single_loss(self, logits, y):
        if self.config.loss_kind == "am_softmax":
            return with_targets(lambda z, t: am_softmax_from_cosines(z, t, self.am_params), logits, y)
        return with_targets(cross_entropy, logits, y)

    def _closure(self, model: ClassifierModel, x, loss_fn):
        def closure():
            logits, _, cache = model.forward(x)
            out = loss_fn(logits)
            return out.value, model.backward(cache, out.dlogits)
        return closure

    def train_step(self, lr: float, idx: Optional[np.ndarray] = None) -> float:
        """One optimizer step on the next batch; returns the (fast) student's loss."""
        if idx is None:
            idx = self._next_batch()
        x = self.train_ds.features[idx]
        y = self.train_ds.labels[idx]
        if self.config.augment != "none":
            step_rng = self.rng.child("augment", self._stream_name, self._stream_epoch, int(idx[0]), len(self._pending))
            x, ya, yb, w = aug.augment_batch(self.config.augment, x, y, self.config.policy, step_rng,
                                             self.value_range)
            y = (ya, yb, w) if w < 1.0 else ya
        if len(self.models) == 1:
            model = self.models[0]
            loss = self.optimizers[0].step(self._closure(model, x, lambda z: self._single_loss(z, y)), lr)
            self.last_losses = [loss]
            return loss
        fast, slow = self.models
        # both students step from the same pre-step snapshot of the other's distribution
        p_fast = softmax(fast.forward(x)[0])
        p_slow = slow_distribution(slow.forward(x)[0], self.slow_params, self.config.dml_slow_loss)
        kind, sp = self.config.dml_slow_loss, self.slow_params
        loss = self.optimizers[0].step(self._closure(fast, x, lambda z: dml_fast_loss(z, p_slow, y)), lr)
        slow_loss = self.optimizers[1].step(self._closure(slow, x, lambda z: dml_slow_loss(z, p_fast, y, sp, kind)), lr)
        self.last_losses = [loss, slow_loss]
        return loss

    def train_epoch(self, lr: float) -> float:
        """Full pass over the training split; returns the sample-weighted mean loss."""
        totals, count = np.zeros(len(self.models)), 0
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(self.batches_per_epoch()):
                idx = self._next_batch()
                self.train_step(lr, idx)
                totals += np.asarray(self.last_losses) * idx.shape[0]
                count += idx.shape[0]
        self.epoch_losses = [float(t / count) for t in totals]
        return self.epoch_losses[0]

    # -- evaluation

    def probabilities(self, model_index: int = 0, x=None) -> np.ndarray:
        model = self.models[model_index]
        x = self.val_ds.features if x is None else x
        logits = model.forward(x)[0]
        if model.head == "cosine":
            scale = self.am_params.scale if self.am_params is not None else self.slow_params.scale
            logits = scale * logits
        return softmax(logits)

    def evaluate(self, model_index: int = 0, dataset: Optional[LabeledDataset] = None) -> EvalResult:
        ds = dataset or self.val_ds
        return evaluate(self.probabilities(model_index, ds.features), ds.labels)


# ---------------------------------------------------------------- loop


def run_training(learner: Learner, seed: Optional[int] = None) -> Union[TrainReport, Tuple[TrainReport, TrainReport]]:
    """Train until early stop or ``max_epochs``.  A mutual-learning pair yields
    (fast_report, slow_report); the scheduler follows the fast student."""
    config = learner.config
    seed = learner.seed if seed is None else seed
    learner.begin_stream("train")
    state = SchedulerState(current_lr=config.initial_lr)
    n = len(learner.models)
    records: List[List[EpochRecord]] = [[] for _ in range(n)]
    stop_reason, diverged = "max_epochs", False
    last_evals: List[Optional[EvalResult]] = [None] * n

    for epoch in range(config.max_epochs):
        if config.schedule_kind == "cosine":
            lr = cosine_lr(epoch, config)
        elif config.schedule_kind == "constant":
            lr = config.initial_lr
        elif epoch < config.warmup_epochs:
            lr = warmup_lr(epoch, config)
        else:
            lr = state.current_lr
        try:
            loss = learner.train_epoch(lr)
        except (DivergenceError, FloatingPointError, ValueError) as exc:
            if not isinstance(exc, DivergenceError) and "non-finite" not in str(exc):
                raise
            loss = math.nan
        if not math.isfinite(loss):
            diverged, stop_reason = True, "diverged"
            for i in range(n):
                records[i].append(EpochRecord(epoch, lr, math.nan, math.nan, math.nan, "stop"))
            break
        evals = [learner.evaluate(i) for i in range(n)]
        last_evals = evals
        action = "none"
        if config.schedule_kind == "plateau_v2" and epoch >= config.warmup_epochs:
            action = plateau_v2_update(state, epoch, loss, evals[0].top1, config)
        for i in range(n):
            records[i].append(EpochRecord(epoch, lr, learner.epoch_losses[i],
                                          evals[i].top1, evals[i].map, action))
        if action == "stop":
            stop_reason = "early_stop"
            break

    roles = ["single"] if n == 1 else ["fast", "slow"]
    reports = []
    for i in range(n):
        final = last_evals[i]
        if final is not None:
            final.epochs = float(len(records[i]))
        reports.append(TrainReport(records[i], len(records[i]), stop_reason, final,
                                   config.to_dict(), seed, roles[i], diverged, config.initial_lr))
    return reports[0] if n == 1 else (reports[0], reports[1])


def train(train_ds: LabeledDataset, val_ds: LabeledDataset, config: TrainLoopConfig, seed: int,
          model_spec: Optional[ModelSpec] = None, same_init: bool = False):
    """Build a :class:`Learner` and run it; see :func:`run_training`."""
    learner = Learner(train_ds, val_ds, config, seed, model_spec, same_init=same_init)
    return run_training(learner, seed)


def make_trial_runner(train_ds: LabeledDataset, val_ds: LabeledDataset, config: TrainLoopConfig,
                      model_spec: Optional[ModelSpec] = None):
    """Adapter for the LR searches: ``runner(lr, epochs, seed)`` trains a fresh
    learner at constant ``lr`` on the full training split and yields the
    validation top-1 after every epoch (NaN on divergence)."""

    def runner(lr: float, epochs: int, seed: int):
        cfg = config.replace(initial_lr=lr, schedule_kind="constant", max_epochs=max(epochs, 2),
                             warmup_epochs=0)
        learner = Learner(train_ds, val_ds, cfg, seed, model_spec)
        learner.begin_stream("train")
        for _ in range(epochs):
            try:
                loss = learner.train_epoch(lr)
            except (DivergenceError, FloatingPointError):
                loss = math.nan
            if not math.isfinite(loss):
                yield math.nan
                return
            yield learner.evaluate().top1

    return runner
