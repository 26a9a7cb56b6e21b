"""Sequence losses, plateau schedule, and the training loop."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .model import ModelConfig, TFCRNN, normalize_io_mode
from .nn import SGDNesterov, Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 23
    lr0: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 5.0
    plateau_patience: int = 3
    max_plateaus: int = 3
    min_delta: float = 1e-6
    seed: int = 0
    io_mode: str = "many_to_many"
    max_epochs: int | None = None

    def __post_init__(self):
        self.io_mode = normalize_io_mode(self.io_mode)
        if self.batch_size < 1 or self.plateau_patience < 1 or self.max_plateaus < 1:
            raise ValueError("batch_size, plateau_patience and max_plateaus must be positive")
        if self.lr0 < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr0 must be >= 0 and momentum in [0, 1)")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScheduleState:
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    plateaus_hit: int = 0
    current_lr: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def loss_many_to_one(logits_seq: Sequence[Tensor], labels) -> Tensor:
    """Cross-entropy on the final step only."""
    if not logits_seq:
        raise ValueError("empty logit sequence")
    return cross_entropy(logits_seq[-1], np.atleast_1d(labels))


def loss_many_to_many(logits_seq: Sequence[Tensor], labels) -> Tensor:
    """Mean over steps of the cross-entropy against the replicated clip label."""
    if not logits_seq:
        raise ValueError("empty logit sequence")
    labels = np.atleast_1d(labels)
    total = cross_entropy(logits_seq[0], labels)
    for logits in logits_seq[1:]:
        total = total + cross_entropy(logits, labels)
    if len(logits_seq) == 1:
        return total
    return total * (1.0 / len(logits_seq))


def sequence_loss(logits_seq: Sequence[Tensor], labels, io_mode: str) -> Tensor:
    if normalize_io_mode(io_mode) == "many_to_one":
        return loss_many_to_one(logits_seq, labels)
    return loss_many_to_many(logits_seq, labels)


def schedule_update(state: ScheduleState, val_loss: float,
                    config: TrainConfig) -> tuple[ScheduleState, bool]:
    """Advance the plateau state machine by one epoch.

    A plateau is ``plateau_patience`` consecutive epochs without improving
    the best loss by more than ``min_delta``. Each plateau divides the
    learning rate by ``decay_factor``; reaching ``max_plateaus`` stops
    training instead of running at the new rate.
    """
    if not np.isfinite(val_loss):
        raise TrainingDivergedError(f"validation loss is {val_loss}")
    if val_loss < state.best_val_loss - config.min_delta:
        return replace(state, best_val_loss=float(val_loss), epochs_since_improvement=0), False
    waited = state.epochs_since_improvement + 1
    if waited < config.plateau_patience:
        return replace(state, epochs_since_improvement=waited), False
    plateaus = state.plateaus_hit + 1
    new = replace(state, epochs_since_improvement=0, plateaus_hit=plateaus,
                  current_lr=config.lr0 / config.decay_factor ** plateaus)
    return new, plateaus >= config.max_plateaus


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def prefetch(batches: Sequence[np.ndarray], load: Callable, depth: int = 2) -> Iterator:
    """Decode upcoming batches on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for idx in batches:
                q.put(load(idx))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()


def epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Shuffle and dropout generators for one epoch, derived from the master seed."""
    return np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1])


def train_epoch(model: TFCRNN, data, config: TrainConfig, optimizer: SGDNesterov,
                shuffle_rng: np.random.Generator, dropout_rng: np.random.Generator) -> float:
    """One pass over ``data`` in shuffled batches; returns the sample-weighted mean loss."""
    model.train()
    order = shuffle_rng.permutation(len(data))
    total, seen = 0.0, 0
    for clips, labels in prefetch(_batches(order, config.batch_size), data.load):
        optimizer.zero_grad()
        out = model.forward_sequence(model.frames_for(clips), rng=dropout_rng)
        loss = sequence_loss(out.logits, labels, config.io_mode)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} after {seen} samples")
        loss.backward()
        optimizer.step()
        total += value * len(labels)
        seen += len(labels)
    return total / max(seen, 1)


def evaluate_loss(model: TFCRNN, data, io_mode: str, batch_size: int = 64) -> float:
    """Mean sequence loss in eval mode."""
    model.eval()
    total, seen = 0.0, 0
    with no_grad():
        for idx in _batches(np.arange(len(data)), batch_size):
            clips, labels = data.load(idx)
            out = model.forward_sequence(model.frames_for(clips))
            total += sequence_loss(out.logits, labels, io_mode).item() * len(labels)
            seen += len(labels)
    return total / max(seen, 1)


def accuracy(model: TFCRNN, data, batch_size: int = 64) -> float:
    correct = 0
    for idx in _batches(np.arange(len(data)), batch_size):
        clips, labels = data.load(idx)
        correct += int(np.sum(model.predict(clips) == labels))
    return correct / max(len(data), 1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    plateaus: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict[str, np.ndarray]
    bn_initialized: dict[str, bool]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    schedule: ScheduleState = field(default_factory=ScheduleState)
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    @classmethod
    def capture(cls, model: TFCRNN, train_config: TrainConfig, optimizer: SGDNesterov | None = None,
                schedule: ScheduleState | None = None, epoch: int = 0,
                history: Sequence[EpochRecord] = (), label_names: Sequence[str] = ()) -> "Checkpoint":
        return cls(
            model_config=ModelConfig.from_dict(model.config.to_dict()),
            train_config=replace(train_config),
            tensors={k: np.array(v, dtype=np.float32) for k, v in model.state_arrays().items()},
            bn_initialized={k: s.initialized for k, s in model.bn.items()},
            velocities={} if optimizer is None else
            {k: np.array(v, dtype=np.float32) for k, v in optimizer.velocity.items()},
            schedule=replace(schedule) if schedule else ScheduleState(current_lr=train_config.lr0),
            epoch=epoch,
            history=list(history),
            label_names=list(label_names),
        )

    def build_model(self) -> TFCRNN:
        model = TFCRNN(self.model_config, seed=self.train_config.seed)
        model.load_state_arrays(self.tensors, self.bn_initialized)
        return model.eval()


def fit(model_config: ModelConfig, train_config: TrainConfig, train_data, val_data,
        label_names: Sequence[str] = (), on_epoch: Callable[[EpochRecord], None] | None = None,
        model: TFCRNN | None = None) -> Checkpoint:
    """Train until the schedule declares its last plateau (or ``max_epochs``).

    Returns the checkpoint with the lowest validation loss; its ``history``
    covers every epoch that was run.
    """
    if model is None:
        model = TFCRNN(model_config, seed=train_config.seed)
    optimizer = SGDNesterov(model.named_parameters(), lr=train_config.lr0, momentum=train_config.momentum)
    state = ScheduleState(current_lr=train_config.lr0)
    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    epoch = 0
    while train_config.max_epochs is None or epoch < train_config.max_epochs:
        epoch += 1
        optimizer.lr = state.current_lr
        shuffle_rng, dropout_rng = epoch_rngs(train_config.seed, epoch)
        train_loss = train_epoch(model, train_data, train_config, optimizer, shuffle_rng, dropout_rng)
        val_loss = evaluate_loss(model, val_data, train_config.io_mode)
        lr_used = state.current_lr
        improved = val_loss < state.best_val_loss - train_config.min_delta
        state, stop = schedule_update(state, val_loss, train_config)
        record = EpochRecord(epoch, train_loss, val_loss, lr_used, state.plateaus_hit)
        history.append(record)
        log.info("epoch %d train %.5f val %.5f lr %g plateaus %d",
                 epoch, train_loss, val_loss, lr_used, state.plateaus_hit)
        if on_epoch is not None:
            on_epoch(record)
        if improved or best is None:
            best = Checkpoint.capture(model, train_config, optimizer, state, epoch, history, label_names)
        if stop:
            break
    assert best is not None
    best.history = list(history)
    return best
