"""
Earmark - Fine-Tuning Loop

One run:
1. Evaluate the untrained model on the validation set ("epoch 0")
2. For each epoch: shuffle with a (seed, epoch) stream, step AdamW on
   batches of batch_size (the final short batch is kept), then evaluate
   the validation loss with the same lambda configuration
3. Return the parameters from the epoch with the lowest validation loss
   (earliest on ties)

Runs are fully deterministic. Wall time is logged and kept on the report
object but is not written to disk, so report files are byte-identical
across runs.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    from config import BATCH_SIZE, DESK_SCALE_LEARNING_RATE, EPOCHS, LAMBDA1, LAMBDA2, REGULARIZER, SEED, WEIGHT_DECAY
    from errors import NonFiniteError, RejectedInputError, TrainingDivergedError
    from losses import LOSS_PRESETS, Regularizer, combined_loss
    from model import ModelParams, assign_parameters, backward, copy_model, embed, forward, named_parameters
    from optim import AdamWState, adamw_step
except ModuleNotFoundError:
    from src.config import BATCH_SIZE, DESK_SCALE_LEARNING_RATE, EPOCHS, LAMBDA1, LAMBDA2, REGULARIZER, SEED, WEIGHT_DECAY
    from src.errors import NonFiniteError, RejectedInputError, TrainingDivergedError
    from src.losses import LOSS_PRESETS, Regularizer, combined_loss
    from src.model import ModelParams, assign_parameters, backward, copy_model, embed, forward, named_parameters
    from src.optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = DESK_SCALE_LEARNING_RATE
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    reg: str = REGULARIZER
    seed: int = SEED
    shuffle: bool = True
    weight_decay: float = WEIGHT_DECAY
    normalize: bool = True

    def __post_init__(self):
        self.reg = Regularizer.parse(self.reg).value

    @property
    def regularizer(self) -> Regularizer:
        return Regularizer(self.reg)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        """Config for one of the LOSS_PRESETS keys, e.g. "wsce+mae"."""
        if name not in LOSS_PRESETS:
            raise RejectedInputError(f"unknown loss preset {name!r}; choose from {sorted(LOSS_PRESETS)}")
        lambda1, lambda2, reg = LOSS_PRESETS[name]
        return cls(lambda1=lambda1, lambda2=lambda2, reg=reg.value, **overrides)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise RejectedInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise RejectedInputError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise RejectedInputError(f"lr must be > 0, got {self.lr}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise RejectedInputError(f"lambdas must be >= 0, got [{self.lambda1}, {self.lambda2}]")
        if self.weight_decay < 0:
            raise RejectedInputError(f"weight_decay must be >= 0, got {self.weight_decay}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureSet:
    """Stacked features and targets for a list of records."""

    text: np.ndarray
    audio: np.ndarray
    targets: np.ndarray
    item_ids: tuple = ()

    def __len__(self):
        return self.targets.shape[0]


def records_to_arrays(records) -> FeatureSet:
    """
    Stack SubjectiveRecords into feature matrices and a target vector.

    Raises:
        RejectedInputError: Empty input or inconsistent feature dimensions
    """
    records = list(records)
    if not records:
        raise RejectedInputError("no records to train or evaluate on")
    try:
        text = np.stack([r.text_features for r in records])
        audio = np.stack([r.audio_features for r in records])
    except ValueError as e:
        raise RejectedInputError(f"records have inconsistent feature dimensions ({e})") from e
    targets = np.array([r.target for r in records], dtype=np.float64)
    return FeatureSet(text, audio, targets, tuple(r.item_id for r in records))


def _as_features(data) -> FeatureSet:
    if isinstance(data, FeatureSet):
        if len(data) == 0:
            raise RejectedInputError("feature set is empty")
        return data
    return records_to_arrays(data)


@dataclass
class TrainReport:
    """
    Loss curves and the selected epoch.

    initial_val_loss is the validation loss before any update. Epochs are
    1-indexed in best_epoch; train_losses[k] belongs to epoch k + 1.
    """

    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_loss: float = math.nan
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    optimizer_state: Optional[AdamWState] = field(default=None, repr=False)

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "train_losses": list(self.train_losses),
            "val_losses": list(self.val_losses),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "initial_val_loss": self.initial_val_loss,
            "config": dict(self.config),
        }

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def write_loss_curve(path, losses, start_epoch: int = 1):
    """Two-column TSV: epoch, loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch\tloss"]
    lines.extend(f"{start_epoch + i}\t{float(v)!r}" for i, v in enumerate(losses))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def select_best_epoch(val_losses) -> int:
    """1-indexed epoch of the lowest validation loss; earliest wins ties."""
    losses = np.asarray(val_losses, dtype=np.float64)
    if losses.size == 0:
        raise RejectedInputError("no validation losses to select from")
    return int(np.argmin(losses)) + 1


def _batch_slices(n: int, batch_size: int):
    return [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def evaluate_loss(model: ModelParams, dataset, cfg: TrainConfig) -> float:
    """
    Dataset-level combined loss without touching the parameters.

    Batches of cfg.batch_size are taken in order (no shuffle); batch losses
    are averaged weighted by batch size.
    """
    data = _as_features(dataset)
    n = len(data)
    total = 0.0
    for number, batch in enumerate(_batch_slices(n, cfg.batch_size), start=1):
        emb = embed(model, data.text[batch], data.audio[batch]).with_targets(data.targets[batch])
        value = combined_loss(emb, model.temperature, cfg.lambda1, cfg.lambda2, cfg.reg, cfg.normalize).value
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite evaluation loss in batch {number}", batch=number, value=value)
        total += value * (batch.stop - batch.start)
    return total / n


def _check_dims(model: ModelParams, data: FeatureSet, name: str):
    if data.text.shape[1] != model.text_dim or data.audio.shape[1] != model.audio_dim:
        raise RejectedInputError(
            f"{name} features are {data.text.shape[1]}/{data.audio.shape[1]} wide, "
            f"the model expects {model.text_dim}/{model.audio_dim}"
        )


def _validation_loss(model: ModelParams, val_data: FeatureSet, cfg: TrainConfig, epoch: int) -> float:
    try:
        return evaluate_loss(model, val_data, cfg)
    except NonFiniteError as e:
        raise TrainingDivergedError(epoch, e.batch, math.nan if e.value is None else e.value, phase="validation") from e


def train(model: ModelParams, train_set, val_set, cfg: TrainConfig, optimizer_state: Optional[AdamWState] = None):
    """
    Fine-tune the model and keep the best epoch.

    Args:
        model: Starting parameters (not mutated)
        train_set: SubjectiveRecord list or FeatureSet
        val_set: SubjectiveRecord list or FeatureSet
        cfg: Training configuration
        optimizer_state: Resume from this AdamW state instead of fresh moments

    Returns:
        tuple: (best ModelParams, TrainReport)

    Raises:
        RejectedInputError: Empty sets, bad config, dimension mismatch
        TrainingDivergedError: A training or validation batch loss became non-finite
    """
    cfg.validate()
    train_data = _as_features(train_set)
    val_data = _as_features(val_set)
    _check_dims(model, train_data, "training")
    _check_dims(model, val_data, "validation")

    started = time.perf_counter()
    current = copy_model(model)
    if optimizer_state is None:
        state = AdamWState.create(named_parameters(current), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        state = optimizer_state

    report = TrainReport(config=cfg.to_dict())
    report.initial_val_loss = _validation_loss(current, val_data, cfg, epoch=0)
    logger.info("epoch 0: val %.6f (untrained)", report.initial_val_loss)

    best_model, best_state, best_val = copy_model(current), state, math.inf
    n = len(train_data)
    slices = _batch_slices(n, cfg.batch_size)

    for epoch in range(1, cfg.epochs + 1):
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)

        epoch_total = 0.0
        for number, batch in enumerate(slices, start=1):
            idx = order[batch]
            emb = forward(current, train_data.text[idx], train_data.audio[idx]).with_targets(train_data.targets[idx])
            loss = combined_loss(emb, current.temperature, cfg.lambda1, cfg.lambda2, cfg.reg, cfg.normalize)
            if not math.isfinite(loss.value):
                raise TrainingDivergedError(epoch, number, loss.value)

            grads = backward(current, loss.grads)
            try:
                params, state = adamw_step(named_parameters(current), grads, state)
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, number, loss.value) from e
            current = assign_parameters(current, params)
            epoch_total += loss.value * idx.size
            logger.debug("epoch %d batch %d: loss %.6f", epoch, number, loss.value)

        report.train_losses.append(epoch_total / n)
        val_loss = _validation_loss(current, val_data, cfg, epoch)
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_model, best_state, best_val = copy_model(current), state, val_loss
        logger.info("epoch %d/%d: train %.6f val %.6f", epoch, cfg.epochs, report.train_losses[-1], val_loss)

    report.best_epoch = select_best_epoch(report.val_losses)
    report.optimizer_state = best_state
    report.wall_time = time.perf_counter() - started
    logger.info(
        "best epoch %d (val %.6f, untrained %.6f) in %.1fs",
        report.best_epoch,
        report.best_val_loss,
        report.initial_val_loss,
        report.wall_time,
    )
    return best_model, report
