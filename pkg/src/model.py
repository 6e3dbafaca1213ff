"""
Forecasting Network
===================

Two architectures over a W-day window of magnitude heat maps:

* ``cnn``      - the W maps stacked as channels, then the convolutional head
* ``cnn_lstm`` - each day embedded by a small conv stack, folded through a
  ConvLSTM cell, and the final hidden map sent through the head

The head ends in a zero-initialized 2-channel convolution. With the prior
residual enabled its output is a logit offset on the prior logits, so an
untrained network forecasts the prior exactly; without it a plain softmax
gives 0.5 everywhere at start.

Training is truncated backpropagation through each W-day window with the
loss taken at the window's last day only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.catalog import HeatMapSeq, LabelTensor
from src.checkpoint import Checkpoint
from src.evaluation import MetricsReport, confusion_at, evaluate, pool_samples, pr_auc, roc_auc
from src.exceptions import (
    DivergenceError,
    InsufficientHistoryError,
    NonFiniteError,
    ShapeMismatchError,
    SplitError,
)
from src.models import ModelConfig, TrainConfig
from src.nn import (
    Adam,
    Conv2d,
    ConvLSTMCell,
    Layer,
    Parameter,
    activation,
    clip_grad_norm,
    softmax,
    weighted_softmax_ce,
)
from src.prior import PriorLogits, combine_residual

logger = logging.getLogger(__name__)

PRIOR_BUFFER = "prior.o"


# =============================================================================
# NETWORK
# =============================================================================

class ForecastNet:
    """CNN or CNN+LSTM forecaster with an optional prior-residual output."""

    def __init__(self, config: ModelConfig, prior: Optional[PriorLogits] = None):
        if config.use_prior_residual and prior is None:
            raise ValueError("residual mode needs prior logits")
        self.config = config
        self.prior = prior
        rng = np.random.default_rng(config.seed)
        k = config.kernel_size

        self.embed: List[Layer] = []
        self.cell: Optional[ConvLSTMCell] = None
        if config.variant == "cnn_lstm":
            channels = 1
            for depth in range(config.embed_depth):
                self.embed.append(Conv2d(f"embed{depth}", channels, config.embed_channels, k, rng))
                self.embed.append(activation(config.activation))
                channels = config.embed_channels
            self.cell = ConvLSTMCell("lstm", channels, config.hidden_channels, k, rng,
                                     forget_bias=config.forget_bias)
            head_in = config.hidden_channels
        else:
            head_in = config.window_days

        self.head: List[Layer] = []
        for depth in range(config.head_depth - 1):
            self.head.append(Conv2d(f"head{depth}", head_in, config.hidden_channels, k, rng))
            self.head.append(activation(config.activation))
            head_in = config.hidden_channels
        self.head.append(Conv2d("out", head_in, 2, k, rng, zero_init=True))

    # -------------------------------------------------------------------------

    def layers(self) -> List[Layer]:
        return self.embed + ([self.cell] if self.cell is not None else []) + self.head

    def parameters(self) -> List[Parameter]:
        return [param for layer in self.layers() for param in layer.parameters()]

    def clear(self) -> None:
        for layer in self.layers():
            layer.clear()

    def _check_windows(self, windows: np.ndarray) -> None:
        if windows.ndim != 4 or windows.shape[1] != self.config.window_days:
            raise ShapeMismatchError(
                f"expected (batch, {self.config.window_days}, H, W) windows, got {windows.shape}"
            )
        if self.prior is not None and self.prior.o.shape[1:] != windows.shape[2:]:
            raise ShapeMismatchError(
                f"prior grid {self.prior.o.shape[1:]} vs input grid {windows.shape[2:]}"
            )

    def residual(self, windows: np.ndarray) -> np.ndarray:
        """Head output (B, 2, H, W); caches are kept for ``backward``."""
        windows = np.asarray(windows, dtype=np.float64)
        self._check_windows(windows)
        if self.cell is None:
            x = windows
        else:
            batch, steps, height, width = windows.shape
            state = self.cell.initial_state(batch, height, width)
            for t in range(steps):
                x = windows[:, t:t + 1]
                for layer in self.embed:
                    x = layer(x)
                x, state = self.cell.step(x, state)
        for layer in self.head:
            x = layer(x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite activation in the forward pass")
        return x

    def logits(self, windows: np.ndarray) -> np.ndarray:
        delta = self.residual(windows)
        if self.config.use_prior_residual:
            return self.prior.o + delta
        return delta

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate parameter gradients from dL/dlogits of the last ``logits`` call."""
        grad = grad_logits
        for layer in reversed(self.head):
            grad = layer.backward(grad)
        if self.cell is None:
            return
        grad_h = grad
        grad_c = np.zeros_like(grad_h)
        for _ in range(self.config.window_days):
            grad_x, grad_h, grad_c = self.cell.backward_step(grad_h, grad_c)
            for layer in reversed(self.embed):
                grad_x = layer.backward(grad_x)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Earthquake probability maps (B, H, W); pure inference."""
        try:
            delta = self.residual(windows)
        finally:
            self.clear()
        if self.config.use_prior_residual:
            return combine_residual(self.prior, delta)
        return softmax(delta, axis=-3)[:, 1]

    # -------------------------------------------------------------------------
    # checkpoints
    # -------------------------------------------------------------------------

    def to_checkpoint(self, step: int, extra: Optional[Dict[str, object]] = None) -> Checkpoint:
        tensors = {param.name: param.value.copy() for param in self.parameters()}
        buffers = {PRIOR_BUFFER: self.prior.o.copy()} if self.prior is not None else {}
        return Checkpoint(
            config=self.config, seed=self.config.seed, step=step,
            tensors=tensors, buffers=buffers, extra=dict(extra or {}),
        )

    def load_state(self, checkpoint: Checkpoint) -> None:
        for param in self.parameters():
            value = checkpoint.tensors.get(param.name)
            if value is None or value.shape != param.value.shape:
                raise ShapeMismatchError(f"checkpoint has no tensor matching {param!r}")
            param.value[...] = value

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "ForecastNet":
        prior = None
        if PRIOR_BUFFER in checkpoint.buffers:
            prior = PriorLogits(
                o=checkpoint.buffers[PRIOR_BUFFER].copy(),
                c=checkpoint.config.prior_c, mode=checkpoint.config.prior_mode,
            )
        net = cls(checkpoint.config, prior)
        net.load_state(checkpoint)
        return net


# =============================================================================
# WINDOWS & INFERENCE
# =============================================================================

def has_history(heatmaps: HeatMapSeq, day: date, window_days: int) -> bool:
    end = heatmaps.day_index(day)
    return end - window_days + 1 >= 0 and end < heatmaps.days


def build_windows(heatmaps: HeatMapSeq, days: Sequence[date], window_days: int) -> np.ndarray:
    """Stack the maps for [T - W + 1 .. T] per reference day: (B, W, H, W)."""
    windows = []
    for day in days:
        if not has_history(heatmaps, day, window_days):
            raise InsufficientHistoryError(day, window_days)
        end = heatmaps.day_index(day)
        windows.append(heatmaps.maps[end - window_days + 1:end + 1])
    rows, cols = heatmaps.grid_shape
    if not windows:
        return np.zeros((0, window_days, rows, cols))
    return np.stack(windows)


def forward_window(net: ForecastNet, window: np.ndarray) -> np.ndarray:
    """Probability map for one (W, H, W) window."""
    return net.predict(np.asarray(window, dtype=np.float64)[None])[0]


def _as_net(model: Union[ForecastNet, Checkpoint]) -> ForecastNet:
    return ForecastNet.from_checkpoint(model) if isinstance(model, Checkpoint) else model


def predict_map(model: Union[ForecastNet, Checkpoint], day: date, heatmaps: HeatMapSeq) -> np.ndarray:
    """
    Forecast map for reference day T.

    Raises:
        InsufficientHistoryError: fewer than W maps end at T
    """
    net = _as_net(model)
    return forward_window(net, build_windows(heatmaps, [day], net.config.window_days)[0])


def predict_days(
    model: Union[ForecastNet, Checkpoint],
    heatmaps: HeatMapSeq,
    days: Sequence[date],
    batch_size: int = 16,
) -> np.ndarray:
    net = _as_net(model)
    rows, cols = heatmaps.grid_shape
    maps = [np.zeros((0, rows, cols))]
    for start in range(0, len(days), batch_size):
        batch = list(days[start:start + batch_size])
        maps.append(net.predict(build_windows(heatmaps, batch, net.config.window_days)))
    return np.concatenate(maps, axis=0)


def usable_days(
    heatmaps: HeatMapSeq,
    labels: LabelTensor,
    days: Sequence[date],
    window_days: int,
) -> List[date]:
    """Days with a full input window and at least one valid label cell."""
    known = set(labels.reference_days)
    kept = []
    for day in days:
        if day not in known or not has_history(heatmaps, day, window_days):
            continue
        if labels.valid_mask[labels.index_of(day)].any():
            kept.append(day)
    return kept


def score_days(
    model: Union[ForecastNet, Checkpoint],
    heatmaps: HeatMapSeq,
    labels: LabelTensor,
    days: Sequence[date],
    thresholds: Sequence[float],
    method: str = "model",
    batch_size: int = 16,
) -> MetricsReport:
    probabilities = predict_days(model, heatmaps, days, batch_size)
    return evaluate(pool_samples(probabilities, labels.subset(days)), thresholds, method)


# =============================================================================
# TRAINING
# =============================================================================

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_roc_auc: float
    val_pr_auc: float


@dataclass
class TrainResult:
    net: ForecastNet
    checkpoint: Checkpoint
    log: List[EpochLog]
    best_epoch: int


def _validation_scores(net, heatmaps, labels, val_days, batch_size) -> Tuple[float, float]:
    if not val_days:
        return float("nan"), float("nan")
    probabilities = predict_days(net, heatmaps, val_days, batch_size)
    samples = pool_samples(probabilities, labels.subset(val_days))
    roc = roc_auc(samples) if samples.positives and samples.negatives else float("nan")
    pr = pr_auc(samples) if samples.positives else float("nan")
    return roc, pr


def train(
    net: ForecastNet,
    config: TrainConfig,
    train_days: Sequence[date],
    val_days: Sequence[date],
    heatmaps: HeatMapSeq,
    labels: LabelTensor,
) -> TrainResult:
    """
    Fit the network on windowed reference days.

    Each epoch visits the training days in a seeded random order, in batches.
    After every epoch the validation PR AUC is computed; the best epoch's
    parameters are restored at the end. With no usable validation signal
    (no days, or a single class) the last epoch is kept.

    Args:
        net: Freshly built or partially trained network
        config: Optimizer and schedule
        train_days: Reference days to fit on
        val_days: Disjoint reference days for model selection
        heatmaps: Daily rasters covering every window
        labels: Labels covering train and validation days

    Returns:
        TrainResult with the best checkpoint and the per-epoch log

    Raises:
        SplitError: train and validation days overlap
        DivergenceError: non-finite loss or activation
    """
    if set(train_days) & set(val_days):
        raise SplitError("training and validation days overlap")
    window = net.config.window_days
    train_days = usable_days(heatmaps, labels, train_days, window)
    val_days = usable_days(heatmaps, labels, val_days, window)
    if not train_days:
        raise ValueError("no training day has a full input window and valid labels")
    logger.info("training %s on %d days, validating on %d", net.config.variant,
                len(train_days), len(val_days))

    params = net.parameters()
    optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    log: List[EpochLog] = []
    best: Optional[Checkpoint] = None
    best_score = -math.inf
    best_epoch = 0
    since_best = 0
    step = 0

    for epoch in tqdm(range(1, config.epochs + 1), desc="epochs", disable=not config.show_progress):
        order = rng.permutation(len(train_days))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_days[i] for i in order[start:start + config.batch_size]]
            targets = labels.subset(batch)
            optimizer.zero_grad()
            try:
                logits = net.logits(build_windows(heatmaps, batch, window))
            except NonFiniteError:
                net.clear()
                raise DivergenceError(epoch, step)
            loss, grad = weighted_softmax_ce(logits, targets.y, targets.valid_mask, config.class_weights)
            if not math.isfinite(loss):
                net.clear()
                raise DivergenceError(epoch, step, loss)
            net.backward(grad)
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            optimizer.step()
            step += 1
            losses.append(loss)

        val_roc, val_pr = _validation_scores(net, heatmaps, labels, val_days, config.batch_size)
        entry = EpochLog(epoch, float(np.mean(losses)), val_roc, val_pr)
        log.append(entry)
        logger.info("epoch %d: train_loss=%.6f val_roc_auc=%.4f val_pr_auc=%.4f",
                    epoch, entry.train_loss, val_roc, val_pr)

        if not math.isfinite(val_pr) or best is None or val_pr > best_score:
            best = net.to_checkpoint(step, extra={"epoch": epoch})
            best_score = val_pr if math.isfinite(val_pr) else -math.inf
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                break

    net.load_state(best)
    return TrainResult(net=net, checkpoint=best, log=log, best_epoch=best_epoch)


def write_training_log(sink: TextIO, log: Sequence[EpochLog]) -> int:
    frame = pd.DataFrame(
        [(e.epoch, e.train_loss, e.val_roc_auc, e.val_pr_auc) for e in log],
        columns=["epoch", "train_loss", "val_roc_auc", "val_pr_auc"],
    )
    frame.to_csv(sink, index=False, lineterminator="\n")
    return len(frame)


# =============================================================================
# CLASS-WEIGHT SWEEP
# =============================================================================

@dataclass(frozen=True)
class SweepRow:
    weight: float
    roc_auc: float
    pr_auc: float
    recall_at_half: float
    best_epoch: int


def sweep_class_weights(
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: Sequence[float],
    train_days: Sequence[date],
    val_days: Sequence[date],
    test_days: Sequence[date],
    heatmaps: HeatMapSeq,
    labels: LabelTensor,
    prior: Optional[PriorLogits],
) -> List[SweepRow]:
    """Train one network per minor-class weight and score each on the test days."""
    test_days = usable_days(heatmaps, labels, test_days, model_config.window_days)
    rows = []
    for weight in weights:
        config = train_config.model_copy(update={"minor_class_weight": float(weight)})
        result = train(ForecastNet(model_config, prior), config, train_days, val_days, heatmaps, labels)
        probabilities = predict_days(result.net, heatmaps, test_days, config.batch_size)
        samples = pool_samples(probabilities, labels.subset(test_days))
        roc = roc_auc(samples) if samples.positives and samples.negatives else float("nan")
        pr = pr_auc(samples) if samples.positives else float("nan")
        recall = confusion_at(samples, 0.5).recall
        logger.info("weight %g: roc_auc=%.4f pr_auc=%.4f recall@0.5=%.4f", weight, roc, pr, recall)
        rows.append(SweepRow(float(weight), roc, pr, recall, result.best_epoch))
    return rows


def write_sweep_table(sink: TextIO, rows: Sequence[SweepRow]) -> int:
    frame = pd.DataFrame(
        [(r.weight, r.roc_auc, r.pr_auc, r.recall_at_half, r.best_epoch) for r in rows],
        columns=["weight", "roc_auc", "pr_auc", "recall_at_half", "best_epoch"],
    )
    frame.to_csv(sink, index=False, lineterminator="\n")
    return len(frame)
