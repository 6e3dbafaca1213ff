"""
Historical prior and residual head
==================================

The naive baseline scores every cell by its smoothed historical label
frequency p = (k + alpha) / (n + 2 alpha). The same p anchors the network:
class logits o = (log(1 - p), log p) shifted by c (``additive``) or scaled by
c (``scaled``), plus the network's residual, go through a per-cell softmax.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from src.catalog import LabelTensor
from src.exceptions import NonFiniteError, ShapeMismatchError
from src.gridio import MAGIC_F32, read_grid, write_grid
from src.nn import softmax

logger = logging.getLogger(__name__)

PRIOR_MODES = ("additive", "scaled")


@dataclass(frozen=True)
class PriorMap:
    """Per-cell probability p with the counts it was fitted from."""

    p: np.ndarray
    k: np.ndarray
    n: np.ndarray
    alpha: float

    @property
    def grid_shape(self):
        return self.p.shape


@dataclass(frozen=True)
class PriorLogits:
    """Class logits o shaped (2, n_rows, n_cols); index 0 is quiet, 1 is earthquake."""

    o: np.ndarray
    c: float
    mode: str = "additive"


def _smoothed(k: np.ndarray, n: np.ndarray, alpha: float) -> np.ndarray:
    return (k + alpha) / (n + 2.0 * alpha)


def fit_prior(labels: LabelTensor, alpha: float = 1.0) -> PriorMap:
    """
    Fit the per-cell historical frequency on training labels.

    Args:
        labels: Training-day labels
        alpha: Laplace smoothing, > 0

    Returns:
        PriorMap with 0 < p < 1 everywhere

    Raises:
        ValueError: alpha <= 0 or no valid training day
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    valid = labels.valid_mask.astype(bool)
    if not valid.any():
        raise ValueError("no valid training days to fit the prior")
    k = np.where(valid, labels.y, 0).sum(axis=0).astype(np.int64)
    n = valid.sum(axis=0).astype(np.int64)
    p = _smoothed(k.astype(np.float64), n.astype(np.float64), float(alpha))
    logger.info("prior fitted on %d valid days, mean p=%.5f", int(n.max()), float(p.mean()))
    return PriorMap(p=p, k=k, n=n, alpha=float(alpha))


def prior_logits(prior: PriorMap, c: float = 0.0, mode: str = "additive") -> PriorLogits:
    """
    o_1 = log(1 - p) + c, o_2 = log p + c (additive), or c * log p_i (scaled).
    """
    if mode not in PRIOR_MODES:
        raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {mode!r}")
    logs = np.stack([np.log1p(-prior.p), np.log(prior.p)])
    o = logs + c if mode == "additive" else c * logs
    return PriorLogits(o=o, c=float(c), mode=mode)


def combine_residual(logits: Union[PriorLogits, np.ndarray], delta: np.ndarray) -> np.ndarray:
    """
    Earthquake-class probability softmax(o + delta)[1] per cell.

    Args:
        logits: Prior logits (2, R, C)
        delta: Residual logits (..., 2, R, C); leading batch axes broadcast

    Returns:
        Probability map (..., R, C)

    Raises:
        ShapeMismatchError: trailing shapes differ
        NonFiniteError: delta holds NaN or Inf
    """
    o = logits.o if isinstance(logits, PriorLogits) else np.asarray(logits, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape[-3:] != o.shape:
        raise ShapeMismatchError(f"residual shape {delta.shape} does not end with {o.shape}")
    if not np.all(np.isfinite(delta)):
        raise NonFiniteError("residual logits must be finite")
    return softmax(o + delta, axis=-3)[..., 1, :, :]


def alarm(probabilities: np.ndarray, threshold: float) -> np.ndarray:
    """1 where the probability strictly exceeds the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(probabilities) > threshold).astype(np.uint8)


def prior_probability_maps(prior: PriorMap, reference_days: Sequence) -> np.ndarray:
    """The baseline forecast: p repeated for every reference day."""
    return np.broadcast_to(prior.p, (len(reference_days),) + prior.p.shape).copy()


# =============================================================================
# PERSISTENCE
# =============================================================================

def save_prior(path: Path, prior: PriorMap) -> Path:
    """QGRD block with D=1 plus a JSON sidecar carrying k, n and alpha."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        write_grid(handle, prior.p[None, :, :], MAGIC_F32)
    sidecar = {"alpha": prior.alpha, "k": prior.k.tolist(), "n": prior.n.tolist()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))
    return path


def load_prior(path: Path) -> PriorMap:
    """Reload a prior; p is recomputed from the integer counts so it is exact."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    with open(path, "rb") as handle:
        block = read_grid(handle)
    k = np.asarray(sidecar["k"], dtype=np.int64)
    n = np.asarray(sidecar["n"], dtype=np.int64)
    if block.shape != (1,) + k.shape or k.shape != n.shape:
        raise ShapeMismatchError("prior block and sidecar counts disagree")
    alpha = float(sidecar["alpha"])
    p = _smoothed(k.astype(np.float64), n.astype(np.float64), alpha)
    return PriorMap(p=p, k=k, n=n, alpha=alpha)
