"""THR conformal prediction: scores, thresholds, sets, soft relaxations and metrics.

Class indices are 0-based throughout. Prediction sets are either ``frozenset``
objects or, for batches, boolean masks of shape (n, K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .diffcore import Node, Tape, ops

NEG_INFINITY = float("-inf")

# A threshold of -inf puts every class in the set. For the soft quantities it is
# replaced by a finite stand-in this many temperatures below the row minimum, at
# which the sigmoid is exactly 1.0 in float64.
_SATURATION_MARGIN = 50.0


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    alpha: float
    n_cal: int
    k: int

    @property
    def predicts_all(self) -> bool:
        return self.tau == NEG_INFINITY


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    T2: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.T2 > 0:
            raise ValueError("T2 must be positive")


@dataclass(frozen=True)
class SizeStrata:
    """Disjoint, contiguous, inclusive set-size intervals starting at 0."""

    intervals: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ivs = tuple((int(lo), int(hi)) for lo, hi in self.intervals)
        if not ivs:
            raise ValueError("at least one stratum is required")
        expected = 0
        for lo, hi in ivs:
            if lo != expected or hi < lo:
                raise ValueError(f"strata must be contiguous from 0, got {ivs}")
            expected = hi + 1
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def default(cls, num_classes: int) -> SizeStrata:
        bins = []
        for lo, hi in ((0, 1), (2, 3), (4, 6), (7, 10), (11, num_classes)):
            if lo > num_classes:
                break
            bins.append((lo, min(hi, num_classes)))
        return cls(tuple(bins))

    @property
    def max_size(self) -> int:
        return self.intervals[-1][1]

    def index_of(self, sizes: np.ndarray) -> np.ndarray:
        uppers = np.array([hi for _, hi in self.intervals])
        return np.searchsorted(uppers, sizes, side="left")


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


# -- calibration and hard sets ------------------------------------------------

def conformity_score(logits, y: int) -> float:
    """True-class logit ``f_y(x)``, the score THR calibrates on.

    The non-conformity form ``1 - f_y(x)`` is its mirror image, so ranking by
    one or the other gives the same threshold.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise IndexError(f"class {y} out of range for K={logits.shape[-1]}")
    return float(logits[y])


def true_class_scores(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise IndexError("label out of range")
    return logits[np.arange(len(labels)), labels]


def calibration_rank(n: int, alpha: float) -> int:
    """ceil((1 + n)(1 - alpha)), robust to float error when the product is integral."""
    v = (1 + n) * (1 - alpha)
    r = round(v)
    if abs(v - r) <= 1e-9 * (1 + n):
        return int(r)
    return math.ceil(v)


def thr_quantile(scores: Sequence[float], alpha: float) -> CalibrationResult:
    """Threshold = the ceil((1+n)(1-alpha))-th largest calibration score.

    When that rank exceeds n the threshold is -inf and every class is predicted.
    """
    _check_alpha(alpha)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = s.size
    if n == 0:
        raise ValueError("calibration scores are empty")
    k = calibration_rank(n, alpha)
    if k > n:
        return CalibrationResult(NEG_INFINITY, alpha, n, k)
    descending = np.sort(s, kind="stable")[::-1]
    return CalibrationResult(float(descending[k - 1]), alpha, n, k)


def prediction_set(logits, tau: float) -> frozenset[int]:
    logits = np.asarray(logits, dtype=np.float64)
    return frozenset(int(k) for k in np.flatnonzero(logits >= tau))


def prediction_mask(logits, tau: float) -> np.ndarray:
    """Boolean (n, K) membership matrix for a batch of logits."""
    return np.asarray(logits, dtype=np.float64) >= tau


# -- differentiable relaxations -----------------------------------------------

def _prepare(logits, tau, temperature: float):
    """Lift inputs onto a tape; returns (tape, logits node, row-threshold node, numeric?)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(logits, Node):
        tape, numeric = logits.tape, False
    elif isinstance(tau, Node):
        tape, numeric = tau.tape, False
    else:
        tape, numeric = Tape(), True
    L = logits if isinstance(logits, Node) else tape.const(logits)
    rows = L.shape[:-1]
    if isinstance(tau, Node):
        t = tau if tau.shape == rows else ops.add(tape.const(np.zeros(rows)), tau)
    else:
        t_val = np.broadcast_to(np.asarray(tau, dtype=np.float64), rows).copy()
        if np.any(np.isnan(t_val)) or np.any(t_val == np.inf):
            raise ValueError("threshold must be finite or -inf")
        stand_in = L.value.min(axis=-1) - _SATURATION_MARGIN * temperature
        t = tape.const(np.where(t_val == NEG_INFINITY, stand_in, t_val))
    return tape, L, t, numeric


def _out(node: Node, numeric: bool):
    if not numeric:
        return node
    return float(node.value) if node.value.ndim == 0 else node.value.copy()


def _soft_members(L: Node, t: Node, temperature: float) -> Node:
    return ops.sigmoid(ops.scale(ops.shift(L, t), 1.0 / temperature))


def _label_signs(L: Node, y) -> np.ndarray:
    """+1 at the true class, -1 elsewhere."""
    y = np.asarray(y, dtype=np.int64)
    K = L.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"class out of range for K={K}")
    if L.value.ndim == 1 and y.ndim != 0:
        raise ValueError("scalar label expected for a single logit vector")
    onehot = np.eye(K)[y]
    return 2.0 * onehot - 1.0


def soft_set_size(logits, tau, T: float):
    """Sum over classes of sigmoid((f_k - tau) / T); tends to |set| as T -> 0."""
    tape, L, t, numeric = _prepare(logits, tau, T)
    return _out(ops.sum(_soft_members(L, t, T), axis=-1), numeric)


def classification_loss(logits, y, tau, T2: float):
    """sigma((f_y - tau)/T2) - sum_{k != y} sigma((f_k - tau)/T2). Larger is better."""
    tape, L, t, numeric = _prepare(logits, tau, T2)
    signs = _label_signs(L, y)
    s = _soft_members(L, t, T2)
    return _out(ops.sum(ops.mul(s, signs), axis=-1), numeric)


def total_training_loss(logits, y, tau, weights: LossWeights):
    """Minimisation objective ``-L_class + lambda * M_T2``."""
    tape, L, t, numeric = _prepare(logits, tau, weights.T2)
    signs = _label_signs(L, y)
    s = _soft_members(L, t, weights.T2)
    l_class = ops.sum(ops.mul(s, signs), axis=-1)
    size = ops.sum(s, axis=-1)
    return _out(ops.add(ops.neg(l_class), ops.scale(size, weights.lam)), numeric)


# -- evaluation metrics -------------------------------------------------------

def _covered_and_sizes(sets, labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if isinstance(sets, np.ndarray) and sets.ndim == 2:
        mask = sets.astype(bool)
        if mask.shape[0] != labels.size:
            raise ValueError("sets and labels differ in length")
        if labels.size == 0:
            raise ValueError("no samples to evaluate")
        return mask[np.arange(labels.size), labels], mask.sum(axis=1)
    sets = list(sets)
    if len(sets) != labels.size:
        raise ValueError("sets and labels differ in length")
    if not sets:
        raise ValueError("no samples to evaluate")
    covered = np.array([int(y) in s for s, y in zip(sets, labels)], dtype=bool)
    sizes = np.array([len(s) for s in sets], dtype=np.int64)
    return covered, sizes


def coverage(sets, labels) -> float:
    covered, _ = _covered_and_sizes(sets, labels)
    return float(covered.mean())


def avg_size(sets: Iterable) -> float:
    if isinstance(sets, np.ndarray) and sets.ndim == 2:
        if sets.shape[0] == 0:
            raise ValueError("no samples to evaluate")
        return float(sets.sum(axis=1).mean())
    sizes = [len(s) for s in sets]
    if not sizes:
        raise ValueError("no samples to evaluate")
    return float(np.mean(sizes))


def sscv(sets, labels, alpha: float, strata: SizeStrata | None = None) -> float:
    """Worst |within-stratum coverage - (1 - alpha)| over non-empty size strata."""
    _check_alpha(alpha)
    covered, sizes = _covered_and_sizes(sets, labels)
    if strata is None:
        K = sets.shape[1] if isinstance(sets, np.ndarray) and sets.ndim == 2 else int(sizes.max(initial=1))
        strata = SizeStrata.default(max(K, 1))
    if sizes.max() > strata.max_size:
        raise ValueError(f"set size {sizes.max()} falls outside strata ending at {strata.max_size}")
    which = strata.index_of(sizes)
    worst = None
    for j in range(len(strata.intervals)):
        members = which == j
        if not members.any():
            continue
        gap = abs(float(covered[members].mean()) - (1.0 - alpha))
        worst = gap if worst is None else max(worst, gap)
    if worst is None:
        raise ValueError("all strata are empty")
    return worst
