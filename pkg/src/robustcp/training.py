"""Training loops: clean ERM, PGD adversarial training and OPSA-AT."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import conformal
from .attacks import AdamState, AttackBudget, adam_step, cross_entropy_rows, opsa, pgd
from .conformal import LossWeights
from .data import Dataset
from .diffcore import Tape, backward, ops
from .models import MlpConfig, MlpParams, forward_logits, init_params, logits_on_tape, param_nodes
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    cal_fraction: float = 0.5
    alpha: float = 0.1
    loss_weights: LossWeights = LossWeights()
    budget: AttackBudget = AttackBudget(8 / 255)
    T1: float = 1.0
    attack_steps: int = 10
    attack_eta: float = 2 / 255
    optimizer: str = "sgd"
    lr: float = 0.05
    hidden: tuple[int, ...] = ()
    seed: int = 0
    attack_calibration: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.cal_fraction < 1.0:
            raise ValueError("cal_fraction must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.attack_steps < 1 or not self.attack_eta > 0 or not self.T1 > 0:
            raise ValueError("attack needs steps >= 1, eta > 0 and T1 > 0")

    def cal_size(self, batch: int) -> int:
        return min(batch - 1, max(1, round(self.cal_fraction * batch)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["budget"]["box"] = list(self.budget.box) if self.budget.box is not None else None
        return d


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_tau: float | None = None
    monitor_coverage: float | None = None
    monitor_size: float | None = None


@dataclass
class TrainReport:
    mode: str
    epochs: list[EpochRecord] = field(default_factory=list)
    params: MlpParams | None = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epochs": [asdict(e) for e in self.epochs]}


@dataclass
class BatchSplit:
    train: np.ndarray
    cal: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.train, self.cal).size:
            raise AssertionError("batch train/cal parts overlap")


# -- gradients ----------------------------------------------------------------

def _loss_and_grads(params: MlpParams, X: np.ndarray, build) -> tuple[float, np.ndarray, list[np.ndarray]]:
    tape = Tape()
    layers = param_nodes(tape, params, differentiable=True)
    try:
        logits = logits_on_tape(tape, layers, tape.const(X))
        rows = build(logits)
        result = backward(tape, ops.sum(rows), [n for pair in layers for n in pair])
    except FloatingPointError as exc:
        raise DivergenceError(f"{exc}; lower the learning rate") from exc
    grads = [result[n] for pair in layers for n in pair]
    return result.value, rows.value.copy(), grads


def cross_entropy_grads(params: MlpParams, X, y):
    """Mean cross-entropy over the batch and its parameter gradients."""
    total, rows, grads = _loss_and_grads(params, X, lambda L: cross_entropy_rows(L, y))
    n = len(rows)
    return total / n, [g / n for g in grads]


def conformal_loss_grads(params: MlpParams, X, y, tau: float, weights: LossWeights):
    """Summed ``-L_class + lambda * M_T2`` over the rows and its parameter gradients."""
    total, rows, grads = _loss_and_grads(
        params, X, lambda L: conformal.total_training_loss(L, y, tau, weights))
    return total, rows, grads


# -- optimisers ---------------------------------------------------------------

class _Optimizer:
    def __init__(self, kind: str, lr: float):
        self.kind, self.lr = kind, lr
        self.states: list[AdamState] | None = None

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.kind == "sgd":
            return [a - self.lr * g for a, g in zip(arrays, grads)]
        if self.states is None:
            self.states = [AdamState.zeros(a.shape) for a in arrays]
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.states[i], update = adam_step(self.states[i], g, self.lr)
            out.append(a - update)
        return out


def _check_finite(loss: float, arrays, where: str) -> None:
    if not math.isfinite(loss) or not all(np.all(np.isfinite(a)) for a in arrays):
        raise DivergenceError(f"non-finite loss or parameters at {where}; lower the learning rate")


def _apply_step(params: MlpParams, opt: _Optimizer, loss: float, grads, where: str) -> MlpParams:
    _check_finite(loss, grads, where)
    with np.errstate(over="ignore", invalid="ignore"):
        arrays = opt.step(params.arrays, grads)
    _check_finite(loss, arrays, where)
    return params.with_arrays(arrays)


# -- shared plumbing ----------------------------------------------------------

def _initial(dataset: Dataset, config: TrainConfig, params: MlpParams | None) -> MlpParams:
    if params is not None:
        if params.config.input_dim != dataset.dim or params.config.num_classes != dataset.num_classes:
            raise ValueError("initial parameters do not match the dataset's d/K")
        return params
    return init_params(MlpConfig(dataset.dim, config.hidden, dataset.num_classes), config.seed)


def _batches(n: int, config: TrainConfig, epoch: int, min_size: int = 1):
    perm = substream(config.seed, "shuffle", epoch).permutation(n)
    for b, start in enumerate(range(0, n, config.batch_size)):
        rows = perm[start:start + config.batch_size]
        if len(rows) >= min_size:
            yield b, rows


def _monitor(params: MlpParams, monitor: Dataset | None, alpha: float):
    if monitor is None or len(monitor) < 2:
        return None, None
    logits = forward_logits(params, monitor.X)
    cal, test = np.arange(0, len(monitor), 2), np.arange(1, len(monitor), 2)
    tau = conformal.thr_quantile(conformal.true_class_scores(logits[cal], monitor.y[cal]), alpha).tau
    mask = conformal.prediction_mask(logits[test], tau)
    return conformal.coverage(mask, monitor.y[test]), conformal.avg_size(mask)


def _finite_mean(values) -> float | None:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


# -- loops --------------------------------------------------------------------

def train_standard(dataset: Dataset, config: TrainConfig, params: MlpParams | None = None,
                   monitor: Dataset | None = None) -> tuple[MlpParams, TrainReport]:
    """Mini-batch descent on mean cross-entropy."""
    return _train_ce(dataset, config, params, monitor, adversarial=False)


def train_pgd_at(dataset: Dataset, config: TrainConfig, params: MlpParams | None = None,
                 monitor: Dataset | None = None) -> tuple[MlpParams, TrainReport]:
    """Madry-style adversarial training: CE descent at PGD-perturbed inputs."""
    return _train_ce(dataset, config, params, monitor, adversarial=True)


def _train_ce(dataset, config, params, monitor, adversarial):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = _initial(dataset, config, params)
    opt = _Optimizer(config.optimizer, config.lr)
    report = TrainReport("pgd-at" if adversarial else "standard")
    for epoch in range(config.epochs):
        losses = []
        for b, rows in _batches(len(dataset), config, epoch):
            X, y = dataset.X[rows], dataset.y[rows]
            if adversarial:
                outcomes = pgd(X, y, params, config.budget, steps=config.attack_steps,
                               step_size=config.attack_eta, indices=rows,
                               seed=derive_seed(config.seed, "attack", epoch, b))
                X = X + np.stack([o.epsilon_star for o in outcomes])
            loss, grads = cross_entropy_grads(params, X, y)
            params = _apply_step(params, opt, loss, grads, f"epoch {epoch}, batch {b}")
            losses.append(loss)
        cov, size = _monitor(params, monitor, config.alpha)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), None, cov, size))
        log.debug("epoch %d: loss %.5f", epoch, report.epochs[-1].mean_loss)
    report.params = params
    return params, report


def split_batch(rows: np.ndarray, config: TrainConfig, epoch: int, batch: int) -> BatchSplit:
    perm = substream(config.seed, "batch-split", epoch, batch).permutation(len(rows))
    n_cal = config.cal_size(len(rows))
    return BatchSplit(train=rows[perm[n_cal:]], cal=rows[perm[:n_cal]])


def opsa_at_batch(params: MlpParams, dataset: Dataset, parts: BatchSplit, config: TrainConfig,
                  attack_seed: int):
    """Steps 2-4 of one OPSA-AT batch, without the parameter update.

    Returns ``(summed loss, per-row losses, tau, gradients)``.
    """
    X_tr, y_tr = dataset.X[parts.train], dataset.y[parts.train]
    attack_kw = dict(T1=config.T1, steps=config.attack_steps, eta=config.attack_eta)
    outcomes = opsa(X_tr, y_tr, params, config.budget, seed=attack_seed, indices=parts.train, **attack_kw)
    X_adv = X_tr + np.stack([o.epsilon_star for o in outcomes])

    X_cal, y_cal = dataset.X[parts.cal], dataset.y[parts.cal]
    if config.attack_calibration:
        cal_out = opsa(X_cal, y_cal, params, config.budget, seed=attack_seed, indices=parts.cal, **attack_kw)
        X_cal = X_cal + np.stack([o.epsilon_star for o in cal_out])
    scores = conformal.true_class_scores(forward_logits(params, X_cal), y_cal)
    tau = conformal.thr_quantile(scores, config.alpha).tau

    total, rows, grads = conformal_loss_grads(params, X_adv, y_tr, tau, config.loss_weights)
    return total, rows, tau, grads


def train_opsa_at(dataset: Dataset, config: TrainConfig, init_params: MlpParams,
                  monitor: Dataset | None = None) -> tuple[MlpParams, TrainReport]:
    """Alternate OPSA perturbation, per-batch exact-quantile calibration and descent.

    Each mini-batch is split at random into a training part, which is attacked
    and drives the update, and a calibration part, whose clean true-class logits
    fix the threshold for that update.
    """
    if init_params is None:
        raise ValueError("OPSA-AT needs initial (pre-trained) parameters")
    if len(dataset) < 2:
        raise ValueError("dataset needs at least two rows")
    params = _initial(dataset, config, init_params)
    n_cal = config.cal_size(min(config.batch_size, len(dataset)))
    if n_cal < 5 * dataset.num_classes:
        warnings.warn(f"calibration part of each batch has {n_cal} rows, fewer than "
                      f"5*K = {5 * dataset.num_classes}; thresholds will be noisy", stacklevel=2)
    opt = _Optimizer(config.optimizer, config.lr)
    report = TrainReport("opsa-at")
    for epoch in range(config.epochs):
        losses, taus = [], []
        for b, rows in _batches(len(dataset), config, epoch, min_size=2):
            parts = split_batch(rows, config, epoch, b)
            total, per_row, tau, grads = opsa_at_batch(
                params, dataset, parts, config, derive_seed(config.seed, "attack", epoch, b))
            params = _apply_step(params, opt, total, grads, f"epoch {epoch}, batch {b}")
            losses.append(float(per_row.mean()))
            taus.append(tau)
        cov, size = _monitor(params, monitor, config.alpha)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                                         _finite_mean(taus), cov, size))
        log.debug("epoch %d: loss %.5f tau %s", epoch, report.epochs[-1].mean_loss, report.epochs[-1].mean_tau)
    report.params = params
    return params, report
