"""Feasible-region projection, FGSM/PGD baselines and the optimal size attack (OPSA).

All attacks accept a single input ``x`` of shape (d,) and return one
``AttackOutcome``, or a batch of shape (n, d) and return a list of outcomes.
Batched execution is row-separable: every row has its own RNG stream, Adam
moments, convergence flag and best-iterate bookkeeping, so a row's result does
not depend on which other rows share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .diffcore import Node, Tape, backward, ops
from .models import MlpParams, logits_on_tape, param_nodes
from .seeding import substream

NORMS = ("linf", "l2")
CONVERGENCE_TOL = 1e-6
FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget: ``||eps||_norm <= r`` and ``x + eps`` inside ``box``.

    ``box=None`` disables the box constraint. ``r == 0`` is allowed and makes
    every attack the identity.
    """

    r: float
    norm: str = "linf"
    box: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if not self.r >= 0:
            raise ValueError(f"budget r must be nonnegative, got {self.r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.box is not None:
            lo, hi = self.box
            if not lo < hi:
                raise ValueError(f"box must satisfy lo < hi, got {self.box}")
            object.__setattr__(self, "box", (float(lo), float(hi)))


@dataclass(frozen=True)
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, shape, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
        return cls(0, np.zeros(shape), np.zeros(shape), beta1, beta2, eps_hat)


def adam_step(state: AdamState, grad, eta: float) -> tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam. Returns the new state and ``eta * m_hat / (sqrt(v_hat) + eps_hat)``.

    The caller decides the sign: ascent adds the update, descent subtracts it.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match Adam state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = eta * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return replace(state, t=t, m=m, v=v), update


@dataclass
class AttackOutcome:
    epsilon_star: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    zero_gradient: bool = False


# -- feasible region ----------------------------------------------------------

def _check_in_box(x: np.ndarray, budget: AttackBudget) -> None:
    if budget.box is None:
        return
    lo, hi = budget.box
    outside = (x < lo) | (x > hi)
    bad = np.flatnonzero(outside.any(axis=-1)) if x.ndim > 1 else np.flatnonzero([outside.any()])
    if bad.size:
        raise ValueError(f"input row {int(bad[0])} lies outside the box [{lo}, {hi}]")


def project(epsilon, x, budget: AttackBudget) -> np.ndarray:
    """Map ``epsilon`` onto ``B_r(0) ∩ (box - x)``, row-wise for batches.

    For Linf the coordinatewise clamp is the exact Euclidean projection. For L2
    the box clamp and the radial rescale alternate until the point stops moving
    (rescaling toward 0 never leaves the shifted box, so the result is feasible).
    """
    eps = np.array(epsilon, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if eps.shape != x.shape:
        raise ValueError(f"perturbation shape {eps.shape} does not match input {x.shape}")
    _check_in_box(x, budget)
    r = budget.r
    if budget.norm == "linf":
        lower, upper = np.full_like(x, -r), np.full_like(x, r)
        if budget.box is not None:
            lower = np.maximum(lower, budget.box[0] - x)
            upper = np.minimum(upper, budget.box[1] - x)
        return np.clip(eps, lower, upper)

    for _ in range(100):
        prev = eps
        if budget.box is not None:
            eps = np.clip(eps, budget.box[0] - x, budget.box[1] - x)
        norms = np.linalg.norm(eps, axis=-1, keepdims=True)
        factor = np.where(norms > r, r / np.where(norms > 0, norms, 1.0), 1.0)
        eps = eps * factor
        if np.max(np.abs(eps - prev), initial=0.0) < 1e-9:
            break
    return eps


def is_feasible(epsilon, x, budget: AttackBudget, tol: float = FEASIBILITY_TOL) -> bool:
    """Certificate: norm bound and box membership, up to ``tol``."""
    eps = np.asarray(epsilon, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if budget.norm == "linf":
        norms = np.max(np.abs(eps), axis=-1, initial=0.0)
    else:
        norms = np.linalg.norm(eps, axis=-1)
    if np.any(norms > budget.r + tol):
        return False
    if budget.box is not None:
        z = x + eps
        if np.any(z < budget.box[0] - tol) or np.any(z > budget.box[1] + tol):
            return False
    return True


def sample_uniform_ball(d: int, budget: AttackBudget, seed) -> np.ndarray:
    """Uniform draw from the radius-``r`` ball of ``budget.norm`` in ``R^d``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = budget.r
    if budget.norm == "linf":
        return rng.uniform(-r, r, size=d)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return direction * (r * rng.uniform() ** (1.0 / d))


def _initial_rows(n: int, d: int, budget: AttackBudget, seed: int, indices) -> np.ndarray:
    """One ball sample per row, each from the stream keyed by (seed, sample index)."""
    if indices is None:
        indices = range(n)
    return np.stack([sample_uniform_ball(d, budget, substream(seed, "attack-init", int(i)))
                     for i in indices])


# -- objectives ---------------------------------------------------------------

Objective = Callable[[Node, np.ndarray], Node]


def cross_entropy_rows(logits: Node, y) -> Node:
    return ops.sub(ops.logsumexp(logits), ops.take_label(logits, y))


def opsa_objective(logits: Node, y, T: float, include_true_class: bool = True) -> Node:
    """Soft set size with the perturbed true-class logit as threshold.

    The true class contributes sigma((f_y - f_y)/T) = sigma(0) = 0.5 whatever
    the perturbation, so it is added as that constant rather than routed through
    the graph; the gradient is unaffected either way.
    """
    tau = ops.take_label(logits, y)
    members = ops.sigmoid(ops.scale(ops.shift(logits, tau), 1.0 / T))
    others = 1.0 - np.eye(logits.shape[-1])[np.asarray(y, dtype=np.int64)]
    total = ops.sum(ops.mul(members, others), axis=-1)
    if include_true_class:
        total = ops.add(total, 0.5)
    return total


def input_gradient(params: MlpParams, x_in: np.ndarray, y, objective: Objective) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective values and their gradients w.r.t. the inputs."""
    tape = Tape()
    xn = tape.leaf(x_in, name="x")
    logits = logits_on_tape(tape, param_nodes(tape, params, differentiable=False), xn)
    rows = objective(logits, y)
    grads = backward(tape, ops.sum(rows), [xn])
    return rows.value.copy(), grads[xn]


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    Y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if Y.shape != (X.shape[0],):
        raise ValueError(f"{Y.size} labels for {X.shape[0]} inputs")
    return X, Y, single


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)


def _finish(outcomes: list[AttackOutcome], single: bool):
    return outcomes[0] if single else outcomes


# -- baselines ----------------------------------------------------------------

def fgsm(x, y, params: MlpParams, budget: AttackBudget):
    """Single step of size r along the sign (Linf) or unit (L2) CE gradient."""
    X, Y, single = _as_batch(x, y)
    _check_in_box(X, budget)
    before, g = input_gradient(params, X, Y, cross_entropy_rows)
    zero = ~np.any(g != 0, axis=-1)
    eps = project(budget.r * _direction(g, budget.norm), X, budget)
    after, _ = input_gradient(params, X + eps, Y, cross_entropy_rows)
    outcomes = [AttackOutcome(eps[i], [float(before[i]), float(after[i])], True, 1, bool(zero[i]))
                for i in range(len(X))]
    return _finish(outcomes, single)


def pgd(x, y, params: MlpParams, budget: AttackBudget, steps: int = 10, step_size: float = 2 / 255,
        seed: int = 0, init: str = "uniform", indices=None):
    """Projected sign-gradient ascent on cross-entropy; returns the last iterate.

    ``init="zero"`` starts from eps = 0 instead of a uniform ball sample.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    X, Y, single = _as_batch(x, y)
    _check_in_box(X, budget)
    n, d = X.shape
    if init == "zero":
        eps = np.zeros_like(X)
    elif init == "uniform":
        eps = project(_initial_rows(n, d, budget, seed, indices), X, budget)
    else:
        raise ValueError(f"unknown init {init!r}")
    traces = [[] for _ in range(n)]
    zero = np.zeros(n, dtype=bool)
    for _ in range(steps):
        vals, g = input_gradient(params, X + eps, Y, cross_entropy_rows)
        zero |= ~np.any(g != 0, axis=-1)
        for i in range(n):
            traces[i].append(float(vals[i]))
        eps = project(eps + step_size * _direction(g, budget.norm), X, budget)
    vals, _ = input_gradient(params, X + eps, Y, cross_entropy_rows)
    for i in range(n):
        traces[i].append(float(vals[i]))
    outcomes = [AttackOutcome(eps[i], traces[i], False, steps, bool(zero[i])) for i in range(n)]
    return _finish(outcomes, single)


# -- OPSA ---------------------------------------------------------------------

def opsa(x, y, params: MlpParams, budget: AttackBudget, T1: float = 1.0, steps: int = 10,
         eta: float = 2 / 255, seed: int = 0, beta1: float = 0.9, beta2: float = 0.999,
         eps_hat: float = 1e-8, include_true_class: bool = True, indices=None, init=None):
    """Maximise the soft set size with the perturbed true-class logit as threshold.

    Projected Adam ascent from a uniform ball sample, at most ``steps`` updates,
    stopping early for a row once ``||eps_new - eps||_inf < 1e-6``. Each row
    returns its best-objective iterate. ``indices`` names the per-row RNG keys
    (defaults to 0..n-1); ``init`` overrides the random start.
    """
    if not T1 > 0:
        raise ValueError("T1 must be positive")
    if not eta > 0:
        raise ValueError("eta must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X, Y, single = _as_batch(x, y)
    _check_in_box(X, budget)
    n, d = X.shape

    def objective(logits, labels):
        return opsa_objective(logits, labels, T1, include_true_class)

    start = _initial_rows(n, d, budget, seed, indices) if init is None else np.asarray(init, dtype=np.float64).reshape(n, d)
    eps = project(start, X, budget)
    state = AdamState.zeros(eps.shape, beta1, beta2, eps_hat)
    best_val = np.full(n, -np.inf)
    best_eps = eps.copy()
    traces = [[] for _ in range(n)]
    iterations = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)

    def consider(rows, vals, points):
        for i, v, p in zip(rows, vals, points):
            traces[i].append(float(v))
            if v > best_val[i]:
                best_val[i] = v
                best_eps[i] = p

    for _ in range(steps):
        rows = np.flatnonzero(~converged)
        if rows.size == 0:
            break
        vals, g = input_gradient(params, X[rows] + eps[rows], Y[rows], objective)
        consider(rows, vals, eps[rows])
        # All active rows have taken the same number of steps, so they share t.
        sub = AdamState(state.t, state.m[rows], state.v[rows], beta1, beta2, eps_hat)
        sub, update = adam_step(sub, g, eta)
        state.m[rows], state.v[rows] = sub.m, sub.v
        state = replace(state, t=sub.t)
        new = project(eps[rows] + update, X[rows], budget)
        moved = np.max(np.abs(new - eps[rows]), axis=-1)
        eps[rows] = new
        iterations[rows] += 1
        converged[rows[moved < CONVERGENCE_TOL]] = True

    vals, _ = input_gradient(params, X + eps, Y, objective)
    consider(range(n), vals, eps)
    outcomes = [AttackOutcome(best_eps[i].copy(), traces[i], bool(converged[i]), int(iterations[i]))
                for i in range(n)]
    return _finish(outcomes, single)


def perturb(method: str, X, y, params: MlpParams, budget: AttackBudget, **kwargs) -> tuple[np.ndarray, list[AttackOutcome]]:
    """Run an attack over a batch and return ``(X + eps*, outcomes)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("perturb expects a 2-D batch")
    if len(X) == 0:
        return X.copy(), []
    if method == "fgsm":
        outcomes = fgsm(X, y, params, budget)
    elif method == "pgd":
        outcomes = pgd(X, y, params, budget, **kwargs)
    elif method == "opsa":
        outcomes = opsa(X, y, params, budget, **kwargs)
    else:
        raise ValueError(f"unknown attack {method!r}")
    eps = np.stack([o.epsilon_star for o in outcomes])
    return X + eps, outcomes
