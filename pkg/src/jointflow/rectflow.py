"""Rectified-flow training, Euler integration, and the velocity-score identity.

Training draws fresh standard-normal starting points and fresh per-example
times every minibatch, pairing them with shuffled target samples; this keeps
the regression target an unbiased draw of the linear-interpolant objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import VelocityNet

__all__ = [
    "TimeGrid",
    "FlowModel",
    "TrainingDivergedError",
    "train_rectified",
    "euler_step",
    "score_from_velocity",
    "velocity",
]

T_SINGULARITY_EPS = 1e-6


class TrainingDivergedError(RuntimeError):
    """Raised when the held-out loss stops making progress."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots ``0 = t_0 < ... < t_n = 1``."""

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_steps + 1)


@dataclass
class FlowModel:
    """Base velocity with an optional residual correction, over a N(0, I) start."""

    base: VelocityNet
    residual: VelocityNet | None = None

    def __post_init__(self):
        if self.residual is not None and self.residual.dim != self.base.dim:
            raise ValueError("residual dimension does not match the base net")

    @property
    def dim(self) -> int:
        return self.base.dim


def velocity(model: FlowModel, x: np.ndarray, t, include_residual: bool = True) -> np.ndarray:
    out = nnet.forward(model.base, x, t)
    if include_residual and model.residual is not None:
        out = out + nnet.forward(model.residual, x, t)
    return out


def euler_step(
    model: FlowModel,
    x: np.ndarray,
    t_lo: float,
    t_hi: float,
    extra_velocity: np.ndarray | None = None,
) -> np.ndarray:
    """One explicit Euler step ``x + (t_hi - t_lo) * total_velocity`` at the left knot."""
    if not t_lo < t_hi:
        raise ValueError("t_lo must be < t_hi")
    vel = velocity(model, x, t_lo)
    if extra_velocity is not None:
        vel = vel + extra_velocity
    return x + (t_hi - t_lo) * vel


def score_from_velocity(v_out: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    """Model score implied by the velocity, ``(t v - x) / (1 - t)``.

    Singular at ``t = 1``; callers must stay at ``t <= 1 - 1e-6`` (the Euler
    loop only ever evaluates at the left knot, so ``t <= t_{n-1}``).
    """
    if t >= 1.0 - T_SINGULARITY_EPS:
        raise ValueError(f"score undefined this close to t=1 (t={t})")
    return (t * np.asarray(v_out) - np.asarray(x)) / (1.0 - t)


def train_rectified(
    targets: np.ndarray,
    net: VelocityNet,
    frozen_base: VelocityNet | None = None,
    epochs: int = 100,
    batch_size: int = 1000,
    rng: np.random.Generator | None = None,
    lr: float = 1e-4,
    lr_final: float | None = None,
    weight_decay: float = 1e-3,
    holdout: int = 2000,
    patience: int = 20,
) -> tuple[VelocityNet, list[float]]:
    """Train ``net`` on linear-interpolant velocity regression.

    With ``frozen_base`` given, ``net`` learns only the residual: the batch
    target becomes ``(X1 - X0) - frozen_base(Xt, t)``.

    Per step: fresh ``X0 ~ N(0, I)``, targets drawn from a shuffled pool,
    fresh ``t ~ U[0, 1]`` per example, one optimizer update.  The learning
    rate decays linearly from ``lr`` to ``lr_final`` across all steps.

    Returns the trained net (mutated in place) and the per-epoch held-out
    losses.  Raises :class:`TrainingDivergedError` if the held-out loss is
    non-finite or sits more than 5% above the best seen for ``patience``
    consecutive epochs.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[0] == 0:
        raise ValueError("targets must be a nonempty (N, d) matrix")
    if targets.shape[1] != net.dim:
        raise ValueError("target dimension does not match the net")
    if rng is None:
        rng = np.random.default_rng(0)
    if lr_final is None:
        lr_final = lr

    n_total = targets.shape[0]
    holdout = min(holdout, max(n_total // 10, 1))
    perm = rng.permutation(n_total)
    pool = targets[perm[holdout:]]
    if pool.shape[0] < batch_size:
        batch_size = pool.shape[0]

    # One fixed held-out interpolant batch, reused so the curve is comparable
    # across epochs.
    hold_x1 = targets[perm[:holdout]]
    hold_x0 = rng.standard_normal(hold_x1.shape)
    hold_t = rng.uniform(size=hold_x1.shape[0])
    hold_xt = (1.0 - hold_t)[:, None] * hold_x0 + hold_t[:, None] * hold_x1
    hold_target = hold_x1 - hold_x0
    if frozen_base is not None:
        hold_target = hold_target - nnet.forward(frozen_base, hold_xt, hold_t)

    state = nnet.init_optimizer(net, lr=lr, weight_decay=weight_decay)
    batches_per_epoch = max(pool.shape[0] // batch_size, 1)
    total_steps = epochs * batches_per_epoch
    history: list[float] = []
    best = np.inf
    bad_streak = 0
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(pool.shape[0])
        for b in range(batches_per_epoch):
            x1 = pool[order[b * batch_size : (b + 1) * batch_size]]
            x0 = rng.standard_normal(x1.shape)
            t = rng.uniform(size=x1.shape[0])
            xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
            target = x1 - x0
            if frozen_base is not None:
                target = target - nnet.forward(frozen_base, xt, t)
            frac = step / max(total_steps - 1, 1)
            state.lr = lr + (lr_final - lr) * frac
            grads = nnet.grad_params(net, xt, t, target)
            nnet.optimizer_step(net, state, grads)
            step += 1
        loss = nnet.batch_loss(net, hold_xt, hold_t, hold_target)
        history.append(loss)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"held-out loss became non-finite at epoch {epoch}")
        if loss < best:
            best = loss
        if loss > best * 1.05:
            bad_streak += 1
            if bad_streak >= patience:
                raise TrainingDivergedError(
                    f"held-out loss stuck above best ({best:.6g}) for {patience} epochs"
                )
        else:
            bad_streak = 0
    return net, history
