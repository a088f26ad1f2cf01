"""Optimizers and learning-rate policies.

Covers Adam with bias correction, cosine annealing with warm restarts,
geometric learning-rate range sweeps, and discriminative per-group
slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, ScheduleStateError
from .report_io import write_csv


class Adam:
    """Adam over a model's trainable parameters, keyed by layer group.

    Frozen groups are never registered, so their parameters stay
    bit-identical through any number of steps.
    """

    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.slots = []  # (group_name, tensor, m, v)
        for group_name, _, p in model.parameters(trainable_only=True):
            self.slots.append((group_name, p, np.zeros_like(p.data), np.zeros_like(p.data)))

    def step(self, group_lrs):
        """One update; ``group_lrs`` maps group name -> learning rate."""
        for _, p, _, _ in self.slots:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise DivergenceError("non-finite gradient encountered", iteration=self.t)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group_name, p, m, v in self.slots:
            lr = group_lrs[group_name]
            if lr < 0:
                raise ConfigurationError(f"negative learning rate {lr} for group {group_name}")
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def sgd_step(model, group_lrs):
    """Plain gradient step on the trainable parameters."""
    for group_name, _, p in model.parameters(trainable_only=True):
        if p.grad is not None:
            p.data -= group_lrs[group_name] * p.grad


@dataclass
class CosineRestartSchedule:
    """Cosine annealing from lr_max down to lr_min over a cycle, then restart."""

    lr_max: float
    lr_min: float
    cycle_length: int
    cycle_mult: int = 1
    t_cur: int = field(default=0)

    def __post_init__(self):
        if not (0 < self.lr_min < self.lr_max):
            raise ConfigurationError(
                f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_length < 1 or self.cycle_mult < 1:
            raise ConfigurationError("cycle_length and cycle_mult must be >= 1")

    def lr(self):
        return cosine_lr(self, self.t_cur)

    def step(self):
        """Advance one iteration; restart (and grow) the cycle at its boundary."""
        self.t_cur += 1
        if self.t_cur >= self.cycle_length:
            self.cycle_length *= self.cycle_mult
            self.t_cur = 0


def cosine_lr(schedule: CosineRestartSchedule, t_cur: int) -> float:
    """Cosine interpolation between lr_max (t=0) and lr_min (t=T_i)."""
    if t_cur < 0 or t_cur > schedule.cycle_length:
        raise ScheduleStateError(
            f"cycle position {t_cur} outside [0, {schedule.cycle_length}]")
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t_cur / schedule.cycle_length))


def slice_lrs(lo: float, hi: float, group_count: int):
    """Geometrically spaced per-group rates with exact endpoints.

    Base group gets ``lo``, head gets ``hi``.
    """
    if lo <= 0 or hi <= 0 or lo > hi:
        raise ConfigurationError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    if group_count < 1:
        raise ConfigurationError(f"group_count must be >= 1, got {group_count}")
    if group_count == 1:
        if lo != hi:
            raise ConfigurationError("a single group requires lo == hi")
        return [lo]
    rates = []
    for g in range(group_count):
        t = g / (group_count - 1)
        rates.append(lo ** (1.0 - t) * hi ** t)
    rates[0] = lo
    rates[-1] = hi
    return rates


@dataclass
class LrFinderTrace:
    """Record of one geometric learning-rate sweep."""

    lrs: list
    raw_losses: list
    smoothed_losses: list
    divergence_index: int | None
    suggested_lr: float

    def rows(self):
        return list(zip(range(len(self.lrs)), self.lrs, self.raw_losses, self.smoothed_losses))

    def save_csv(self, path):
        write_csv(path, ["iter", "lr", "raw_loss", "smoothed_loss"], self.rows())


def geometric_lrs(lr_lo, lr_hi, num_iters):
    if not (0 < lr_lo < lr_hi):
        raise ConfigurationError(f"need 0 < lr_lo < lr_hi, got {lr_lo}, {lr_hi}")
    if num_iters < 2:
        raise ConfigurationError(f"num_iters must be >= 2, got {num_iters}")
    ratio = lr_hi / lr_lo
    lrs = [lr_lo * ratio ** (i / (num_iters - 1)) for i in range(num_iters)]
    lrs[-1] = lr_hi
    return lrs


def lr_sweep(step_fn, lr_lo, lr_hi, num_iters, smoothing=0.98, divergence_factor=4.0):
    """Drive ``step_fn(lr) -> pre-step loss`` over a geometric lr ladder.

    Losses pass through a bias-corrected exponential moving average; the
    sweep stops once the smoothed loss exceeds ``divergence_factor`` times
    the best smoothed loss seen. Suggested lr sits at the steepest
    negative slope of the smoothed curve, falling back to a tenth of the
    lr at the minimum when the curve never descends.
    """
    lrs = geometric_lrs(lr_lo, lr_hi, num_iters)
    raw, smoothed = [], []
    ema = 0.0
    best = math.inf
    divergence_index = None
    for i, lr in enumerate(lrs):
        loss = float(step_fn(lr))
        if not math.isfinite(loss):
            if i == 0:
                raise DivergenceError(
                    f"loss non-finite at first step: lr_lo={lr_lo} too high", iteration=0)
            raw.append(loss)
            smoothed.append(math.inf)
            divergence_index = i
            break
        ema = smoothing * ema + (1.0 - smoothing) * loss
        smooth = ema / (1.0 - smoothing ** (i + 1))
        raw.append(loss)
        smoothed.append(smooth)
        if smooth < best:
            best = smooth
        elif smooth > divergence_factor * best:
            divergence_index = i
            break
    used_lrs = lrs[:len(raw)]
    slopes = [b - a for a, b in zip(smoothed, smoothed[1:])]
    if slopes and min(slopes) < 0:
        # the step taken at lr i produced the loss recorded at i+1
        suggested = used_lrs[int(np.argmin(slopes))]
    else:
        suggested = used_lrs[int(np.argmin(smoothed))] / 10.0
    return LrFinderTrace(used_lrs, raw, smoothed, divergence_index, suggested)


def lr_range_test(model, batches, lr_lo, lr_hi, num_iters, smoothing=0.98):
    """Sweep learning rates on a throwaway copy of the model's state.

    One plain-SGD minibatch step per rate (SGD keeps the sweep's
    divergence point tied to raw step size); the model is restored
    bit-exactly afterwards, running statistics included.
    """
    from . import tensor as T

    batches = list(batches)
    if not batches:
        raise ConfigurationError("lr_range_test needs at least one batch")
    snapshot = model.state_dict()
    counter = {"i": 0}

    def step(lr):
        x, y = batches[counter["i"] % len(batches)][:2]
        counter["i"] += 1
        model.zero_grad()
        loss = T.softmax_cross_entropy(model.forward(x, training=True), y)
        if math.isfinite(loss.item()):
            loss.backward()
            sgd_step(model, {name: lr for name in model.group_names})
        return loss.item()

    try:
        return lr_sweep(step, lr_lo, lr_hi, num_iters, smoothing=smoothing)
    finally:
        model.load_state_dict(snapshot)
