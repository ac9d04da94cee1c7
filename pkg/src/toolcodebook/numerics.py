"""Small float64 numeric kernel: params, AdamW, cosine decay, gradient checks.

Everything here works on plain numpy arrays. There is no autodiff graph; each
model op in this package supplies its own analytic backward and
``finite_difference_grad`` is the oracle the tests hold them to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EPS = 1e-12
DTYPE = np.float64


class DegenerateVectorError(ValueError):
    """A vector with (numerically) zero norm was used where a direction is needed."""


class DegenerateInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


class ScheduleExhaustedError(ValueError):
    pass


class OracleFailureError(FloatingPointError):
    pass


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    steps: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        if not np.all(np.isfinite(self.value)):
            raise ValueError("param initialised with non-finite entries")
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= EPS or nv <= EPS:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise, max-shifted."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 1 or logits.size < 2:
        raise ShapeError("logits must be a vector of size >= 2")
    if not 0 <= target < logits.size:
        raise IndexError(f"target {target} out of range for {logits.size} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


@dataclass(frozen=True)
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def step(self, param: Param, lr: float) -> Param:
        return adamw_step(param, lr, self.betas, self.eps, self.weight_decay)


def adamw_step(param: Param, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> Param:
    if not param.trainable:
        return param
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError("non-finite gradient")
    b1, b2 = betas
    param.steps += 1
    t = param.steps
    if weight_decay:
        param.value *= 1.0 - lr * weight_decay
    param.m *= b1
    param.m += (1.0 - b1) * g
    param.v *= b2
    param.v += (1.0 - b2) * g * g
    m_hat = param.m / (1.0 - b1**t)
    v_hat = param.v / (1.0 - b2**t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()
    return param


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"bad schedule: {self}")

    def __call__(self, step: int) -> float:
        return cosine_decay_lr(self, step)


def cosine_decay_lr(schedule: LrSchedule, step: int) -> float:
    if step > schedule.total_steps:
        raise ScheduleExhaustedError(f"step {step} past schedule end {schedule.total_steps}")
    if step < 0:
        raise ValueError("negative step")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * (step + 1) / w
    span = schedule.total_steps - w
    if span == 0:
        return 0.0
    t = step - w
    return 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * t / span))


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` around ``x`` (any shape)."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleFailureError(f"f is not finite around coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error, safe when both sides are ~0."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
