"""Minibatch SGD, Rectified Adam, decoupled weight decay and cosine annealing.

Optimizers work on flat ``{name: ndarray}`` dicts and update parameters in
place. Only names present in ``grads`` are touched, so a frozen block (which
produces no gradient entries) is never modified, not even by weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float = 0.0
    period: int = 1

    def __post_init__(self):
        if self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.period <= 0:
            raise ValueError("annealing period must be positive")


def lr_at(schedule: LrSchedule, t) -> float:
    """Cosine-annealed learning rate, no restarts. ``t`` past the period clamps to ``lr_min``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if t >= schedule.period:
        return float(schedule.lr_min)
    cos = math.cos(math.pi * t / schedule.period)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + cos)


@dataclass(frozen=True)
class DecayConfig:
    wd: float = 0.0
    exclude_suffixes: tuple = (".b",)

    def __post_init__(self):
        if self.wd < 0:
            raise ValueError("weight decay must be non-negative")

    def applies_to(self, name: str) -> bool:
        return self.wd > 0 and not name.endswith(self.exclude_suffixes)


def _check_shapes(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise ValueError(f"shape mismatch for {name}: param {params[name].shape}, grad {np.shape(g)}")


def _decay(params, grads, lr, decay):
    if decay is None:
        return
    for name in grads:
        if decay.applies_to(name):
            params[name] *= 1.0 - lr * decay.wd


@dataclass
class OptimizerState:
    """Moments and step counters for one model replica."""

    kind: str
    hyper: dict
    t: int = 0
    slots: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        out = {}
        for name, slot in self.slots.items():
            for key, arr in slot.items():
                out[f"{key}:{name}"] = arr
        return out


class SGD:
    """Heavy-ball SGD: ``v <- mu v + g; p <- p - lr v``, then decoupled decay."""

    def __init__(self, momentum: float = 0.9, decay: DecayConfig | None = None):
        self.decay = decay
        self.state = OptimizerState("sgd", {"momentum": momentum})

    def step(self, params, grads, lr):
        sgd_step(self.state, params, grads, lr, self.decay)


class RAdam:
    """Rectified Adam with decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay: DecayConfig | None = None):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.decay = decay
        self.state = OptimizerState("radam", {"beta1": beta1, "beta2": beta2, "eps": eps})

    def step(self, params, grads, lr):
        radam_step(self.state, params, grads, lr, self.decay)


def sgd_step(state: OptimizerState, params, grads, lr, decay: DecayConfig | None = None):
    _check_shapes(params, grads)
    mu = state.hyper["momentum"]
    for name, g in grads.items():
        slot = state.slots.setdefault(name, {"velocity": np.zeros_like(params[name])})
        v = slot["velocity"]
        v *= mu
        v += g
        params[name] -= lr * v
        state.steps[name] = state.steps.get(name, 0) + 1
    _decay(params, grads, lr, decay)
    state.t += 1


def rectification(t: int, beta2: float):
    """Return ``(rho_t, r_t)``; ``r_t`` is None while the variance is intractable (rho_t <= 4)."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return rho_t, None
    r = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    return rho_t, r


def radam_step(state: OptimizerState, params, grads, lr, decay: DecayConfig | None = None):
    """One RAdam update.

    Step counters are kept per parameter so a block unfrozen mid-training gets
    its own warm-up and bias correction.
    """
    _check_shapes(params, grads)
    b1, b2, eps = state.hyper["beta1"], state.hyper["beta2"], state.hyper["eps"]
    for name, g in grads.items():
        slot = state.slots.setdefault(
            name, {"m": np.zeros_like(params[name]), "v": np.zeros_like(params[name])})
        t = state.steps.get(name, 0) + 1
        state.steps[name] = t
        m, v = slot["m"], slot["v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / (1.0 - b1 ** t)
        _, r = rectification(t, b2)
        if r is None:
            params[name] -= lr * m_hat
        else:
            v_hat = np.sqrt(v / (1.0 - b2 ** t))
            params[name] -= lr * r * m_hat / (v_hat + eps)
    _decay(params, grads, lr, decay)
    state.t += 1


def make_optimizer(kind: str, decay: DecayConfig | None = None, **hyper):
    if kind == "sgd":
        return SGD(momentum=hyper.get("momentum", 0.9), decay=decay)
    if kind == "radam":
        return RAdam(beta1=hyper.get("beta1", 0.9), beta2=hyper.get("beta2", 0.999),
                     eps=hyper.get("eps", 1e-8), decay=decay)
    raise ValueError(f"unknown optimizer {kind!r}")
