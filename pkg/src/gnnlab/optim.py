"""Adam, learning-rate schedules, and width-scaling (µP-style) rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimError(RuntimeError):
    pass


@dataclass
class Param:
    """Named parameter; ``grad`` is filled by a backward pass before stepping."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    lr_multiplier: float = 1.0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.lr_multiplier <= 0:
            raise ValueError(f"{self.name}: lr_multiplier must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def for_param(p: Param) -> "AdamState":
        return AdamState(m=np.zeros_like(p.value), v=np.zeros_like(p.value))


def adam_step(params: dict, states: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Effective step size per param is lr * lr_multiplier. Aborts without
    touching anything if any gradient is missing or non-finite.
    """
    for path in sorted(params):
        p = params[path]
        if p.grad is None:
            raise OptimError(f"param {path!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise OptimError(f"non-finite gradient for param {path!r}")
        if p.grad.shape != p.value.shape:
            raise OptimError(f"param {path!r}: grad shape {p.grad.shape} != value shape "
                             f"{p.value.shape}")
    for path in sorted(params):
        p = params[path]
        st = states[path]
        st.t += 1
        g = p.grad
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.t)
        v_hat = st.v / (1.0 - beta2 ** st.t)
        p.value -= lr * p.lr_multiplier * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not (0 < self.warmup_epochs < self.total_epochs):
            raise ValueError("need 0 < warmup_epochs < total_epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Linear ramp from base/warmup at epoch 0 to base at epoch warmup-1, then
    linear decay to base/total at the final epoch."""
    w, total, base = schedule.warmup_epochs, schedule.total_epochs, schedule.base_lr
    if not (0 <= epoch < total):
        raise ValueError(f"epoch {epoch} outside schedule range [0, {total})")
    if epoch < w:
        return base * (epoch + 1) / w
    final = base / total
    frac = (epoch - (w - 1)) / (total - w)
    return base + (final - base) * frac


# ---------------------------------------------------------------------------
# Width/depth scaling rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    """What a parameter is, for scaling purposes.

    role: "input" (encoder weights), "hidden" (interior weights),
    "head_out" (final task-head linear weights), "bias" (biases, gains,
    attention bias tables). ``residual_out`` marks the closing linear of a
    residual branch, which picks up the depth factor.
    """

    path: str
    shape: tuple
    role: str
    fan_in: int = 0
    residual_out: bool = False

    def __post_init__(self):
        if self.role not in ("input", "hidden", "head_out", "bias"):
            raise ValueError(f"{self.path}: bad role {self.role!r}")
        if self.role != "bias" and self.fan_in <= 0:
            raise ValueError(f"{self.path}: weight needs fan_in")


def mup_scale(specs, width_multiplier: float, depth_multiplier: float = 1.0,
              base_std: float = 1.0) -> dict:
    """Per-param (init std, lr multiplier) for a width multiplier m.

    Weights initialize at base_std/sqrt(fan_in). Interior weights train at
    lr/m; input encoders and all bias-like params at lr; task-head output
    weights shrink their init by a further 1/sqrt(m) and train at lr/m.
    Residual-branch closing weights shrink init by 1/sqrt(depth_multiplier).
    """
    if width_multiplier <= 0 or depth_multiplier <= 0:
        raise ValueError("multipliers must be positive")
    m, d = float(width_multiplier), float(depth_multiplier)
    out = {}
    for spec in specs:
        if spec.role == "bias":
            std, mult = 0.0, 1.0
        else:
            std = base_std / np.sqrt(spec.fan_in)
            if spec.role == "input":
                mult = 1.0
            elif spec.role == "hidden":
                mult = 1.0 / m
            else:  # head_out
                std /= np.sqrt(m)
                mult = 1.0 / m
            if spec.residual_out:
                std /= np.sqrt(d)
        out[spec.path] = (float(std), float(mult))
    return out
