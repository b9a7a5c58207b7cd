"""Rectified-flow algebra with clean-image prediction.

Convention: t=0 is pure noise, t=1 is data. The network predicts the clean
image; the velocity it implies is compared against the straight-line velocity.
All functions accept numpy arrays or torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SeededStream

DEFAULT_EPS_T = 1e-3


class SingularityError(ValueError):
    pass


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x1, x0, t):
    """Point on the straight path between noise x0 (t=0) and data x1 (t=1)."""
    _same_shape(x1, x0, "interpolate")
    return t * x1 + (1 - t) * x0


def true_velocity(x1, x0):
    _same_shape(x1, x0, "true_velocity")
    return x1 - x0


def x_to_velocity(x_pred, xt, t, eps_t: float = DEFAULT_EPS_T):
    """Velocity implied by a clean-image prediction at time t.

    ``t`` may be a scalar or a per-example array broadcastable against ``xt``.
    """
    _same_shape(x_pred, xt, "x_to_velocity")
    t_max = float(t.max()) if hasattr(t, "max") else float(t)
    if t_max > 1 - eps_t + 1e-12:
        raise SingularityError(f"t={t_max} exceeds 1 - eps_t = {1 - eps_t}; clamp the time grid")
    return (x_pred - xt) / (1 - t)


def v_loss(v_pred, v):
    """Mean squared error between predicted and true velocity."""
    _same_shape(v_pred, v, "v_loss")
    return ((v_pred - v) ** 2).mean()


def euler_step(xt, v_pred, t: float, t_next: float):
    if not t_next > t:
        raise ValueError(f"euler_step needs t_next > t, got {t} -> {t_next}")
    return xt + (t_next - t) * v_pred


@dataclass
class FlowSample:
    x1: np.ndarray
    x0: np.ndarray
    t: float
    xt: np.ndarray
    v: np.ndarray

    @classmethod
    def build(cls, x1: np.ndarray, x0: np.ndarray, t: float) -> "FlowSample":
        return cls(x1, x0, t, interpolate(x1, x0, t), true_velocity(x1, x0))


@dataclass
class ModelPrediction:
    x_pred: object
    v_pred: object


@dataclass(frozen=True)
class TimeGrid:
    steps: tuple[float, ...]

    def query_times(self, eps_t: float = DEFAULT_EPS_T) -> list[float]:
        """Times at which the model is evaluated, clamped below the pole."""
        return [min(t, 1 - eps_t) for t in self.steps[:-1]]


def uniform_grid(k: int, eps_t: float = DEFAULT_EPS_T) -> TimeGrid:
    if k < 1:
        raise ValueError(f"need at least one step, got K={k}")
    steps = tuple(i / k for i in range(k)) + (1.0,)
    return TimeGrid(steps)


def sample_t(stream: SeededStream, dist: str = "uniform", eps_t: float = DEFAULT_EPS_T,
             mean: float = 0.0, std: float = 1.0) -> float:
    """Training-time draw of t, always in [0, 1 - eps_t]."""
    hi = 1.0 - eps_t
    if dist == "uniform":
        return float(stream.uniform()) * hi
    if dist == "logit-normal":
        z = mean + std * stream.normal()
        return min(1.0 / (1.0 + math.exp(-z)), hi)
    raise ValueError(f"unknown t distribution {dist!r}")
