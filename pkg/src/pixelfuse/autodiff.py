"""Reverse-mode gradients, a central-difference oracle, and checked primitives.

Gradients come from torch autograd. The finite-difference oracle below never
touches autograd, so the two routes stay independent. Execution is pinned to
deterministic kernels and a single intra-op thread, which fixes reduction
order and makes repeated runs bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F


def set_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _require(cond: bool, prim: str, a, b) -> None:
    if not cond:
        raise ShapeError(f"{prim}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


# -- checked primitives ------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
             "matmul", a, b)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _require(False, "add", a, b)
    return a + b


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _require(False, "multiply", a, b)
    return a * b


def layernorm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    _require(weight.shape == x.shape[-1:], "layernorm", x, weight)
    _require(bias.shape == x.shape[-1:], "layernorm", x, bias)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {tuple(table.shape)}")
    return table[ids]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    _require(logits.dim() == 2 and targets.shape == logits.shape[:1], "cross_entropy", logits, targets)
    return F.cross_entropy(logits, targets)


def squared_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean of elementwise squared differences."""
    _require(a.shape == b.shape, "squared_error", a, b)
    return ((a - b) ** 2).mean()


# -- gradients ---------------------------------------------------------------

Computation = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


def _as_tensors(params: Mapping[str, object]) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in params.items():
        t = torch.as_tensor(np.asarray(p)) if not isinstance(p, torch.Tensor) else p
        out[name] = t
    return out


def forward_backward(computation: Computation, params: Mapping[str, object]) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate a scalar computation and its gradient w.r.t. every parameter."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in _as_tensors(params).items()}
    value = computation(leaves)
    if value.dim() != 0:
        raise ShapeError(f"computation must return a scalar, got shape {tuple(value.shape)}")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    named = {}
    for (k, leaf), g in zip(leaves.items(), grads):
        named[k] = torch.zeros_like(leaf) if g is None else g.detach()
    return float(value.detach()), named


def finite_diff(computation: Computation, params: Mapping[str, object], eps: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central-difference gradient estimate, one coordinate at a time (f64)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: v.detach().to(torch.float64).clone() for k, v in _as_tensors(params).items()}
    out = {}
    with torch.no_grad():
        for name, tensor in base.items():
            flat = tensor.view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                f_plus = float(computation(base))
                flat[i] = orig - eps
                f_minus = float(computation(base))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError(f"non-finite evaluation at {name}[{i}]")
                grad[i] = (f_plus - f_minus) / (2.0 * eps)
            out[name] = grad.view_as(tensor)
    return out


@dataclass
class GradReport:
    errors: dict[str, float]
    eps: float
    tolerance: float
    max_rel_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_rel_error = max(self.errors.values(), default=0.0)
        self.passed = self.max_rel_error <= self.tolerance

    def format(self) -> str:
        lines = [f"{name:40s} rel_err={err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max_rel_err={self.max_rel_error:.3e} eps={self.eps:g} "
                     f"tol={self.tolerance:g} pass={self.passed}")
        return "\n".join(lines)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Largest coordinate gap, scaled by the tensor's largest gradient magnitude."""
    scale = max(float(a.abs().max()), float(b.abs().max()), 1e-12) if a.numel() else 1.0
    return float((a - b).abs().max()) / scale if a.numel() else 0.0


def grad_check(computation: Computation, params: Mapping[str, object],
               eps: float = 1e-5, tolerance: float = 1e-6) -> GradReport:
    params64 = {k: v.to(torch.float64) for k, v in _as_tensors(params).items()}
    _, grads = forward_backward(computation, params64)
    fd = finite_diff(computation, params64, eps)
    errors = {k: relative_error(grads[k], fd[k]) for k in params64}
    return GradReport(errors, eps, tolerance)
