"""Masked visual feature learning.

A random subset of patch tokens has its content embedding swapped for one
learnable mask vector; positional and timestep terms are still added on top.
Generation examples are still supervised on every patch, understanding
examples on their text only. Masking switches on late in pretraining and then
fires per example with a fixed probability.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .rng import SeededStream


@dataclass(frozen=True)
class MaskPlan:
    indices: tuple[int, ...]
    ratio: float

    @property
    def empty(self) -> bool:
        return not self.indices


@dataclass(frozen=True)
class MaskSchedule:
    activation_fraction: float = 0.4
    apply_probability: float = 0.5
    ratio: float = 0.5

    def __post_init__(self):
        for name in ("activation_fraction", "apply_probability", "ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def off(cls) -> "MaskSchedule":
        return cls(activation_fraction=0.0, apply_probability=0.0)


def select_mask(stream: SeededStream, token_count: int, ratio: float) -> MaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    k = int(round(ratio * token_count))
    idx = stream.sample_without_replacement(token_count, k)
    return MaskPlan(tuple(sorted(int(i) for i in idx)), ratio)


def apply_mask(content: torch.Tensor, plan: MaskPlan, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace the planned rows of an (N, d) content embedding with the mask vector.

    The model applies the same substitution inside ``UnifiedTransformer.embed``
    before adding positions and timestep; this standalone form is what the
    tests probe.
    """
    n = content.shape[0]
    if any(i < 0 or i >= n for i in plan.indices):
        raise IndexError(f"mask index out of range for {n} tokens")
    if plan.empty:
        return content
    sel = torch.zeros(n, dtype=torch.bool)
    sel[list(plan.indices)] = True
    return torch.where(sel[:, None], mask_embedding.expand_as(content), content)


def masking_active(step: int, total_pretrain_steps: int, stream: SeededStream, schedule: MaskSchedule) -> bool:
    """Whether one example at ``step`` gets masked."""
    if step > total_pretrain_steps:
        raise ValueError("step exceeds total pretraining steps")
    if schedule.apply_probability <= 0.0 or schedule.activation_fraction <= 0.0:
        return False
    threshold = (1.0 - schedule.activation_fraction) * total_pretrain_steps
    if step < threshold - 1e-9:
        return False
    return stream.bernoulli(schedule.apply_probability)


@dataclass(frozen=True)
class LossPositions:
    flow_patches: tuple[int, ...]   # noisy-image patch indices in the flow loss
    text_targets: bool              # whether text-target CE is computed
    masked_segment: str | None      # which image segment the plan applies to


def masked_targets(task: str, plan: MaskPlan, token_count: int) -> LossPositions:
    if task in ("generation", "editing", "reconstruction"):
        return LossPositions(tuple(range(token_count)), False, "image_noisy")
    if task == "understanding":
        return LossPositions((), True, "image_condition")
    if task == "text_only":
        return LossPositions((), True, None)
    raise ValueError(f"unknown task {task}")

