"""Inference: Euler sampling for generation, editing and reconstruction, and
greedy decoding for question answering and captioning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import BOS, EOS, SEP, VOCAB, detokenize, tokenize
from .flow import DEFAULT_EPS_T, TimeGrid, euler_step, uniform_grid, x_to_velocity
from .model import Example, Segment, UnifiedTransformer, collate, flow_head, prompt_example
from .rng import SeededStream


@dataclass(frozen=True)
class SampleRunConfig:
    num_euler_steps: int = 50
    seed: int = 0
    guidance: float = 1.0
    grid: str = "uniform"

    def __post_init__(self):
        if self.num_euler_steps < 1:
            raise ValueError("num_euler_steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.grid != "uniform":
            raise ValueError(f"unknown grid type {self.grid}")

    def time_grid(self) -> TimeGrid:
        return uniform_grid(self.num_euler_steps)


# (x at t, clamped query t) -> predicted clean image, batched over the first axis
Predictor = Callable[[np.ndarray, float], np.ndarray]


def euler_sample(predict: Predictor, x_init: np.ndarray, grid: TimeGrid, eps_t: float = DEFAULT_EPS_T,
                 predict_uncond: Predictor | None = None, guidance: float = 1.0,
                 clip: bool = True) -> np.ndarray:
    """Integrate from noise (t=0) to data (t=1) with clean-image predictions.

    The model is queried at min(t, 1 - eps_t); the last step still lands on
    t=1. Clipping to [-1, 1] happens once, at the end.
    """
    x = np.asarray(x_init, dtype=np.float64)
    steps = grid.steps
    for t, t_next in zip(steps[:-1], steps[1:]):
        tq = min(t, 1.0 - eps_t)
        v = x_to_velocity(predict(x, tq), x, tq, eps_t)
        if predict_uncond is not None and guidance != 1.0:
            v_u = x_to_velocity(predict_uncond(x, tq), x, tq, eps_t)
            v = v_u + guidance * (v - v_u)
        x = euler_step(x, v, t, t_next)
    return np.clip(x, -1.0, 1.0) if clip else x


def _model_predictor(model: UnifiedTransformer, build: Callable[[int, np.ndarray, float], Example]) -> Predictor:
    @torch.no_grad()
    def predict(x: np.ndarray, t: float) -> np.ndarray:
        examples = [build(i, x[i], t) for i in range(x.shape[0])]
        batch = collate(examples, model.config)
        hidden = model(batch)
        return flow_head(model, hidden, batch).double().numpy()
    return predict


def initial_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return SeededStream(seed).normal(shape)


def _noise_batch(n: int, shape, seed: int, seeds: Sequence[int] | None) -> np.ndarray:
    seeds = list(seeds) if seeds is not None else [seed] * n
    return np.stack([initial_noise(shape, s) for s in seeds])


def generate_batch(model: UnifiedTransformer, prompts: Sequence[str], run: SampleRunConfig = SampleRunConfig(),
                   seeds: Sequence[int] | None = None) -> np.ndarray:
    """Text-to-image for several prompts at once; returns (B, H, W, C) in [-1, 1]."""
    grid = model.config.grid
    ids = [tokenize(p) for p in prompts]

    def build(cond):
        return lambda i, x, t: prompt_example("generation", grid, condition_ids=cond[i], xt=x, t=t)

    x0 = _noise_batch(len(prompts), grid.image_shape, run.seed, seeds)
    uncond = [[BOS, EOS]] * len(prompts)
    return euler_sample(_model_predictor(model, build(ids)), x0, run.time_grid(), model.config.eps_t,
                        _model_predictor(model, build(uncond)), run.guidance)


def generate(model: UnifiedTransformer, prompt: str, run: SampleRunConfig = SampleRunConfig()) -> np.ndarray:
    return generate_batch(model, [prompt], run)[0]


def edit_batch(model: UnifiedTransformer, sources: Sequence[np.ndarray], instructions: Sequence[str],
               run: SampleRunConfig = SampleRunConfig(), seeds: Sequence[int] | None = None) -> np.ndarray:
    grid = model.config.grid
    for s in sources:
        if tuple(s.shape) != grid.image_shape:
            raise ValueError(f"source image shape {tuple(s.shape)} != {grid.image_shape}")
    ids = [tokenize(i) for i in instructions]

    def build(cond):
        return lambda i, x, t: prompt_example("editing", grid, image=sources[i], condition_ids=cond[i], xt=x, t=t)

    x0 = _noise_batch(len(sources), grid.image_shape, run.seed, seeds)
    uncond = [[BOS, EOS]] * len(sources)
    return euler_sample(_model_predictor(model, build(ids)), x0, run.time_grid(), model.config.eps_t,
                        _model_predictor(model, build(uncond)), run.guidance)


def edit(model: UnifiedTransformer, source: np.ndarray, instruction: str,
         run: SampleRunConfig = SampleRunConfig()) -> np.ndarray:
    return edit_batch(model, [source], [instruction], run)[0]


def reconstruct_batch(model: UnifiedTransformer, images: Sequence[np.ndarray],
                      run: SampleRunConfig = SampleRunConfig(), seeds: Sequence[int] | None = None) -> np.ndarray:
    grid = model.config.grid
    build = lambda i, x, t: prompt_example("reconstruction", grid, image=images[i], xt=x, t=t)
    x0 = _noise_batch(len(images), grid.image_shape, run.seed, seeds)
    return euler_sample(_model_predictor(model, build), x0, run.time_grid(), model.config.eps_t)


@torch.no_grad()
def greedy_decode_batch(model: UnifiedTransformer, prefixes: Sequence[Example], start_token: int,
                        max_new: int) -> list[list[int]]:
    """Greedy continuation of several prefixes in lockstep; stops per row at EOS."""
    targets = [[start_token] for _ in prefixes]
    outs: list[list[int]] = [[] for _ in prefixes]
    live = list(range(len(prefixes)))
    for _ in range(max_new):
        if not live:
            break
        exs = [Example(prefixes[i].task, list(prefixes[i].segments) + [Segment("text_target", ids=targets[i])],
                       prefixes[i].t) for i in live]
        batch = collate(exs, model.config)
        hidden = model(batch)
        last = torch.tensor([ex.layout.length - 1 for ex in exs])
        logits = model.lm_logits(hidden[torch.arange(len(exs)), last])
        nxt = torch.argmax(logits, dim=-1).tolist()
        still = []
        for i, tok in zip(live, nxt):
            if tok == EOS:
                continue
            outs[i].append(tok)
            targets[i] = targets[i] + [tok]
            still.append(i)
        live = still
    return outs


def answer_batch(model: UnifiedTransformer, images: Sequence[np.ndarray], questions: Sequence[str],
                 max_tokens: int = 4) -> list[str]:
    grid = model.config.grid
    prefixes = [prompt_example("understanding", grid, image=img, condition_ids=tokenize(q, eos=False))
                for img, q in zip(images, questions)]
    return [detokenize(ids) for ids in greedy_decode_batch(model, prefixes, SEP, max_tokens)]


def answer(model: UnifiedTransformer, image: np.ndarray, question: str, max_tokens: int = 4) -> str:
    return answer_batch(model, [image], [question], max_tokens)[0]


def caption_batch(model: UnifiedTransformer, images: Sequence[np.ndarray], max_tokens: int = 24) -> list[str]:
    grid = model.config.grid
    prefixes = [prompt_example("understanding", grid, image=img) for img in images]
    return [detokenize(ids) for ids in greedy_decode_batch(model, prefixes, BOS, max_tokens)]


def answer_ids_in_vocab(text: str) -> bool:
    return all(w in VOCAB for w in text.split())
