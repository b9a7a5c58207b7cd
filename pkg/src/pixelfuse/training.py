"""Two-stage training: joint pretraining, supervised finetuning, and a
reconstruction finetune, all end to end over the full model."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autodiff import GradReport, NonFiniteError, grad_check
from .checkpoint import Checkpoint, save_checkpoint, seed_digest
from .data import (BOS, EOS, SEP, MixtureConfig, SampleRecord, Scene, sample_batch, stratified_uniforms,
                   tokenize)
from .flow import interpolate, sample_t
from .masking import MaskSchedule, masking_active, select_mask
from .model import (Batch, Example, ModelConfig, UnifiedTransformer, build_model, collate,
                    flow_head, per_record_ce, prompt_example)
from .rng import SeededStream

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft", "recon_finetune")
TASK_COLUMNS = ("understanding", "generation", "editing", "text_only", "reconstruction")
METRIC_HEADER = ("step", "ce_loss", "flow_mse_loss", "total", "masking_active_fraction",
                 *(f"n_{t}" for t in TASK_COLUMNS), "lr", "und_ce_loss")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    sft_lr: float = 2e-4        # keeps the pretrain:SFT ratio of 5:1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    warmup_fraction: float = 0.02
    flow_weight: float = 1.0
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 0
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    mask: MaskSchedule = field(default_factory=MaskSchedule)
    # total pretraining length the mask schedule and warmup refer to; 0 means start + steps
    mask_total_steps: int = 0
    t_dist: str = "logit-normal"
    t_mean: float = -0.8
    t_std: float = 0.8
    cfg_drop: float = 0.1
    caption_lm_loss: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.lr <= 0 or self.sft_lr <= 0 or self.steps < 0 or self.flow_weight < 0 or self.batch_size < 1:
            raise ValueError("need lr > 0, steps >= 0, flow_weight >= 0, batch_size >= 1")


@dataclass(frozen=True)
class DataConfig:
    corpus: str = ""           # exported dataset directory; empty -> procedural scenes
    n_scenes: int = 0          # >0: fixed seeded corpus of this many scenes
    one_object: bool = False   # restrict the procedural / fixed corpus to 1-object scenes
    holdout: int = 0           # held-out (color, shape, cell) combinations (1-object corpus)
    max_objects: int = 2
    qa_fraction: float = 0.0   # share of pretraining understanding slots that are QA
    edit_fraction: float = 0.5
    seed: int = 1234


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
                   lr: float, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0,
                   grad_clip: float = 0.0, eps: float = 1e-8) -> AdamState:
    """One AdamW update in place: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).

    Gradients are clipped to ``grad_clip`` global norm first (0 disables).
    """
    names = list(params)
    ps = [params[n] for n in names]
    gs = [grads[n] for n in names]
    for n, p, g in zip(names, ps, gs):
        if g.shape != p.shape:
            raise ValueError(f"{n}: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
    norm = float(torch.stack([x.double() for x in torch._foreach_norm(gs)]).norm())
    if not math.isfinite(norm):
        bad = next(n for n, g in zip(names, gs) if not bool(torch.isfinite(g).all()))
        raise NonFiniteError(f"non-finite gradient in {bad}")
    if grad_clip > 0 and norm > grad_clip:
        gs = torch._foreach_mul(gs, grad_clip / norm)
    if not state.m:
        state.m = {n: torch.zeros_like(p) for n, p in zip(names, ps)}
        state.v = {n: torch.zeros_like(p) for n, p in zip(names, ps)}
    ms = [state.m[n] for n in names]
    vs = [state.v[n] for n in names]
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        torch._foreach_mul_(ms, beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - beta1)
        torch._foreach_mul_(vs, beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - beta2)
        denom = torch._foreach_sqrt(torch._foreach_div(vs, bc2))
        torch._foreach_add_(denom, eps)
        update = torch._foreach_div(torch._foreach_div(ms, bc1), denom)
        if weight_decay:
            torch._foreach_add_(update, ps, alpha=weight_decay)
        torch._foreach_add_(ps, update, alpha=-lr)
    return state


# -- examples and loss -------------------------------------------------------------

def record_to_example(rec: SampleRecord, config: ModelConfig, stream: SeededStream, *,
                      t_dist: str = "uniform", t_mean: float = 0.0, t_std: float = 1.0,
                      mask: bool = False, mask_ratio: float = 0.5, cfg_drop: float = 0.0,
                      caption_lm_loss: bool = False, mask_stream: SeededStream | None = None) -> Example:
    """Turn a data record into a model example with fresh noise and timestep.

    Mask plans draw from ``mask_stream`` when given, so toggling masking
    leaves the noise sequence untouched.
    """
    grid = config.grid
    mask_plan = select_mask(mask_stream or stream, grid.token_count, mask_ratio).indices if mask else ()
    if rec.task == "text_only":
        return prompt_example("text_only", grid, target_ids=tokenize(rec.text))
    if rec.task == "understanding":
        if rec.question is not None:
            return prompt_example("understanding", grid, image=rec.image,
                                  condition_ids=tokenize(rec.question, eos=False),
                                  target_ids=[SEP] + tokenize(rec.answer, bos=False), mask_condition=mask_plan)
        return prompt_example("understanding", grid, image=rec.image,
                              target_ids=tokenize(rec.caption), mask_condition=mask_plan)

    x1 = rec.image
    x0 = stream.normal(x1.shape)
    t = sample_t(stream, t_dist, config.eps_t, t_mean, t_std)
    xt = interpolate(x1, x0, t)
    if rec.task == "generation":
        ids = tokenize(rec.caption)
        if cfg_drop > 0 and stream.uniform() < cfg_drop:
            ids = [BOS, EOS]
        ex = prompt_example("generation", grid, condition_ids=ids, xt=xt, t=t, x1=x1, x0=x0, mask_noisy=mask_plan)
        if caption_lm_loss and len(ids) > 2:
            ex.segments[0].role = "text_target"
        return ex
    if rec.task == "editing":
        return prompt_example("editing", grid, image=rec.source, condition_ids=tokenize(rec.instruction),
                              xt=xt, t=t, x1=x1, x0=x0, mask_noisy=mask_plan)
    if rec.task == "reconstruction":
        return prompt_example("reconstruction", grid, image=rec.source, xt=xt, t=t, x1=x1, x0=x0,
                              mask_noisy=mask_plan)
    raise ValueError(f"unknown task {rec.task}")


@dataclass
class LossParts:
    total: torch.Tensor
    ce: float | None
    flow: float | None
    n_ce: int
    n_flow: int
    ce_understanding: float | None = None


def joint_step_loss(model: UnifiedTransformer, batch: Batch, flow_weight: float = 1.0) -> LossParts:
    """Per-record CE plus flow_weight times the per-record velocity loss,
    summed and divided by the batch size.

    Each objective is weighted by its share of the batch, so the mixture
    ratio sets how strongly each loss is trained, as when a step samples one
    task at a time. The reported ``ce`` and ``flow`` are per-task means."""
    if batch.size == 0:
        raise ValueError("empty batch")
    hidden = model(batch)
    total = hidden.new_zeros(())
    ce_val = flow_val = None
    n_ce = int(torch.unique(batch.ce_example).numel()) if batch.ce_pos.numel() else 0
    ce_und = None
    if n_ce:
        _, records, per_record = per_record_ce(model, hidden, batch)
        total = total + per_record.sum() / batch.size
        ce_val = float(per_record.detach().mean())
        und = [i for i, b in enumerate(records.tolist()) if batch.layouts[b].task == "understanding"]
        if und:
            ce_und = float(per_record.detach()[und].mean())
    n_flow = int(batch.flow_batch.numel())
    if n_flow and batch.x1 is None:
        raise ValueError("noisy-image records need clean targets for the flow loss")
    if n_flow:
        x_pred = flow_head(model, hidden, batch)
        t = batch.flow_t.view(-1, 1, 1, 1)
        v_pred = (x_pred - batch.xt) / (1 - t)
        v_true = (batch.x1 - batch.xt) / (1 - t)
        per_record = ((v_pred - v_true) ** 2).flatten(1).mean(dim=1)
        total = total + flow_weight * per_record.sum() / batch.size
        flow_val = float(per_record.detach().mean())
    return LossParts(total, ce_val, flow_val, n_ce, n_flow, ce_und)


GRADCHECK_CONFIG = ModelConfig(d_model=16, n_layers=2, n_heads=2, ffn_mult=2, max_seq_len=40, dtype="f64")


def gradcheck_model(config: ModelConfig = GRADCHECK_CONFIG, seed: int = 0, scale: float = 0.3) -> UnifiedTransformer:
    """Model with non-degenerate weights everywhere (the default init zeroes
    the flow head and biases, which would make their checks vacuous)."""
    model = build_model(config, seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def gradcheck_batch(config: ModelConfig, seed: int = 0) -> Batch:
    """A small mixed batch with masking active on both masked segment kinds:
    masked generation, masked captioning, QA and text-only."""
    from .data import caption, gen_scene, qa_pair, rasterize, text_sentence
    stream = SeededStream(seed)
    hw = config.image_size
    scene = gen_scene(stream, 2)
    img = rasterize(scene, hw, hw)
    q, a = qa_pair(scene, stream)
    recs = [
        SampleRecord("generation", scene, img, caption=caption(scene)),
        SampleRecord("understanding", scene, img, caption=caption(scene)),
        SampleRecord("understanding", scene, img, question=q, answer=a),
        SampleRecord("text_only", None, None, text=text_sentence(stream)),
    ]
    masks = [True, True, False, False]
    return collate([record_to_example(r, config, stream, mask=m) for r, m in zip(recs, masks)], config)


class _LossModule(torch.nn.Module):
    def __init__(self, model: UnifiedTransformer, batch: Batch, flow_weight: float):
        super().__init__()
        self.model, self.batch, self.flow_weight = model, batch, flow_weight

    def forward(self):
        return joint_step_loss(self.model, self.batch, self.flow_weight).total


def model_grad_check(model: UnifiedTransformer, batch: Batch, flow_weight: float = 1.0,
                     eps: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    """Compare autograd gradients of the joint loss with central differences
    over every parameter tensor."""
    wrapper = _LossModule(model, batch, flow_weight)
    base = {n: p.detach() for n, p in model.named_parameters()}

    def loss(params):
        return torch.func.functional_call(wrapper, {f"model.{n}": p for n, p in params.items()}, ())

    return grad_check(loss, base, eps=eps, tolerance=tolerance)


# -- metrics ----------------------------------------------------------------------

@dataclass
class MetricRow:
    step: int
    ce_loss: float | None
    flow_mse_loss: float | None
    total: float
    masking_active_fraction: float
    counts: dict[str, int]
    lr: float
    und_ce_loss: float | None = None    # CE over understanding records only

    def as_csv_row(self) -> list[str]:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [str(self.step), fmt(self.ce_loss), fmt(self.flow_mse_loss), fmt(self.total),
                fmt(self.masking_active_fraction), *(str(self.counts.get(t, 0)) for t in TASK_COLUMNS),
                fmt(self.lr), fmt(self.und_ce_loss)]


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for r in rows:
        w.writerow(r.as_csv_row())
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (None if v == "" else float(v)) for k, v in r.items()})
    return out


class _Accumulator:
    def __init__(self):
        self.reset()

    def reset(self):
        self.ce, self.flow, self.total, self.und_ce, self.masked, self.slots = [], [], [], [], 0, 0
        self.counts = {t: 0 for t in TASK_COLUMNS}

    def row(self, step: int, lr: float) -> MetricRow:
        mean = lambda xs: float(np.mean(xs)) if xs else None
        return MetricRow(step, mean(self.ce), mean(self.flow), mean(self.total) or 0.0,
                         self.masked / max(self.slots, 1), dict(self.counts), lr, mean(self.und_ce))


# -- stage runner -------------------------------------------------------------------

def model_from_checkpoint(ckpt: Checkpoint) -> UnifiedTransformer:
    model = UnifiedTransformer(ckpt.model_config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.tensors[name]))
    return model


def checkpoint_from_model(model: UnifiedTransformer, step: int, stage: str, seed: int,
                          state: AdamState | None = None, extra: dict | None = None) -> Checkpoint:
    tensors = {n: p.detach().numpy().copy() for n, p in model.named_parameters()}
    opt = None
    if state is not None and state.m:
        opt = {"step": state.step,
               "m": {n: t.numpy().copy() for n, t in state.m.items()},
               "v": {n: t.numpy().copy() for n, t in state.v.items()}}
    return Checkpoint(model.config, tensors, step, stage, opt, seed_digest(seed, step), extra or {})


@dataclass
class StageResult:
    checkpoint: Checkpoint
    metrics: list[MetricRow]


def lr_at(step: int, config: TrainConfig, horizon: int | None = None) -> float:
    """Linear warmup over ``warmup_fraction`` of ``horizon`` steps (default: this run's length), then constant."""
    warm = max(1, round(config.warmup_fraction * (horizon or config.steps)))
    base = config.sft_lr if config.stage == "sft" else config.lr
    return base * min(1.0, (step + 1) / warm)


def run_stage(config: TrainConfig, model_config: ModelConfig | None = None, init: Checkpoint | None = None,
              scenes: Sequence[Scene] | None = None, data: DataConfig = DataConfig(),
              out_dir=None, progress: bool = False) -> StageResult:
    """Train one stage and return the final checkpoint plus logged metric rows.

    ``sft`` and ``recon_finetune`` must start from a checkpoint. A ``pretrain``
    run started from a pretrain checkpoint continues its step counter and
    optimizer moments, which is how the masking ablation branches off a shared
    half-budget checkpoint. Data, noise and mask draws are addressed by global
    step and batch slot, and warmup follows the global step, so a run resumed
    from its own checkpoint continues exactly as an uninterrupted one would.
    """
    if config.stage != "pretrain" and init is None:
        raise ValueError(f"stage {config.stage} requires an input checkpoint")
    if init is not None:
        if model_config is not None and model_config != init.model_config:
            raise ValueError("checkpoint model config does not match the requested model config")
        model_config = init.model_config
    model_config = model_config or ModelConfig()

    root = SeededStream(config.seed)
    init_stream, data_stream, noise_stream, mask_stream = root.split(4)
    if init is None:
        model = build_model(model_config, seed=init_stream.seed_int())
        start = 0
    else:
        model = model_from_checkpoint(init)
        start = init.step if (config.stage == "pretrain" and init.stage == "pretrain") else 0
    if config.steps == 0:
        return StageResult(init if init is not None else checkpoint_from_model(model, 0, "init", config.seed), [])

    state = AdamState()
    if init is not None and init.optimizer is not None and start > 0:
        state.step = init.optimizer["step"]
        state.m = {n: torch.from_numpy(a.copy()) for n, a in init.optimizer["m"].items()}
        state.v = {n: torch.from_numpy(a.copy()) for n, a in init.optimizer["v"].items()}

    horizon = config.mask_total_steps or (start + config.steps)
    stage_index = STAGES.index(config.stage)
    params = dict(model.named_parameters())
    hw = (model_config.image_size, model_config.image_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[MetricRow] = []
    acc = _Accumulator()
    model.train()
    for k in range(config.steps):
        step = start + k
        examples = []
        # every draw for a slot is addressed by (stage, step, slot): runs that differ only in
        # mixture or mask schedule share tasks, scenes, t and noise wherever they can
        slots = [tuple(s.keyed(stage_index, step, slot) for s in (data_stream, noise_stream, mask_stream))
                 for slot in range(config.batch_size)]
        # task uniforms are stratified over the batch, so per-step task counts are fixed up to one
        perm = data_stream.keyed(stage_index, step).sample_without_replacement(config.batch_size,
                                                                               config.batch_size)
        task_u = stratified_uniforms(perm, [d.uniform() for d, _, _ in slots])
        for (slot_data, slot_noise, slot_mask), u in zip(slots, task_u):
            rec = sample_batch(config.mixture, config.stage, 1, slot_data, scenes, max_objects=data.max_objects,
                               qa_fraction=data.qa_fraction, edit_fraction=data.edit_fraction, hw=hw,
                               task_uniforms=[u])[0]
            use_mask = False
            if config.stage == "pretrain" and rec.task in ("generation", "understanding"):
                use_mask = masking_active(min(step, horizon), horizon, slot_mask, config.mask)
            acc.masked += use_mask
            acc.slots += 1
            acc.counts[rec.task] += 1
            examples.append(record_to_example(
                rec, model_config, slot_noise, t_dist=config.t_dist, t_mean=config.t_mean,
                t_std=config.t_std, mask=use_mask, mask_ratio=config.mask.ratio,
                cfg_drop=config.cfg_drop if config.stage != "recon_finetune" else 0.0,
                caption_lm_loss=config.caption_lm_loss, mask_stream=slot_mask))
        batch = collate(examples, model_config)
        parts = joint_step_loss(model, batch, config.flow_weight)
        model.zero_grad(set_to_none=True)
        parts.total.backward()
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
        lr = lr_at(step, config, horizon)
        optimizer_step(params, grads, state, lr, config.beta1, config.beta2, config.weight_decay,
                       config.grad_clip)
        if parts.ce is not None:
            acc.ce.append(parts.ce)
        if parts.flow is not None:
            acc.flow.append(parts.flow)
        if parts.ce_understanding is not None:
            acc.und_ce.append(parts.ce_understanding)
        acc.total.append(float(parts.total.detach()))
        done = k + 1
        if done % config.log_every == 0 or done == config.steps:
            row = acc.row(step + 1, lr)
            rows.append(row)
            acc.reset()
            if progress:
                log.info("step %d ce=%s flow=%s", row.step, row.ce_loss, row.flow_mse_loss)
        if out is not None and config.ckpt_every and done % config.ckpt_every == 0 and done != config.steps:
            save_checkpoint(out / f"ckpt_{step + 1:07d}.pxfu",
                            checkpoint_from_model(model, step + 1, config.stage, config.seed, state))

    ckpt = checkpoint_from_model(model, start + config.steps, config.stage, config.seed, state,
                                 extra={"train_config": config_to_dict(config)})
    if out is not None:
        save_checkpoint(out / "final.pxfu", ckpt)
        (out / "metrics.csv").write_text(metrics_csv(rows))
    return StageResult(ckpt, rows)


def recon_finetune(config: TrainConfig, ckpt: Checkpoint, scenes: Sequence[Scene] | None = None,
                   data: DataConfig = DataConfig(), out_dir=None) -> StageResult:
    return run_stage(replace(config, stage="recon_finetune"), init=ckpt, scenes=scenes, data=data,
                     out_dir=out_dir)


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d
