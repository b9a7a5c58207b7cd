"""Scene pools, checkpoint evaluation, the masking ablation and the
generation:understanding ratio sweep."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import (CELLS, COLORS, SHAPES, MixtureConfig, Scene, all_qa_pairs, all_single_object_scenes,
                   caption, corpus_scenes, gen_scene, import_dataset, rasterize, tokenize)
from .evaluation import compositional_check, psnr, ssim
from .masking import MaskSchedule
from .model import UnifiedTransformer, collate, lm_logits_and_ce, prompt_example
from .rng import SeededStream
from .sampling import SampleRunConfig, answer_batch, generate_batch, reconstruct_batch
from .training import DataConfig, StageResult, TrainConfig, model_from_checkpoint, run_stage

EVAL_CHUNK = 64


# -- scene pools ------------------------------------------------------------------

def fixed_corpus(n_scenes: int, seed: int, max_objects: int = 2, one_object: bool = False) -> list[Scene]:
    """``n_scenes`` distinct scenes drawn from a seeded stream."""
    stream = SeededStream(seed)
    out: dict[Scene, None] = {}
    limit = 288 if one_object or max_objects == 1 else 10**6
    if n_scenes > limit:
        raise ValueError(f"only {limit} distinct one-object scenes exist")
    while len(out) < n_scenes:
        n = 1 if one_object else 1 + stream.integers(max_objects)
        out.setdefault(gen_scene(stream, n))
    return list(out)


def holdout_combos(n: int, seed: int) -> list[tuple[str, str, int]]:
    """``n`` held-out (color, shape, cell) combinations such that every
    (color, shape), (color, cell) and (shape, cell) pair still occurs in training."""
    combos = [(c, s, k) for c in COLORS for s in SHAPES for k in range(len(CELLS))]
    stream = SeededStream(seed)
    for _ in range(10000):
        pick = [combos[i] for i in sorted(stream.sample_without_replacement(len(combos), n).tolist())]
        kept = set(combos) - set(pick)
        pairs = [{(c, s) for c, s, _ in kept}, {(c, k) for c, _, k in kept}, {(s, k) for _, s, k in kept}]
        if all(len(p) == full for p, full in zip(pairs, (18, 24, 12))):
            return pick
    raise RuntimeError("could not find a valid holdout set")


def holdout_split(n: int, seed: int) -> tuple[list[Scene], list[Scene]]:
    """(train, held-out) split of all one-object scenes."""
    held = set(holdout_combos(n, seed))
    train, test = [], []
    for sc in all_single_object_scenes():
        o = sc.objects[0]
        (test if (o.color, o.shape, o.cell) in held else train).append(sc)
    return train, test


def scene_pools(data: DataConfig) -> tuple[list[Scene] | None, list[Scene]]:
    """(training scenes or None for fresh procedural scenes, evaluation scenes)."""
    if data.corpus:
        scenes = corpus_scenes(import_dataset(data.corpus))
        return scenes, scenes
    if data.holdout:
        return holdout_split(data.holdout, data.seed)
    if data.n_scenes:
        scenes = fixed_corpus(data.n_scenes, data.seed, data.max_objects, data.one_object)
        return scenes, scenes
    return None, fixed_corpus(64, data.seed + 1, data.max_objects, data.one_object)


# -- evaluation ---------------------------------------------------------------------

def _chunks(seq: Sequence, n: int = EVAL_CHUNK):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


@torch.no_grad()
def caption_ce(model: UnifiedTransformer, scenes: Sequence[Scene]) -> float:
    """Teacher-forced CE (nats/token, averaged per caption) of canonical captions."""
    grid, hw = model.config.grid, model.config.image_size
    vals = []
    for part in _chunks(list(scenes)):
        exs = [prompt_example("understanding", grid, image=rasterize(s, hw, hw), target_ids=tokenize(caption(s)))
               for s in part]
        batch = collate(exs, model.config)
        vals.append(float(lm_logits_and_ce(model, model(batch), batch)[1]) * len(part))
    return sum(vals) / len(scenes)


def generate_scenes(model: UnifiedTransformer, scenes: Sequence[Scene], run: SampleRunConfig) -> np.ndarray:
    """One sample per scene from its canonical caption; scene i uses seed run.seed + i."""
    out = []
    for start in range(0, len(scenes), EVAL_CHUNK):
        part = scenes[start:start + EVAL_CHUNK]
        seeds = [run.seed + start + i for i in range(len(part))]
        out.append(generate_batch(model, [caption(s) for s in part], run, seeds))
    return np.concatenate(out)


def generation_eval(model: UnifiedTransformer, scenes: Sequence[Scene], run: SampleRunConfig) -> dict:
    hw = model.config.image_size
    images = generate_scenes(model, scenes, run)
    psnrs = [psnr(img, rasterize(s, hw, hw)) for img, s in zip(images, scenes)]
    checks = [compositional_check(img, s) for img, s in zip(images, scenes)]
    return {"psnr": psnrs, "compositional": [c["all"] for c in checks],
            "compositional_accuracy": float(np.mean([c["all"] for c in checks])), "images": images}


def vqa_items(scenes: Sequence[Scene]) -> list[tuple[Scene, str, str]]:
    """Every distinct question for every scene, so accuracy carries no question-sampling noise."""
    return [(s, q, a) for s in scenes for q, a in all_qa_pairs(s)]


def vqa_accuracy(model: UnifiedTransformer, items: Sequence[tuple[Scene, str, str]]) -> float:
    hw = model.config.image_size
    correct = 0
    for part in _chunks(list(items)):
        preds = answer_batch(model, [rasterize(s, hw, hw) for s, _, _ in part], [q for _, q, _ in part])
        correct += sum(p == a for p, (_, _, a) in zip(preds, part))
    return correct / len(items)


def reconstruction_eval(model: UnifiedTransformer, scenes: Sequence[Scene], run: SampleRunConfig) -> dict:
    hw = model.config.image_size
    psnrs, ssims = [], []
    for start in range(0, len(scenes), EVAL_CHUNK):
        part = scenes[start:start + EVAL_CHUNK]
        imgs = [rasterize(s, hw, hw) for s in part]
        out = reconstruct_batch(model, imgs, run, [run.seed + start + i for i in range(len(part))])
        psnrs += [psnr(o, i) for o, i in zip(out, imgs)]
        ssims += [ssim(o, i) for o, i in zip(out, imgs)]
    return {"psnr": psnrs, "ssim": ssims, "mean_psnr": float(np.mean(psnrs)), "mean_ssim": float(np.mean(ssims))}


# -- masking ablation -----------------------------------------------------------------

@dataclass
class AblationRow:
    branch: str
    vqa_accuracy: float
    compositional_accuracy: float
    final_ce: float | None
    final_mse: float | None


@dataclass
class AblationResult:
    rows: list[AblationRow]
    shared: Checkpoint
    branches: dict[str, StageResult]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["branch", "vqa_accuracy", "compositional_accuracy", "final_ce", "final_mse"])
        for r in self.rows:
            w.writerow([r.branch, repr(r.vqa_accuracy), repr(r.compositional_accuracy),
                        "" if r.final_ce is None else repr(r.final_ce),
                        "" if r.final_mse is None else repr(r.final_mse)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'branch':<10} {'VQA acc':>8} {'comp acc':>9}"]
        for r in self.rows:
            lines.append(f"{r.branch:<10} {100 * r.vqa_accuracy:8.2f} {100 * r.compositional_accuracy:9.2f}")
        return "\n".join(lines) + "\n"

    def row(self, branch: str) -> AblationRow:
        return next(r for r in self.rows if r.branch == branch)


def _tail_mean(values: Sequence[float | None], fraction: float = 0.2) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    k = max(1, int(round(fraction * len(vals))))
    return float(np.mean(vals[-k:]))


def ablation_report(train: TrainConfig, model_config=None, data: DataConfig = DataConfig(),
                    eval_scenes: int = 200, run: SampleRunConfig = SampleRunConfig(), out_dir=None,
                    shared_steps: int | None = None) -> AblationResult:
    """Train a shared checkpoint for half the budget, then branch with and
    without masking for the remaining half and evaluate both.

    ``train.steps`` is the full budget; ``shared_steps`` overrides the split
    point (the remaining budget may be zero). The mask schedule is keyed to
    the full budget, so masking switches on inside the branch phase.
    """
    total = train.steps
    shared_steps = total // 2 if shared_steps is None else shared_steps
    out = Path(out_dir) if out_dir is not None else None
    scenes, _ = scene_pools(data)
    base = replace(train, stage="pretrain", mask_total_steps=total)
    shared = run_stage(replace(base, steps=shared_steps), model_config, scenes=scenes, data=data,
                       out_dir=out / "shared" if out else None).checkpoint
    eval_pool = fixed_corpus(eval_scenes, data.seed + 7, data.max_objects)
    items = vqa_items(eval_pool)
    branches, rows = {}, []
    for name, mask in (("masked", train.mask), ("unmasked", MaskSchedule.off())):
        res = run_stage(replace(base, steps=total - shared_steps, mask=mask), init=shared, scenes=scenes,
                        data=data, out_dir=out / name if out else None)
        branches[name] = res
        model = model_from_checkpoint(res.checkpoint).eval()
        rows.append(AblationRow(
            name, vqa_accuracy(model, items),
            generation_eval(model, eval_pool, run)["compositional_accuracy"],
            _tail_mean([r.ce_loss for r in res.metrics]), _tail_mean([r.flow_mse_loss for r in res.metrics])))
    result = AblationResult(rows, shared, branches)
    if out is not None:
        (out / "ablation.csv").write_text(result.csv())
        (out / "ablation.txt").write_text(result.table())
    return result


# -- ratio sweep -------------------------------------------------------------------------

DEFAULT_RATIOS = ("8g2u", "7g3u", "5g5u", "3g7u")


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        for val in np.unique(v):
            idx = v == val
            r[idx] = r[idx].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom else 0.0


@dataclass
class SweepPoint:
    tag: str
    gen_share: float
    und_share: float
    final_mse: float
    final_ce: float


@dataclass
class SweepResult:
    points: list[SweepPoint]
    results: dict[str, StageResult]

    @property
    def mse_rho(self) -> float:
        return spearman([p.gen_share for p in self.points], [p.final_mse for p in self.points])

    @property
    def ce_rho(self) -> float:
        return spearman([p.und_share for p in self.points], [p.final_ce for p in self.points])

    def strictly_ordered(self) -> bool:
        by_gen = sorted(self.points, key=lambda p: p.gen_share)
        by_und = sorted(self.points, key=lambda p: p.und_share)
        mse_ok = all(a.final_mse > b.final_mse for a, b in zip(by_gen, by_gen[1:]))
        ce_ok = all(a.final_ce > b.final_ce for a, b in zip(by_und, by_und[1:]))
        return mse_ok and ce_ok

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ratio", "gen_share", "und_share", "final_smoothed_mse", "final_smoothed_ce"])
        for p in self.points:
            w.writerow([p.tag, repr(p.gen_share), repr(p.und_share), repr(p.final_mse), repr(p.final_ce)])
        return buf.getvalue()


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("PIXELFUSE_THREADS", "1")))
    except ValueError:
        raise ValueError("PIXELFUSE_THREADS must be an integer") from None


def ratio_sweep(train: TrainConfig, ratios: Sequence[str] = DEFAULT_RATIOS, model_config=None,
                data: DataConfig = DataConfig(), out_dir=None, smooth_fraction: float = 0.2,
                threads: int | None = None) -> SweepResult:
    """Equal-budget pretraining runs, one per ``xgyu`` mixture.

    Final losses are the mean of the last ``smooth_fraction`` of logged rows.
    The CE used for ordering is the understanding-record CE, so the fixed
    text-only share does not dilute it.
    """
    scenes, _ = scene_pools(data)
    out = Path(out_dir) if out_dir is not None else None
    mixtures = [MixtureConfig.parse(r) for r in ratios]

    def one(mix: MixtureConfig) -> StageResult:
        cfg = replace(train, stage="pretrain", mixture=mix)
        return run_stage(cfg, model_config, scenes=scenes, data=data,
                         out_dir=out / mix.tag if out else None)

    with ThreadPoolExecutor(max_workers=threads or worker_threads()) as pool:
        results = dict(zip([m.tag for m in mixtures], pool.map(one, mixtures)))
    points = []
    for mix in mixtures:
        rows = results[mix.tag].metrics
        keep = 1 - mix.text_only_fraction
        points.append(SweepPoint(mix.tag, round(keep * mix.gen_ratio / 10, 12), round(keep * mix.und_ratio / 10, 12),
                                 _tail_mean([r.flow_mse_loss for r in rows], smooth_fraction),
                                 _tail_mean([r.und_ce_loss for r in rows], smooth_fraction)))
    result = SweepResult(points, results)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(result.csv())
    return result
