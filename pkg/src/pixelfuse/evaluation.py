"""Pixel metrics, the compositional checker, and attention-map extraction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import BACKGROUNDS, CELLS, COLORS, PALETTE, Scene, cell_box, tokenize
from .model import UnifiedTransformer, collate, prompt_example
from .patches import to_uint8
from .pnm import write_pgm

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _unit(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _check_pair(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def psnr(a, b) -> float:
    """PSNR in dB on the [0, 1] scale; identical images report the 99 dB cap."""
    _check_pair(a, b)
    mse = float(np.mean((_unit(a) - _unit(b)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) and channels, uniform weights,
    population statistics, constants (0.01)^2 and (0.03)^2 on the [0, 1] scale."""
    _check_pair(a, b)
    x, y = _unit(a), _unit(b)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    w = SSIM_WINDOW
    if x.shape[0] < w or x.shape[1] < w:
        raise ValueError(f"SSIM needs images of at least {w}x{w}")
    from numpy.lib.stride_tricks import sliding_window_view
    xw = sliding_window_view(x, (w, w), axis=(0, 1))
    yw = sliding_window_view(y, (w, w), axis=(0, 1))
    mx, my = xw.mean(axis=(-2, -1)), yw.mean(axis=(-2, -1))
    vx = xw.var(axis=(-2, -1))
    vy = yw.var(axis=(-2, -1))
    cov = ((xw - mx[..., None, None]) * (yw - my[..., None, None])).mean(axis=(-2, -1))
    s = ((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(s.mean())


# -- compositional checker ---------------------------------------------------------

_PALETTE_NAMES = tuple(PALETTE)
_PALETTE_RGB = np.array([PALETTE[n] for n in _PALETTE_NAMES], dtype=np.float64)
MIN_OBJECT_PIXELS = 4


@dataclass(frozen=True)
class Detection:
    cell: int
    shape: str
    color: str
    pixels: int


def palette_labels(image) -> np.ndarray:
    """Nearest palette entry per pixel (indices into PALETTE order)."""
    rgb = to_uint8(image).astype(np.float64)
    d = ((rgb[..., None, :] - _PALETTE_RGB) ** 2).sum(-1)
    return np.argmin(d, axis=-1)


def classify_shape(mask: np.ndarray) -> str:
    """Square: solid bounding box. Triangle: top row clearly narrower than the
    bottom row. Circle: everything else (symmetric rounded footprint)."""
    ys, xs = np.nonzero(mask)
    box = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    fill = box.mean()
    top, bottom = box[0].sum(), box[-1].sum()
    if fill >= 0.95:
        return "square"
    if bottom - top >= 2:
        return "triangle"
    return "circle"


def detect_objects(image) -> tuple[str, list[Detection]]:
    """Background color and one detection per occupied grid cell."""
    labels = palette_labels(image)
    h, w = labels.shape
    bg_ids = [_PALETTE_NAMES.index(b) for b in BACKGROUNDS]
    bg = BACKGROUNDS[int(np.argmax([(labels == i).sum() for i in bg_ids]))]
    obj_ids = [_PALETTE_NAMES.index(c) for c in COLORS]
    found = []
    for cell in range(len(CELLS)):
        y0, y1, x0, x1 = cell_box(cell, h, w)
        sub = labels[y0:y1, x0:x1]
        is_obj = np.isin(sub, obj_ids)
        n = int(is_obj.sum())
        if n < MIN_OBJECT_PIXELS:
            continue
        counts = [(sub == i).sum() for i in obj_ids]
        color = COLORS[int(np.argmax(counts))]
        found.append(Detection(cell, classify_shape(is_obj), color, n))
    return bg, found


def compositional_check(image, scene: Scene) -> dict[str, bool]:
    """Per-attribute pass/fail of an image against a scene specification."""
    _, found = detect_objects(image)
    by_cell = {d.cell: d for d in found}
    presence = all(any(d.shape == o.shape for d in found) for o in scene.objects)
    color = all(any((d.shape, d.color) == (o.shape, o.color) for d in found) for o in scene.objects)
    position = all(o.cell in by_cell and (by_cell[o.cell].shape, by_cell[o.cell].color) == (o.shape, o.color)
                   for o in scene.objects)
    count = len(found) == len(scene.objects)
    return {"presence": presence, "color": color, "position": position, "count": count,
            "all": presence and color and position and count}


def compositional_accuracy(images: Sequence[np.ndarray], scenes: Sequence[Scene]) -> float:
    checks = [compositional_check(img, s)["all"] for img, s in zip(images, scenes)]
    return float(np.mean(checks)) if checks else 0.0


# -- attention maps ------------------------------------------------------------------

@dataclass
class AttnMap:
    layer: int
    head: int | None          # None means the mean over heads
    keyword_positions: tuple[int, ...]
    weights: np.ndarray       # rows x cols over the image-condition grid, sums to 1


def keyword_positions(prompt: str, keyword: str) -> list[int]:
    """Indices (within the prompt's token ids, BOS at 0) of every occurrence of keyword."""
    words = prompt.split()
    hits = [i + 1 for i, w in enumerate(words) if w == keyword]
    if not hits:
        raise ValueError(f"keyword {keyword!r} does not occur in prompt {prompt!r}")
    return hits


@torch.no_grad()
def attention_maps(model: UnifiedTransformer, image: np.ndarray, prompt: str, keyword: str) -> list[AttnMap]:
    """Per-layer head-averaged attention of the keyword's query rows over the image.

    The sequence is [image_condition(image), text_condition(prompt)]; weights
    are restricted to the image keys and renormalized to sum to one.
    """
    grid = model.config.grid
    ex = prompt_example("understanding", grid, image=image, condition_ids=tokenize(prompt))
    batch = collate([ex], model.config)
    _, maps = model(batch, return_attention=True)
    n_img = grid.token_count
    rows = [n_img + p for p in keyword_positions(prompt, keyword)]
    out = []
    for layer, w in enumerate(maps):
        a = w[0].mean(dim=0)[rows][:, :n_img].double().mean(dim=0).numpy()
        a = a / a.sum()
        out.append(AttnMap(layer, None, tuple(rows), a.reshape(grid.rows, grid.cols)))
    return out


def heatmap_u8(weights: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upsample to image size; max weight maps to 255."""
    reps_y, reps_x = height // weights.shape[0], width // weights.shape[1]
    up = np.kron(weights, np.ones((reps_y, reps_x)))
    peak = up.max()
    scaled = up / peak if peak > 0 else up
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_attention_maps(maps: Sequence[AttnMap], out_dir, height: int, width: int, stem: str = "attn") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in maps:
        p = out / f"{stem}_layer{m.layer}.pgm"
        write_pgm(p, heatmap_u8(m.weights, height, width))
        paths.append(p)
    return paths
