"""The unified transformer.

Text tokens go through an embedding table, image patches through a linear
patch embedding; both are processed by one pre-norm transformer stack. A
language-modelling head reads text positions and a flow head reads the noisy
image positions and predicts clean pixels.

Attention policy: text is causal; the tokens of one image segment see each
other bidirectionally; every token sees all earlier segments and nothing
later.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BOS, EOS, SEP, VOCAB_SIZE
from .patches import PatchGrid, patchify, unpatchify
from .rng import SeededStream

ROLES = ("text_condition", "text_target", "image_condition", "image_noisy")
TEXT_ROLES = ("text_condition", "text_target")
IMAGE_ROLES = ("image_condition", "image_noisy")
NOISY_TASKS = ("generation", "editing", "reconstruction")
TASK_TAGS = ("understanding", "generation", "editing", "text_only", "reconstruction")

_DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 64
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    eps_t: float = 1e-3
    dtype: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        PatchGrid(self.image_size, self.image_size, self.channels, self.patch_size)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.channels, self.patch_size)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


# -- layouts -------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceLayout:
    segments: tuple[tuple[str, int], ...]
    task: str

    def __post_init__(self):
        if self.task not in TASK_TAGS:
            raise ValueError(f"unknown task {self.task}")
        for role, n in self.segments:
            if role not in ROLES or n < 0:
                raise ValueError(f"bad segment ({role}, {n})")
        n_noisy = sum(r == "image_noisy" for r, _ in self.segments)
        if self.task in NOISY_TASKS and n_noisy != 1:
            raise ValueError(f"{self.task} needs exactly one image_noisy segment")
        if self.task not in NOISY_TASKS and n_noisy:
            raise ValueError(f"{self.task} must not contain image_noisy segments")

    @property
    def length(self) -> int:
        return sum(n for _, n in self.segments)

    def offsets(self) -> list[int]:
        out, pos = [], 0
        for _, n in self.segments:
            out.append(pos)
            pos += n
        return out

    def span(self, role: str) -> tuple[int, int]:
        """(start, end) of the first segment with this role."""
        for (r, n), start in zip(self.segments, self.offsets()):
            if r == role:
                return start, start + n
        raise KeyError(role)


def build_attention_mask(layout: SequenceLayout) -> np.ndarray:
    """Boolean L x L matrix; entry [q, k] is True when query q may attend key k."""
    seg_of = np.concatenate([np.full(n, i, dtype=np.int64) for i, (_, n) in enumerate(layout.segments)]
                            or [np.zeros(0, dtype=np.int64)])
    is_image = np.array([layout.segments[s][0] in IMAGE_ROLES for s in seg_of], dtype=bool)
    pos = np.arange(len(seg_of))
    sq, sk = seg_of[:, None], seg_of[None, :]
    earlier = sk < sq
    same = sk == sq
    causal = pos[None, :] <= pos[:, None]
    return earlier | (same & (is_image[:, None] | causal))


# -- examples and batches --------------------------------------------------------

@dataclass
class Segment:
    role: str
    ids: Sequence[int] | None = None            # text segments
    patches: np.ndarray | None = None           # image segments, N x D
    masked: Sequence[int] = ()                  # patch indices replaced by the mask token
    positions: Sequence[int] | None = None      # patch position ids, default 0..N-1

    def __len__(self) -> int:
        return len(self.ids) if self.role in TEXT_ROLES else len(self.patches)


@dataclass
class Example:
    task: str
    segments: list[Segment]
    t: float | None = None
    # flow supervision, only for tasks with an image_noisy segment
    x1: np.ndarray | None = None
    x0: np.ndarray | None = None

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(tuple((s.role, len(s)) for s in self.segments), self.task)


@dataclass
class Batch:
    text_ids: torch.Tensor        # B x L
    is_text: torch.Tensor         # B x L bool
    patches: torch.Tensor         # B x L x D
    is_image: torch.Tensor        # B x L bool
    img_pos: torch.Tensor         # B x L
    text_pos: torch.Tensor        # B x L
    roles: torch.Tensor           # B x L
    noisy: torch.Tensor           # B x L bool
    masked: torch.Tensor          # B x L bool
    t: torch.Tensor               # B (0 where unused)
    attn: torch.Tensor            # B x L x L bool
    layouts: list[SequenceLayout]
    # text supervision (flat over all predicted positions)
    ce_batch: torch.Tensor
    ce_pos: torch.Tensor
    ce_target: torch.Tensor
    ce_example: torch.Tensor
    # flow supervision
    flow_batch: torch.Tensor      # G
    flow_start: torch.Tensor      # G
    xt: torch.Tensor | None       # G x H x W x C
    x1: torch.Tensor | None
    flow_t: torch.Tensor          # G

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _cached_mask(layout: SequenceLayout) -> np.ndarray:
    key = layout.segments
    m = _MASK_CACHE.get(key)
    if m is None:
        m = build_attention_mask(layout)
        if len(_MASK_CACHE) < 10000:
            _MASK_CACHE[key] = m
    return m


def collate(examples: Sequence[Example], config: ModelConfig) -> Batch:
    """Pack examples into padded tensors. Padding rows attend only to themselves."""
    if not examples:
        raise ValueError("empty batch")
    dtype = config.torch_dtype
    grid = config.grid
    layouts = [ex.layout for ex in examples]
    lengths = [lay.length for lay in layouts]
    L = max(lengths)
    if L > config.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {config.max_seq_len}")
    B, D = len(examples), grid.token_dim

    text_ids = np.zeros((B, L), dtype=np.int64)
    is_text = np.zeros((B, L), dtype=bool)
    patches = np.zeros((B, L, D), dtype=np.float64)
    is_image = np.zeros((B, L), dtype=bool)
    img_pos = np.zeros((B, L), dtype=np.int64)
    roles = np.zeros((B, L), dtype=np.int64)
    noisy = np.zeros((B, L), dtype=bool)
    masked = np.zeros((B, L), dtype=bool)
    t = np.zeros(B, dtype=np.float64)
    attn = np.zeros((B, L, L), dtype=bool)
    attn[:, np.arange(L), np.arange(L)] = True
    ce_b, ce_p, ce_y, ce_e = [], [], [], []
    fl_b, fl_s, fl_xt, fl_x1, fl_t = [], [], [], [], []

    for b, (ex, lay) in enumerate(zip(examples, layouts)):
        n = lay.length
        attn[b, :n, :n] = _cached_mask(lay)
        has_noisy = any(s.role == "image_noisy" for s in ex.segments)
        if has_noisy != (ex.t is not None):
            raise ValueError("a timestep is required exactly when an image_noisy segment is present")
        pos = 0
        for seg in ex.segments:
            k = len(seg)
            sl = slice(pos, pos + k)
            roles[b, sl] = ROLES.index(seg.role)
            if seg.role in TEXT_ROLES:
                ids = np.asarray(seg.ids, dtype=np.int64)
                if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
                    raise ValueError(f"token id out of vocabulary (size {config.vocab_size})")
                text_ids[b, sl] = ids
                is_text[b, sl] = True
                if seg.role == "text_target" and k > 1:
                    ce_b.extend([b] * (k - 1))
                    ce_p.extend(range(pos, pos + k - 1))
                    ce_y.extend(ids[1:].tolist())
                    ce_e.extend([b] * (k - 1))
            else:
                if seg.patches.shape != (grid.token_count, D):
                    raise ValueError(f"image segment needs {grid.token_count}x{D} patches, got {seg.patches.shape}")
                patches[b, sl] = seg.patches
                is_image[b, sl] = True
                img_pos[b, sl] = np.arange(k) if seg.positions is None else np.asarray(seg.positions)
                if seg.masked is not None and len(seg.masked):
                    idx = np.asarray(seg.masked, dtype=np.int64)
                    if idx.min() < 0 or idx.max() >= k:
                        raise IndexError("mask index out of range")
                    masked[b, pos + idx] = True
                if seg.role == "image_noisy":
                    noisy[b, sl] = True
                    t[b] = ex.t
                    fl_b.append(b)
                    fl_s.append(pos)
                    fl_xt.append(unpatchify(seg.patches, grid))
                    fl_t.append(ex.t)
                    if ex.x1 is not None:
                        fl_x1.append(ex.x1)
            pos += k

    if fl_x1 and len(fl_x1) != len(fl_b):
        raise ValueError("flow targets must be given for all noisy segments in a batch or for none")
    text_pos = np.broadcast_to(np.arange(L), (B, L)).copy()
    as_long = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.int64))
    return Batch(
        text_ids=as_long(text_ids), is_text=torch.from_numpy(is_text),
        patches=torch.from_numpy(patches).to(dtype), is_image=torch.from_numpy(is_image),
        img_pos=as_long(img_pos), text_pos=as_long(text_pos), roles=as_long(roles),
        noisy=torch.from_numpy(noisy), masked=torch.from_numpy(masked),
        t=torch.from_numpy(t).to(dtype), attn=torch.from_numpy(attn), layouts=layouts,
        ce_batch=as_long(ce_b), ce_pos=as_long(ce_p), ce_target=as_long(ce_y), ce_example=as_long(ce_e),
        flow_batch=as_long(fl_b), flow_start=as_long(fl_s),
        xt=torch.from_numpy(np.stack(fl_xt)).to(dtype) if fl_xt else None,
        x1=torch.from_numpy(np.stack(fl_x1)).to(dtype) if fl_x1 else None,
        flow_t=torch.tensor(fl_t, dtype=dtype),
    )


# -- network -------------------------------------------------------------------

def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor, return_weights: bool = False):
        B, L, C = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, L, 3, h, C // h).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, L, C)
        return self.proj(out), (weights if return_weights else None)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, ffn_mult * d_model)
        self.fc2 = nn.Linear(ffn_mult * d_model, d_model)

    def forward(self, x, allowed, return_weights=False):
        a, w = self.attn(self.ln1(x), allowed, return_weights)
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, w


class UnifiedTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        grid = config.grid
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.text_pos = nn.Parameter(torch.zeros(config.max_seq_len, d))
        self.patch_embed = nn.Linear(grid.token_dim, d)
        self.img_pos = nn.Parameter(torch.zeros(grid.token_count, d))
        self.role_emb = nn.Parameter(torch.zeros(len(ROLES), d))
        self.time_fc1 = nn.Linear(d, d)
        self.time_fc2 = nn.Linear(d, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.ffn_mult) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False)
        self.flow_head = nn.Linear(d, grid.token_dim)
        self.to(config.torch_dtype)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic init: N(0, 0.02) weights, zero biases, unit norms, zero flow head."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("flow_head") or name.endswith(".bias") and "ln" not in name:
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * 0.02)

    def embed(self, batch: Batch) -> torch.Tensor:
        tok = self.tok_emb(batch.text_ids)
        img = self.patch_embed(batch.patches)
        content = torch.where(batch.is_text[..., None], tok, img)
        content = torch.where(batch.masked[..., None], self.mask_token.expand_as(content), content)
        pos = torch.where(batch.is_image[..., None], self.img_pos[batch.img_pos], self.text_pos[batch.text_pos])
        x = content + pos + self.role_emb[batch.roles]
        if bool(batch.noisy.any()):
            temb = self.time_fc2(F.gelu(self.time_fc1(timestep_features(batch.t, self.config.d_model))))
            x = x + batch.noisy[..., None].to(x.dtype) * temb[:, None, :]
        return x

    def forward(self, batch: Batch, return_attention: bool = False):
        x = self.embed(batch)
        return self.transform(x, batch.attn, return_attention)

    def transform(self, x: torch.Tensor, allowed: torch.Tensor, return_attention: bool = False):
        if x.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {x.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        maps = []
        for blk in self.blocks:
            x, w = blk(x, allowed, return_attention)
            maps.append(w)
        return (x, maps) if return_attention else x

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.ln_f(hidden))

    def flow_prediction(self, hidden_tokens: torch.Tensor) -> torch.Tensor:
        """(G, N, d_model) hidden states of noisy patches -> (G, H, W, C) clean image."""
        grid = self.config.grid
        if hidden_tokens.shape[-2] != grid.token_count:
            raise ValueError(f"flow head needs {grid.token_count} tokens, got {hidden_tokens.shape[-2]}")
        return unpatchify(self.flow_head(self.ln_f(hidden_tokens)), grid)


def build_model(config: ModelConfig, seed: int = 0) -> UnifiedTransformer:
    model = UnifiedTransformer(config)
    model.reset_parameters(seed)
    return model


# -- heads over a batch ----------------------------------------------------------

def noisy_hidden(model: UnifiedTransformer, hidden: torch.Tensor, batch: Batch) -> torch.Tensor:
    n = model.config.grid.token_count
    idx = batch.flow_start[:, None] + torch.arange(n)[None, :]
    return hidden[batch.flow_batch[:, None], idx]


def lm_logits_and_ce(model: UnifiedTransformer, hidden: torch.Tensor, batch: Batch):
    """Logits at every predicted text position and CE averaged per record, then over records."""
    logits, _, per_record = per_record_ce(model, hidden, batch)
    return logits, per_record.mean()


def per_record_ce(model: UnifiedTransformer, hidden: torch.Tensor, batch: Batch):
    """(logits, batch indices of scored records, mean CE per scored record)."""
    if batch.ce_pos.numel() == 0:
        raise ValueError("no text_target positions to score")
    logits = model.lm_logits(hidden[batch.ce_batch, batch.ce_pos])
    per_pos = F.cross_entropy(logits, batch.ce_target, reduction="none")
    records, inverse = torch.unique(batch.ce_example, return_inverse=True)
    sums = torch.zeros(len(records), dtype=per_pos.dtype).index_add(0, inverse, per_pos)
    counts = torch.zeros(len(records), dtype=per_pos.dtype).index_add(0, inverse, torch.ones_like(per_pos))
    return logits, records, sums / counts


def flow_head(model: UnifiedTransformer, hidden: torch.Tensor, batch: Batch) -> torch.Tensor:
    return model.flow_prediction(noisy_hidden(model, hidden, batch))


# -- example builders --------------------------------------------------------------

def image_segment(image: np.ndarray, role: str, grid: PatchGrid, masked=(), positions=None) -> Segment:
    return Segment(role, patches=patchify(np.asarray(image, dtype=np.float64), grid),
                   masked=tuple(masked), positions=positions)


def prompt_example(task: str, grid: PatchGrid, *, image=None, condition_ids=None, xt=None, t=None,
                   target_ids=None, x1=None, x0=None, mask_noisy=(), mask_condition=()) -> Example:
    """Assemble an example in the canonical segment order for its task.

    understanding:  [image_condition, text_condition?, text_target]
    generation:     [text_condition, image_noisy]
    editing:        [image_condition, text_condition, image_noisy]
    reconstruction: [image_condition, image_noisy]
    text_only:      [text_target]
    """
    segs = []
    if image is not None:
        segs.append(image_segment(image, "image_condition", grid, mask_condition))
    if condition_ids is not None:
        segs.append(Segment("text_condition", ids=list(condition_ids)))
    if xt is not None:
        segs.append(image_segment(xt, "image_noisy", grid, mask_noisy))
    if target_ids is not None:
        segs.append(Segment("text_target", ids=list(target_ids)))
    return Example(task, segs, t=t, x1=x1, x0=x0)


@torch.no_grad()
def decode_text(model: UnifiedTransformer, prefix: Example, stream: SeededStream | None = None,
                max_new: int = 8, mode: str = "greedy", temperature: float = 1.0,
                start_token: int = SEP) -> list[int]:
    """Autoregressive decoding after ``prefix``.

    A text_target segment opened with ``start_token`` is appended, so decoding
    always continues from a text position; it is extended one token at a time
    until EOS or ``max_new`` tokens.
    """
    if max_new <= 0:
        return []
    target = [start_token]
    out: list[int] = []
    for _ in range(max_new):
        ex = Example(prefix.task, list(prefix.segments) + [Segment("text_target", ids=list(target))], prefix.t)
        batch = collate([ex], model.config)
        hidden = model(batch)
        logits = model.lm_logits(hidden[0, ex.layout.length - 1])
        if mode == "greedy":
            nxt = int(torch.argmax(logits))
        elif mode == "temperature":
            if stream is None:
                raise ValueError("temperature sampling needs a stream")
            p = torch.softmax(logits.double() / temperature, dim=-1).numpy()
            nxt = int(np.searchsorted(np.cumsum(p), stream.uniform() * p.sum(), side="right"))
            nxt = min(nxt, len(p) - 1)
        else:
            raise ValueError(f"unknown decode mode {mode}")
        if nxt == EOS:
            break
        out.append(nxt)
        target.append(nxt)
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "ModelConfig", "SequenceLayout", "Segment", "Example", "Batch", "UnifiedTransformer",
    "build_attention_mask", "collate", "build_model", "lm_logits_and_ce", "flow_head",
    "decode_text", "prompt_example", "image_segment", "BOS", "EOS", "SEP",
]
