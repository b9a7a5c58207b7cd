"""Procedural shapes-and-captions corpus.

A :class:`Scene` is the single source of truth: it rasterizes to an image
with hard edges and renders to a caption, question/answer pairs and edit
instructions from a closed grammar. Because the grammar has an exact parser,
every evaluation downstream can be checked against the scene itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .patches import to_unit_range, to_uint8
from .pnm import read_pnm, write_ppm
from .rng import SeededStream

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "white")
SIZES = ("small", "large")
BACKGROUNDS = ("black", "gray")
CELLS = ("top left", "top right", "bottom left", "bottom right")

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "purple": (128, 0, 128),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "gray": (128, 128, 128),
}

SIZE_SYNONYMS = {"large": ("large", "big"), "small": ("small", "little")}
COUNT_WORDS = ("zero", "one", "two")

TASKS = ("understanding", "generation", "editing", "text_only", "reconstruction")


# -- scenes ------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SceneObject:
    cell: int
    shape: str
    color: str
    size: str

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "cell": self.cell, "size": self.size}


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background: str

    def __post_init__(self):
        if not 0 <= len(self.objects) <= 2:
            raise ValueError("a scene holds at most two objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES or not 0 <= o.cell < 4:
                raise ValueError(f"invalid object {o}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"invalid background {self.background}")
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects], "background": self.background}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(SceneObject(o["cell"], o["shape"], o["color"], o["size"]) for o in d["objects"])
        return cls(objs, d["background"])

    def object_at(self, cell: int) -> SceneObject | None:
        for o in self.objects:
            if o.cell == cell:
                return o
        return None


def gen_scene(stream: SeededStream, n_objects: int) -> Scene:
    if n_objects not in (1, 2):
        raise ValueError("n_objects must be 1 or 2")
    cells = stream.sample_without_replacement(4, n_objects)
    objs = tuple(
        SceneObject(int(c), stream.choice(SHAPES), stream.choice(COLORS), stream.choice(SIZES))
        for c in cells)
    return Scene(objs, stream.choice(BACKGROUNDS))


def all_single_object_scenes() -> list[Scene]:
    return [Scene((SceneObject(cell, shape, color, size),), bg)
            for cell in range(4) for shape in SHAPES for color in COLORS
            for size in SIZES for bg in BACKGROUNDS]


# -- rasterizer ----------------------------------------------------------------

def shape_extent(size: str, cell_px: int) -> int:
    return round((0.75 if size == "large" else 0.5) * cell_px)


@lru_cache(maxsize=None)
def shape_mask(shape: str, s: int) -> np.ndarray:
    """Boolean s x s footprint; pixel centers are tested against the outline."""
    yc, xc = np.mgrid[0:s, 0:s] + 0.5
    c = s / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (xc - c) ** 2 + (yc - c) ** 2 <= c * c
    if shape == "triangle":
        # apex up: half-width grows linearly to c on the bottom row
        half = (np.arange(s)[:, None] + 1) / s * c
        return np.abs(xc - c) <= half
    raise ValueError(f"unknown shape {shape}")


def cell_box(cell: int, height: int, width: int) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) of a grid cell."""
    ch, cw = height // 2, width // 2
    r, c = divmod(cell, 2)
    return r * ch, (r + 1) * ch, c * cw, (c + 1) * cw


@lru_cache(maxsize=4096)
def _rasterize_u8(scene: Scene, height: int, width: int) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = PALETTE[scene.background]
    cell_px = min(height, width) // 2
    for o in scene.objects:
        s = shape_extent(o.size, cell_px)
        y0, y1, x0, x1 = cell_box(o.cell, height, width)
        oy = y0 + (y1 - y0 - s) // 2
        ox = x0 + (x1 - x0 - s) // 2
        region = img[oy:oy + s, ox:ox + s]
        region[shape_mask(o.shape, s)] = PALETTE[o.color]
    img.setflags(write=False)
    return img


def rasterize_u8(scene: Scene, height: int = 16, width: int = 16) -> np.ndarray:
    if height < 16 or width < 16:
        raise ValueError("images must be at least 16x16")
    return _rasterize_u8(scene, height, width).copy()


def rasterize(scene: Scene, height: int = 16, width: int = 16) -> np.ndarray:
    """Scene -> H x W x 3 float64 image in [-1, 1]."""
    return to_unit_range(rasterize_u8(scene, height, width))


# -- grammar -------------------------------------------------------------------

def _object_phrase(o: SceneObject, size_word: str | None = None) -> str:
    return f"a {size_word or o.size} {o.color} {o.shape} in the {CELLS[o.cell]}"


def caption(scene: Scene, stream: SeededStream | None = None) -> str:
    """Canonical caption when ``stream`` is None, otherwise a synonym variant."""
    objs = list(scene.objects)
    words = [None] * len(objs)
    if stream is not None:
        if len(objs) == 2 and stream.bernoulli(0.5):
            objs.reverse()
        words = [stream.choice(SIZE_SYNONYMS[o.size]) for o in objs]
    phrases = [_object_phrase(o, w) for o, w in zip(objs, words)]
    return " and ".join(phrases) + f" on {scene.background}"


class ParseError(ValueError):
    pass


def _parse_cell(words: list[str], i: int) -> tuple[int, int]:
    phrase = " ".join(words[i:i + 2])
    if phrase not in CELLS:
        raise ParseError(f"bad cell {phrase!r}")
    return CELLS.index(phrase), i + 2


def parse_caption(text: str) -> Scene:
    words = text.split()
    size_of = {syn: canon for canon, syns in SIZE_SYNONYMS.items() for syn in syns}
    objs, i = [], 0
    while True:
        try:
            a, size, color, shape, in_, the = words[i:i + 6]
        except ValueError:
            raise ParseError(f"truncated caption {text!r}") from None
        if a != "a" or in_ != "in" or the != "the" or size not in size_of \
                or color not in COLORS or shape not in SHAPES:
            raise ParseError(f"bad object phrase in {text!r}")
        cell, i = _parse_cell(words, i + 6)
        objs.append(SceneObject(cell, shape, color, size_of[size]))
        if i < len(words) and words[i] == "and":
            i += 1
            continue
        break
    if words[i:] not in (["on", "black"], ["on", "gray"]):
        raise ParseError(f"bad background clause in {text!r}")
    try:
        return Scene(tuple(objs), words[i + 1])
    except ValueError as e:
        raise ParseError(str(e)) from None


def qa_pair(scene: Scene, stream: SeededStream) -> tuple[str, str]:
    options = ["count"]
    shape_counts = {s: sum(o.shape == s for o in scene.objects) for s in SHAPES}
    if any(n == 1 for n in shape_counts.values()):
        options.append("color")
    if scene.objects:
        options.append("shape")
    kind = stream.choice(options)
    if kind == "count":
        return "how many objects are there", COUNT_WORDS[len(scene.objects)]
    if kind == "color":
        unique = [o for o in scene.objects if shape_counts[o.shape] == 1]
        o = stream.choice(unique)
        return f"what color is the {o.shape}", o.color
    o = stream.choice(scene.objects)
    return f"what shape is in the {CELLS[o.cell]}", o.shape


def all_qa_pairs(scene: Scene) -> list[tuple[str, str]]:
    """Every distinct question ``qa_pair`` can ask about ``scene``, with answers."""
    shape_counts = {s: sum(o.shape == s for o in scene.objects) for s in SHAPES}
    pairs = [("how many objects are there", COUNT_WORDS[len(scene.objects)])]
    pairs += [(f"what color is the {o.shape}", o.color) for o in scene.objects if shape_counts[o.shape] == 1]
    pairs += [(f"what shape is in the {CELLS[o.cell]}", o.shape) for o in scene.objects]
    return pairs


def referring_expression(scene: Scene, o: SceneObject) -> str:
    if sum(x.shape == o.shape for x in scene.objects) == 1:
        return f"the {o.shape}"
    if sum((x.shape, x.color) == (o.shape, o.color) for x in scene.objects) == 1:
        return f"the {o.color} {o.shape}"
    return f"the {o.shape} in the {CELLS[o.cell]}"


@dataclass
class EditPair:
    source: np.ndarray
    instruction: str
    target: np.ndarray
    target_scene: Scene
    source_scene: Scene


def edit_scene(scene: Scene, stream: SeededStream) -> tuple[str, Scene]:
    """One atomic non-identity edit; returns (instruction, edited scene)."""
    ops = ["recolor", "move"]
    if len(scene.objects) == 2:
        ops.append("remove")
    if len(scene.objects) == 1:
        ops.append("add")
    op = stream.choice(ops)
    objs = list(scene.objects)
    free = [c for c in range(4) if scene.object_at(c) is None]
    if op == "add":
        new = SceneObject(stream.choice(free), stream.choice(SHAPES), stream.choice(COLORS), stream.choice(SIZES))
        text = f"add a {new.size} {new.color} {new.shape} in the {CELLS[new.cell]}"
        return text, Scene(tuple(objs + [new]), scene.background)
    o = stream.choice(objs)
    ref = referring_expression(scene, o)
    rest = [x for x in objs if x != o]
    if op == "recolor":
        color = stream.choice([c for c in COLORS if c != o.color])
        return f"make {ref} {color}", Scene(tuple(rest + [replace(o, color=color)]), scene.background)
    if op == "move":
        cell = stream.choice(free)
        return f"move {ref} to the {CELLS[cell]}", Scene(tuple(rest + [replace(o, cell=cell)]), scene.background)
    return f"remove {ref}", Scene(tuple(rest), scene.background)


def edit_pair(scene: Scene, stream: SeededStream, height: int = 16, width: int = 16) -> EditPair:
    instruction, target_scene = edit_scene(scene, stream)
    return EditPair(rasterize(scene, height, width), instruction,
                    rasterize(target_scene, height, width), target_scene, scene)


def text_sentence(stream: SeededStream) -> str:
    kind = stream.integers(3)
    if kind == 0:
        return f"{stream.choice(COLORS)} is a color"
    if kind == 1:
        return f"a {stream.choice(SHAPES)} is a shape"
    return "one and one is two"


# -- tokenizer -------------------------------------------------------------------

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
PAD, BOS, EOS, SEP = range(4)

_WORDS = [
    "a", "and", "in", "the", "on", "to", "is", "are", "there", "not",
    *SIZES, "big", "little", *COLORS, *SHAPES, *BACKGROUNDS,
    "top", "bottom", "left", "right",
    "what", "color", "shape", "how", "many", "objects", *COUNT_WORDS,
    "make", "move", "remove", "add",
]
VOCAB: tuple[str, ...] = SPECIALS + tuple(dict.fromkeys(_WORDS))
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


class VocabError(KeyError):
    pass


def tokenize(text: str, bos: bool = True, eos: bool = True) -> list[int]:
    ids = []
    for w in text.split():
        if w not in WORD_TO_ID or w in SPECIALS:
            raise VocabError(f"out-of-vocabulary word {w!r}")
        ids.append(WORD_TO_ID[w])
    return ([BOS] if bos else []) + ids + ([EOS] if eos else [])


def detokenize(ids: Iterable[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i >= len(SPECIALS))


# -- records and mixtures -------------------------------------------------------

@dataclass(frozen=True)
class MixtureConfig:
    gen_ratio: int = 7
    und_ratio: int = 3
    text_only_fraction: float = 0.2

    def __post_init__(self):
        if self.gen_ratio + self.und_ratio != 10 or min(self.gen_ratio, self.und_ratio) < 0:
            raise ValueError("gen_ratio + und_ratio must equal 10")
        if not 0 <= self.text_only_fraction < 1:
            raise ValueError("text_only_fraction must lie in [0, 1)")

    @classmethod
    def parse(cls, tag: str, text_only_fraction: float = 0.2) -> "MixtureConfig":
        """Parse the ``xgyu`` notation, e.g. ``7g3u``."""
        tag = tag.strip().lower()
        try:
            g, u = tag.rstrip("u").split("g")
            return cls(int(g), int(u), text_only_fraction)
        except ValueError:
            raise ValueError(f"bad mixture tag {tag!r}; expected e.g. 7g3u") from None

    @property
    def tag(self) -> str:
        return f"{self.gen_ratio}g{self.und_ratio}u"


@dataclass
class SampleRecord:
    task: str
    scene: Scene
    image: np.ndarray | None = None          # the image the task is about
    source: np.ndarray | None = None         # editing source
    target_scene: Scene | None = None
    caption: str | None = None
    question: str | None = None
    answer: str | None = None
    instruction: str | None = None
    text: str | None = None

    def images(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in (("image", self.image), ("source", self.source)) if v is not None}


def make_record(task: str, scene: Scene, stream: SeededStream, *, qa: bool = False,
                hw: tuple[int, int] = (16, 16)) -> SampleRecord:
    h, w = hw
    if task == "text_only":
        return SampleRecord("text_only", scene, text=text_sentence(stream))
    if task == "generation":
        return SampleRecord("generation", scene, image=rasterize(scene, h, w), caption=caption(scene))
    if task == "understanding":
        img = rasterize(scene, h, w)
        if qa:
            q, a = qa_pair(scene, stream)
            return SampleRecord("understanding", scene, image=img, question=q, answer=a)
        return SampleRecord("understanding", scene, image=img, caption=caption(scene))
    if task == "editing":
        pair = edit_pair(scene, stream, h, w)
        return SampleRecord("editing", scene, image=pair.target, source=pair.source,
                            target_scene=pair.target_scene, instruction=pair.instruction)
    if task == "reconstruction":
        img = rasterize(scene, h, w)
        return SampleRecord("reconstruction", scene, image=img, source=img)
    raise ValueError(f"unknown task {task}")


def sample_task(mixture: MixtureConfig, stage: str, stream: SeededStream,
                qa_fraction: float = 0.0, edit_fraction: float = 0.5,
                u: float | None = None) -> tuple[str, bool]:
    """Draw one slot's task; returns (task tag, is-question-answering).

    The task is read off one uniform ``u`` (drawn from ``stream`` unless
    given): text-only below the text fraction, then generation, then
    understanding. For a fixed ``u``, the generation slots of a mixture are a
    subset of those of any mixture with a larger generation share.
    """
    if stage == "recon_finetune":
        return "reconstruction", False
    u = stream.uniform() if u is None else float(u)
    if not 0.0 <= u < 1.0:
        raise ValueError(f"task uniform must lie in [0, 1), got {u}")
    text = mixture.text_only_fraction
    if u < text:
        return "text_only", False
    gen = u < text + (1.0 - text) * mixture.gen_ratio / 10
    if stage == "pretrain":
        if gen:
            return "generation", False
        return "understanding", bool(stream.uniform() < qa_fraction)
    if stage == "sft":
        if gen:
            return ("editing" if stream.uniform() < edit_fraction else "generation"), False
        return "understanding", True
    raise ValueError(f"unknown stage {stage}")


def stratified_uniforms(perm: Sequence[int], offsets: Sequence[float]) -> np.ndarray:
    """One uniform per slot, ``(perm[i] + offsets[i]) / n``.

    With ``perm`` a random permutation of ``range(n)`` and uniform offsets,
    each value is marginally uniform on [0, 1) while exactly one falls in each
    interval [k/n, (k+1)/n), so the per-batch task counts of a mixture are
    within one of their expectation.
    """
    perm, offsets = np.asarray(perm), np.asarray(offsets, dtype=np.float64)
    n = len(perm)
    if sorted(perm.tolist()) != list(range(n)) or offsets.shape != (n,):
        raise ValueError("perm must be a permutation of range(n) with one offset per slot")
    if np.any((offsets < 0) | (offsets >= 1)):
        raise ValueError("offsets must lie in [0, 1)")
    # (n - 1 + offset) / n can round up to 1.0 in floating point
    return np.minimum((perm + offsets) / n, np.nextafter(1.0, 0.0))


def sample_batch(mixture: MixtureConfig, stage: str, batch_size: int, stream: SeededStream,
                 scenes: Sequence[Scene] | None = None, *, max_objects: int = 2,
                 qa_fraction: float = 0.0, edit_fraction: float = 0.5,
                 hw: tuple[int, int] = (16, 16),
                 task_uniforms: Sequence[float] | None = None) -> list[SampleRecord]:
    """Draw a batch from the mixture.

    With ``scenes`` given, scenes are drawn uniformly from that fixed corpus;
    otherwise fresh scenes with 1..max_objects objects are generated.
    ``task_uniforms`` fixes each slot's task uniform (see ``sample_task``).
    """
    if task_uniforms is not None and len(task_uniforms) != batch_size:
        raise ValueError("need one task uniform per slot")
    records = []
    for i in range(batch_size):
        u = None if task_uniforms is None else task_uniforms[i]
        task, qa = sample_task(mixture, stage, stream, qa_fraction, edit_fraction, u=u)
        if scenes:
            scene = scenes[stream.integers(len(scenes))]
        else:
            scene = gen_scene(stream, 1 + stream.integers(max_objects))
        records.append(make_record(task, scene, stream, qa=qa, hw=hw))
    return records


# -- export / import -------------------------------------------------------------

_TEXT_FIELDS = ("caption", "question", "answer", "instruction", "text")


def export_dataset(records: Sequence[SampleRecord], out_dir) -> Path:
    """Write ``manifest.jsonl`` plus one P6 PPM per image; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            row = {"task": rec.task, "scene": rec.scene.to_dict()}
            row["target_scene"] = rec.target_scene.to_dict() if rec.target_scene else None
            for f in _TEXT_FIELDS:
                row[f] = getattr(rec, f)
            row["images"] = {}
            for role, img in rec.images().items():
                rel = f"images/{i:06d}_{role}.ppm"
                write_ppm(out / rel, to_uint8(img))
                row["images"][role] = rel
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


def import_dataset(path) -> list[SampleRecord]:
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    root = manifest.parent
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        imgs = {role: to_unit_range(read_pnm(root / rel)) for role, rel in row["images"].items()}
        records.append(SampleRecord(
            task=row["task"],
            scene=Scene.from_dict(row["scene"]),
            target_scene=Scene.from_dict(row["target_scene"]) if row.get("target_scene") else None,
            image=imgs.get("image"), source=imgs.get("source"),
            **{f: row.get(f) for f in _TEXT_FIELDS}))
    return records


def corpus_scenes(records: Iterable[SampleRecord]) -> list[Scene]:
    """Distinct scenes of a corpus, in first-seen order."""
    return list(dict.fromkeys(r.scene for r in records))
