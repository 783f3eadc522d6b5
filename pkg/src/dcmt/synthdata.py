"""Deterministic synthetic multimodal stimuli.

Scenes are small grids of colored glyphs rendered to a binary RGB raster;
captions are template realizations over the objects with geometric
connectors. Every artifact is a pure function of (seed, parameters):
object placement uses seeded rejection sampling, caption order a seeded
permutation, and the train/val/test split a seeded hash ranking. Items
carry their own derived PRNG stream so generation can fan out across
workers without changing a single byte of output.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Rng, derive_seed

SHAPES = ("square", "disk", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

# connectors admitted by the caption grammar; "and" is the fallback when
# no geometric relation holds between consecutive mentions
RELATIONS = ("left of", "above", "next to")
CONNECTORS = RELATIONS + ("and",)

# closed answer vocabulary for the toy VQA head
ANSWER_RELATIONS = ("left of", "right of", "above", "below", "next to")
ANSWERS = COLORS + SHAPES + ANSWER_RELATIONS
REFLECTED_RELATION = {
    "left of": "right of",
    "right of": "left of",
    "above": "below",
    "below": "above",
    "next to": "next to",
}

VOCAB = "abcdefghijklmnopqrstuvwxyz ?"
CHAR_TO_ID = {ch: i for i, ch in enumerate(VOCAB)}

GLYPH = 8  # glyph side length in pixels; one grid cell = one glyph

_GLYPH_ART = {
    "square": (
        "........",
        ".######.",
        ".######.",
        ".######.",
        ".######.",
        ".######.",
        ".######.",
        "........",
    ),
    "disk": (
        "...##...",
        ".######.",
        ".######.",
        "########",
        "########",
        ".######.",
        ".######.",
        "...##...",
    ),
    "triangle": (
        "........",
        "...##...",
        "...##...",
        "..####..",
        "..####..",
        ".######.",
        ".######.",
        "........",
    ),
    "cross": (
        "........",
        "...##...",
        "...##...",
        ".######.",
        ".######.",
        "...##...",
        "...##...",
        "........",
    ),
}
_GLYPHS = {
    name: np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in art])
    for name, art in _GLYPH_ART.items()
}


def encode_text(text: str) -> list[int]:
    try:
        return [CHAR_TO_ID[ch] for ch in text]
    except KeyError as e:
        raise ContractError(f"character {e.args[0]!r} is outside the vocabulary") from None


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col)


@dataclass
class Scene:
    grid_size: int
    objects: list[SceneObject]


@dataclass
class Caption:
    text: str
    # mention_spans[i] is the (start, end) character span describing
    # scene object i, wherever the seeded permutation placed it
    mention_spans: list[tuple[int, int]]


@dataclass
class TaskItem:
    item_id: int
    kind: str
    seed: int
    scene: Scene
    raster: np.ndarray
    caption: Caption
    payload: dict


def render_raster(scene: Scene) -> np.ndarray:
    """3×(8G)×(8G) binary image: each object paints its glyph into its
    cell across the color's RGB channels."""
    side = GLYPH * scene.grid_size
    out = np.zeros((3, side, side))
    for obj in scene.objects:
        r, c = obj.cell
        glyph = _GLYPHS[obj.shape]
        rgb = COLOR_RGB[obj.color]
        for ch in range(3):
            if rgb[ch]:
                out[ch, r * GLYPH : (r + 1) * GLYPH, c * GLYPH : (c + 1) * GLYPH] = glyph
    return out


def gen_scene(seed: int, complexity: int, grid_size: int = 8) -> Scene:
    """Place `complexity` objects on the grid without collisions."""
    if not 1 <= complexity <= 10:
        raise ContractError(f"complexity must be in [1, 10], got {complexity}")
    if grid_size * grid_size < complexity:
        raise ContractError(f"grid {grid_size}×{grid_size} cannot hold {complexity} objects")
    rng = Rng(seed)
    taken: set[tuple[int, int]] = set()
    objects = []
    for _ in range(complexity):
        shape = SHAPES[rng.randint(len(SHAPES))]
        color = COLORS[rng.randint(len(COLORS))]
        while True:
            cell = (rng.randint(grid_size), rng.randint(grid_size))
            if cell not in taken:
                break
        taken.add(cell)
        objects.append(SceneObject(shape=shape, color=color, cell=cell))
    return Scene(grid_size=grid_size, objects=objects)


def _mention(obj: SceneObject) -> str:
    return f"a {obj.color} {obj.shape}"


def _true_connectors(a: SceneObject, b: SceneObject) -> list[str]:
    rels = []
    if a.cell[1] < b.cell[1]:
        rels.append("left of")
    if a.cell[0] < b.cell[0]:
        rels.append("above")
    if max(abs(a.cell[0] - b.cell[0]), abs(a.cell[1] - b.cell[1])) == 1:
        rels.append("next to")
    return rels


def render_caption(scene: Scene, seed: int) -> Caption:
    """Template fill over a seeded permutation of the objects. Connectors
    between consecutive mentions are drawn from the relations that actually
    hold in the scene, falling back to "and"."""
    rng = Rng(seed)
    order = list(range(len(scene.objects)))
    rng.shuffle(order)
    spans: list[tuple[int, int] | None] = [None] * len(scene.objects)
    parts: list[str] = []
    pos = 0
    for rank, idx in enumerate(order):
        obj = scene.objects[idx]
        if rank > 0:
            prev = scene.objects[order[rank - 1]]
            rels = _true_connectors(prev, obj)
            conn = rels[rng.randint(len(rels))] if rels else "and"
            parts.append(" " + conn + " ")
            pos += len(conn) + 2
        m = _mention(obj)
        # the recorded span covers "<color> <shape>", skipping the article
        spans[idx] = (pos + 2, pos + len(m))
        parts.append(m)
        pos += len(m)
    return Caption(text="".join(parts), mention_spans=[s for s in spans if s is not None])


def parse_caption(text: str) -> list[dict]:
    """Parse a caption back into its mention/connector structure.

    Grammar: mention (connector mention)* with
    mention = "a" COLOR SHAPE and connector in CONNECTORS. Raises
    ContractError when the text does not conform.
    """
    words = text.split(" ")
    if "" in words:
        raise ContractError("caption has leading, trailing, or doubled spaces")
    mentions = []
    i = 0
    expect_mention = True
    last_conn = None
    while i < len(words):
        if expect_mention:
            if words[i] != "a":
                raise ContractError(f"expected article at word {i}, got {words[i]!r}")
            if i + 2 >= len(words):
                raise ContractError("truncated mention")
            color, shape = words[i + 1], words[i + 2]
            if color not in COLORS:
                raise ContractError(f"unknown color {color!r}")
            if shape not in SHAPES:
                raise ContractError(f"unknown shape {shape!r}")
            mentions.append({"color": color, "shape": shape, "connector": last_conn})
            i += 3
            expect_mention = False
        else:
            if words[i : i + 2] == ["left", "of"] or words[i : i + 2] == ["next", "to"]:
                last_conn = " ".join(words[i : i + 2])
                i += 2
            elif words[i] in ("above", "and"):
                last_conn = words[i]
                i += 1
            else:
                raise ContractError(f"unknown connector at word {i}: {words[i]!r}")
            expect_mention = True
    if expect_mention:
        raise ContractError("caption ends on a connector")
    return mentions


def alignment_entries(scene: Scene, caption: Caption) -> list[dict]:
    return [
        {"object": i, "cell": list(scene.objects[i].cell), "span": list(caption.mention_spans[i])}
        for i in range(len(scene.objects))
    ]


def reference_heatmaps(grid_size: int, cell, span, text_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth alignment pair for one mention: a one-hot cell map
    over the image grid and a uniform distribution over the span's
    characters. Both sum to 1."""
    img = np.zeros((grid_size, grid_size))
    img[cell[0], cell[1]] = 1.0
    start, end = span
    if not 0 <= start < end <= text_len:
        raise ContractError(f"span {span} outside text of length {text_len}")
    txt = np.zeros(text_len)
    txt[start:end] = 1.0 / (end - start)
    return img, txt


# Context frames around a core mention. Every prefix length is a multiple
# of 4 so a width-4 fixed chunker lands on the same offsets relative to
# the core in every frame; adaptive boundaries are free to move.
CONTEXT_FRAMES = (
    ("", " and a blue disk"),
    ("a blue disk left of ", ""),
    ("a yellow square left of ", ""),
    ("a red cross left of ", ""),
    ("a yellow disk above ", " and a red disk"),
    ("a green cross above ", ""),
)


def context_variants(core_phrase: str, c: int, seed: int = 0) -> list[tuple[str, int]]:
    """Embed the identical core characters in `c` distinct frames.
    Returns (text, core offset) pairs."""
    if c < 2:
        raise ContractError(f"context variance needs at least 2 variants, got {c}")
    if c > len(CONTEXT_FRAMES):
        raise ContractError(f"only {len(CONTEXT_FRAMES)} context frames exist, got c={c}")
    if not core_phrase:
        raise ContractError("empty core phrase")
    rng = Rng(seed)
    order = list(range(len(CONTEXT_FRAMES)))
    rng.shuffle(order)
    out = []
    for fi in order[:c]:
        prefix, suffix = CONTEXT_FRAMES[fi]
        out.append((prefix + core_phrase + suffix, len(prefix)))
    return out


@dataclass
class DatasetConfig:
    seed: int = 0
    matching: int = 0
    vqa: int = 0
    context_probes: int = 0
    congruence_probes: int = 0
    grid_size: int = 8
    min_objects: int = 1
    max_objects: int = 4
    candidates: int = 4
    contexts: int = 4

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        for name in ("matching", "vqa", "context_probes", "congruence_probes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"count {name} must be nonnegative")
        if not 1 <= self.min_objects <= self.max_objects <= 10:
            raise ConfigError("object count range must satisfy 1 <= min <= max <= 10")
        if self.grid_size * self.grid_size < self.max_objects:
            raise ConfigError("grid too small for max_objects")
        if self.candidates < 2:
            raise ConfigError("matching needs at least 2 candidates")
        if not 2 <= self.contexts <= len(CONTEXT_FRAMES):
            raise ConfigError(f"contexts must be in [2, {len(CONTEXT_FRAMES)}]")


def _draw_complexity(rng: Rng, cfg: DatasetConfig) -> int:
    return cfg.min_objects + rng.randint(cfg.max_objects - cfg.min_objects + 1)


def _distractor_text(rng: Rng, cfg: DatasetConfig, avoid: set[str]) -> str:
    for _ in range(1000):
        scene = gen_scene(rng.next_u64(), _draw_complexity(rng, cfg), cfg.grid_size)
        text = render_caption(scene, rng.next_u64()).text
        if text not in avoid:
            return text
    raise ContractError("could not draw a distinct distractor caption")


def _vqa_payload(rng: Rng, scene: Scene) -> dict | None:
    """Build one well-posed question; None when the scene supports no
    unambiguous question (the caller redraws the scene)."""
    objs = scene.objects
    shapes = [o.shape for o in objs]
    colors = [o.color for o in objs]
    pairs = [(o.color, o.shape) for o in objs]
    unique_shape = [i for i, o in enumerate(objs) if shapes.count(o.shape) == 1]
    unique_color = [i for i, o in enumerate(objs) if colors.count(o.color) == 1]
    unique_pair = [i for i, o in enumerate(objs) if pairs.count((o.color, o.shape)) == 1]
    kinds = []
    if unique_shape:
        kinds.append("color")
    if unique_color:
        kinds.append("shape")
    if len(unique_pair) >= 2:
        kinds.append("relation")
    if not kinds:
        return None
    qtype = kinds[rng.randint(len(kinds))]
    if qtype == "color":
        i = unique_shape[rng.randint(len(unique_shape))]
        return {
            "question": f"what color is the {objs[i].shape}?",
            "answer": objs[i].color,
            "qtype": "color",
            "target": [i],
        }
    if qtype == "shape":
        i = unique_color[rng.randint(len(unique_color))]
        return {
            "question": f"what shape is the {objs[i].color} one?",
            "answer": objs[i].shape,
            "qtype": "shape",
            "target": [i],
        }
    i = unique_pair[rng.randint(len(unique_pair))]
    j = i
    while j == i:
        j = unique_pair[rng.randint(len(unique_pair))]
    a, b = objs[i], objs[j]
    rels = []
    if a.cell[1] < b.cell[1]:
        rels.append("left of")
    if a.cell[1] > b.cell[1]:
        rels.append("right of")
    if a.cell[0] < b.cell[0]:
        rels.append("above")
    if a.cell[0] > b.cell[0]:
        rels.append("below")
    if max(abs(a.cell[0] - b.cell[0]), abs(a.cell[1] - b.cell[1])) == 1:
        rels.append("next to")
    answer = rels[rng.randint(len(rels))]
    return {
        "question": f"where is the {a.color} {a.shape} relative to the {b.color} {b.shape}?",
        "answer": answer,
        "qtype": "relation",
        "target": [i, j],
    }


def build_item(item_id: int, kind: str, item_seed: int, cfg: DatasetConfig) -> TaskItem:
    rng = Rng(item_seed)
    if kind == "matching":
        scene = gen_scene(rng.next_u64(), _draw_complexity(rng, cfg), cfg.grid_size)
        caption = render_caption(scene, rng.next_u64())
        texts = [caption.text]
        avoid = {caption.text}
        for _ in range(cfg.candidates - 1):
            t = _distractor_text(rng, cfg, avoid)
            texts.append(t)
            avoid.add(t)
        order = list(range(len(texts)))
        rng.shuffle(order)
        payload = {
            "candidates": [texts[k] for k in order],
            "correct_index": order.index(0),
        }
    elif kind == "vqa":
        while True:
            scene = gen_scene(rng.next_u64(), _draw_complexity(rng, cfg), cfg.grid_size)
            payload = _vqa_payload(rng, scene)
            if payload is not None:
                break
        caption = render_caption(scene, rng.next_u64())
    elif kind == "context_probe":
        scene = gen_scene(rng.next_u64(), 1, cfg.grid_size)
        caption = render_caption(scene, rng.next_u64())
        variants = context_variants(caption.text, cfg.contexts, seed=rng.next_u64())
        payload = {
            "core": caption.text,
            "variants": [{"text": t, "offset": off} for t, off in variants],
        }
    elif kind == "congruence_probe":
        scene = gen_scene(rng.next_u64(), _draw_complexity(rng, cfg), cfg.grid_size)
        caption = render_caption(scene, rng.next_u64())
        payload = {
            "matched": caption.text,
            "mismatched": _distractor_text(rng, cfg, {caption.text}),
        }
    else:
        raise ContractError(f"unknown item kind {kind!r}")
    return TaskItem(
        item_id=item_id,
        kind=kind,
        seed=item_seed,
        scene=scene,
        raster=render_raster(scene),
        caption=caption,
        payload=payload,
    )


def item_to_record(item: TaskItem) -> dict:
    return {
        "id": item.item_id,
        "kind": item.kind,
        "seed": item.seed,
        "scene": {
            "grid_size": item.scene.grid_size,
            "objects": [
                {"shape": o.shape, "color": o.color, "cell": list(o.cell)}
                for o in item.scene.objects
            ],
        },
        "raster": item.raster.astype(int).tolist(),
        "caption": {
            "text": item.caption.text,
            "mention_spans": [list(s) for s in item.caption.mention_spans],
        },
        "alignment": alignment_entries(item.scene, item.caption),
        "payload": item.payload,
    }


def record_to_item(rec: dict) -> TaskItem:
    scene = Scene(
        grid_size=rec["scene"]["grid_size"],
        objects=[
            SceneObject(shape=o["shape"], color=o["color"], cell=tuple(o["cell"]))
            for o in rec["scene"]["objects"]
        ],
    )
    return TaskItem(
        item_id=rec["id"],
        kind=rec["kind"],
        seed=rec["seed"],
        scene=scene,
        raster=np.array(rec["raster"], dtype=np.float64),
        caption=Caption(
            text=rec["caption"]["text"],
            mention_spans=[tuple(s) for s in rec["caption"]["mention_spans"]],
        ),
        payload=rec["payload"],
    )


_SPLIT_SALT = 0x5B8D_2F33_9C41_77E5
_KIND_ORDER = ("matching", "vqa", "context_probe", "congruence_probe")


def _split_ids(ids: list[int], seed: int) -> dict[str, list[int]]:
    """Rank the ids by a seeded hash and cut at 80/90 percent; exact to
    within rounding, unlike an independent per-item coin flip."""
    ranked = sorted(ids, key=lambda i: (derive_seed(seed ^ _SPLIT_SALT, i), i))
    n = len(ranked)
    a, b = math.floor(0.8 * n), math.floor(0.9 * n)
    return {
        "train": sorted(ranked[:a]),
        "val": sorted(ranked[a:b]),
        "test": sorted(ranked[b:]),
    }


def generate_items(cfg: DatasetConfig) -> list[TaskItem]:
    cfg.validate()
    counts = {
        "matching": cfg.matching,
        "vqa": cfg.vqa,
        "context_probe": cfg.context_probes,
        "congruence_probe": cfg.congruence_probes,
    }
    items = []
    item_id = 0
    for kind in _KIND_ORDER:
        for _ in range(counts[kind]):
            items.append(build_item(item_id, kind, derive_seed(cfg.seed, item_id), cfg))
            item_id += 1
    return items


def _header(cfg: DatasetConfig, split: str, count: int) -> dict:
    return {
        "schema": "dcmt-dataset-v1",
        "split": split,
        "count": count,
        "config": dataclasses.asdict(cfg),
    }


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def make_dataset(cfg: DatasetConfig, out_dir: str) -> dict[str, str]:
    """Generate all items, split them, and write one JSONL per split.
    The first line of each file is a header record; every later line is
    one item. Returns the split → path map."""
    items = generate_items(cfg)
    by_id = {it.item_id: it for it in items}
    split_ids: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for kind in _KIND_ORDER:
        kind_ids = [it.item_id for it in items if it.kind == kind]
        for split, ids in _split_ids(kind_ids, cfg.seed).items():
            split_ids[split].extend(ids)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split in ("train", "val", "test"):
        ids = sorted(split_ids[split])
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w") as f:
            f.write(_dump(_header(cfg, split, len(ids))) + "\n")
            for i in ids:
                f.write(_dump(item_to_record(by_id[i])) + "\n")
        paths[split] = path
    return paths


def load_dataset(path: str) -> tuple[dict, list[TaskItem]]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ContractError(f"{path} is empty; expected a header line")
    header = json.loads(lines[0])
    if header.get("schema") != "dcmt-dataset-v1":
        raise ContractError(f"{path} does not carry a dcmt-dataset-v1 header")
    return header, [record_to_item(json.loads(line)) for line in lines[1:]]
