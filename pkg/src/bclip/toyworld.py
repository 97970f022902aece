"""Synthetic grid scenes with captions and exact region-phrase ground truth.

A scene is a G x G grid. ``M`` cells hold an object described by a
(shape, color, size) triple; every other cell holds the background triple
(0, 0, 0). Attribute id 0 is reserved for background, so real attribute
values run from 1 to ``n_<attr>``.

Captions are token sequences over a closed vocabulary (see ``VOCAB``). Each
object gets one sentence, plus one relation sentence about the first two
objects; the caption is their concatenation in row-major object order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import ConfigError, Tensor
from .rng import Rng

SHAPES = ("square", "circle", "triangle", "star", "cross", "diamond", "heart", "ring")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
SIZES = ("small", "medium", "large", "huge")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
N_HARD_NEGATIVES = 10

PAD = "<pad>"
FUNCTION_WORDS = ("a", "the", "at", "to", "of", "is", "on", "in", "next", "near", ".",
                  "there", "are", "objects", "one", "two", "three", "four", "and")
SPATIAL_WORDS = ("left", "right", "top", "bottom", "center", "middle", "near", "front", "back")
VOCAB: tuple = tuple(dict.fromkeys((PAD,) + FUNCTION_WORDS + SHAPES + COLORS + SIZES + SPATIAL_WORDS))
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

# static POS lexicon for the closed vocabulary
POS_LEXICON = {tok: "OTHER" for tok in VOCAB}
POS_LEXICON.update({"a": "DET", "the": "DET", "is": "VERB", "are": "VERB"})
POS_LEXICON.update({w: "ADP" for w in ("at", "to", "of", "on", "in", "next")})
POS_LEXICON.update({w: "NOUN" for w in SHAPES + ("objects",)})
POS_LEXICON.update({w: "ADJ" for w in COLORS + SIZES})
POS_LEXICON.update({w: "SPATIAL" for w in SPATIAL_WORDS})


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 7
    n_objects: int = 4
    n_shapes: int = 6
    n_colors: int = 6
    n_sizes: int = 3
    distinct_objects: bool = True

    def validate(self) -> None:
        g2 = self.grid_size * self.grid_size
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if not 1 <= self.n_objects <= g2:
            raise ConfigError(f"n_objects={self.n_objects} must lie in [1, {g2}]")
        for name, n, cap in (("n_shapes", self.n_shapes, len(SHAPES)),
                             ("n_colors", self.n_colors, len(COLORS)),
                             ("n_sizes", self.n_sizes, len(SIZES))):
            if not 2 <= n <= cap:
                raise ConfigError(f"{name}={n} must lie in [2, {cap}]")
        swaps = self.n_shapes + self.n_colors + self.n_sizes - 3
        if swaps < N_HARD_NEGATIVES:
            raise ConfigError(f"only {swaps} single-attribute swaps; need {N_HARD_NEGATIVES}")
        if self.distinct_objects and self.n_objects > self.n_shapes * self.n_colors * self.n_sizes:
            raise ConfigError("too many objects for distinct attribute triples")

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        """Per-attribute vocabulary sizes, background included."""
        return self.n_shapes + 1, self.n_colors + 1, self.n_sizes + 1

    @property
    def d_in(self) -> int:
        return sum(self.vocab_sizes)


@dataclass
class Scene:
    grid_size: int
    cells: np.ndarray  # (G, G, 3) attribute ids, 0 = background
    occupancy: np.ndarray  # (G, G) bool

    @property
    def objects(self) -> list[tuple[int, int, int, int, int]]:
        """(row, col, shape, color, size) in row-major order."""
        rows, cols = np.nonzero(self.occupancy)
        return [(int(r), int(c), *map(int, self.cells[r, c])) for r, c in zip(rows, cols)]


@dataclass
class RegionAnnotation:
    box: tuple[int, int, int, int]  # inclusive (row0, col0, row1, col1)
    phrase_index: int

    def patch_indices(self, grid_size: int) -> list[int]:
        r0, c0, r1, c1 = self.box
        if r0 > r1 or c0 > c1:
            raise ValueError(f"empty box {self.box}")
        if min(self.box) < 0 or max(r1, c1) >= grid_size:
            raise ValueError(f"box {self.box} outside a {grid_size}x{grid_size} grid")
        return [r * grid_size + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


@dataclass
class ToyCaptionSet:
    caption: list[str]
    sentences: list[list[str]]
    phrases: list[list[str]]
    phrase_kinds: list[str]
    hard_negatives: list[list[list[str]]] = field(default_factory=list)  # per annotation


def generate_scene(rng: Rng, cfg: WorldConfig) -> Scene:
    cfg.validate()
    g = cfg.grid_size
    positions = rng.choice(g * g, cfg.n_objects)
    while True:
        triples = np.stack([
            1 + rng.integers(cfg.n_shapes, size=cfg.n_objects),
            1 + rng.integers(cfg.n_colors, size=cfg.n_objects),
            1 + rng.integers(cfg.n_sizes, size=cfg.n_objects),
        ], axis=1)
        if not cfg.distinct_objects or len({tuple(t) for t in triples}) == cfg.n_objects:
            break
    cells = np.zeros((g, g, 3), dtype=np.int64)
    occ = np.zeros((g, g), dtype=bool)
    for pos, t in zip(positions, triples):
        r, c = divmod(int(pos), g)
        cells[r, c] = t
        occ[r, c] = True
    return Scene(g, cells, occ)


def describe(shape: int, color: int, size: int) -> list[str]:
    return [COLORS[color - 1], SIZES[size - 1], SHAPES[shape - 1]]


def _location(r: int, c: int, g: int) -> list[str]:
    return [ROW_WORDS[r * 3 // g], COL_WORDS[c * 3 // g]]


def _relation(a, b) -> list[str]:
    (ra, ca), (rb, cb) = a[:2], b[:2]
    if ca != cb:
        return ["is", "to", "the", "left" if ca < cb else "right", "of"]
    return ["is", "at", "the", "top" if ra < rb else "bottom", "of"]


def _hard_negatives(shape: int, color: int, size: int, cfg: WorldConfig, rng: Rng) -> list[list[str]]:
    swaps = ([(s, color, size) for s in range(1, cfg.n_shapes + 1) if s != shape]
             + [(shape, c, size) for c in range(1, cfg.n_colors + 1) if c != color]
             + [(shape, color, z) for z in range(1, cfg.n_sizes + 1) if z != size])
    pick = sorted(rng.choice(len(swaps), N_HARD_NEGATIVES))
    return [describe(*swaps[i]) for i in pick]


def generate_annotations(scene: Scene, rng: Rng, cfg: WorldConfig | None = None
                         ) -> tuple[ToyCaptionSet, list[RegionAnnotation]]:
    cfg = cfg or WorldConfig(grid_size=scene.grid_size,
                             n_objects=int(scene.occupancy.sum()))
    g = scene.grid_size
    objs = scene.objects
    sentences, phrases, kinds = [], [], []
    annotations, negatives = [], []
    for r, c, s, col, z in objs:
        desc = describe(s, col, z)
        where = ["at", "the", *_location(r, c, g)]
        sentences.append(["a", *desc, *where, "."])
        annotations.append(RegionAnnotation((r, c, r, c), len(phrases)))
        phrases.append(desc)
        kinds.append("object")
        negatives.append(_hard_negatives(s, col, z, cfg, rng))
    for r, c, *_ in objs:
        phrases.append(["at", "the", *_location(r, c, g)])
        kinds.append("location")
    if len(objs) >= 2:
        a, b = objs[0], objs[1]
        rel = _relation(a, b)
        sentences.append(["the", *describe(*a[2:]), *rel, "the", *describe(*b[2:]), "."])
        phrases.append(rel[1:])
        kinds.append("relation")
    caption = [tok for sent in sentences for tok in sent]
    return ToyCaptionSet(caption, sentences, phrases, kinds, negatives), annotations


def render_patch_input(scene: Scene, cfg: WorldConfig | None = None, dtype=np.float32) -> Tensor:
    """One-hot (shape | color | size) rows per cell, row-major: (G*G, d_in)."""
    vs = (cfg or WorldConfig()).vocab_sizes
    n = scene.grid_size ** 2
    flat = scene.cells.reshape(n, 3)
    out = np.zeros((n, sum(vs)), dtype=dtype)
    offset = 0
    for a, v in enumerate(vs):
        out[np.arange(n), offset + flat[:, a]] = 1
        offset += v
    return Tensor(out)


# --------------------------------------------------------------------------
# records and dataset files
# --------------------------------------------------------------------------


@dataclass
class Sample:
    index: int
    scene: Scene
    captions: ToyCaptionSet
    annotations: list[RegionAnnotation]


def make_sample(seed: int, split: int, index: int, cfg: WorldConfig) -> Sample:
    rng = Rng(seed).spawn(split, index)
    scene = generate_scene(rng, cfg)
    caps, ann = generate_annotations(scene, rng, cfg)
    return Sample(index, scene, caps, ann)


def generate_dataset(seed: int, count: int, cfg: WorldConfig, split: int = 0) -> list[Sample]:
    cfg.validate()
    return [make_sample(seed, split, i, cfg) for i in range(count)]


def sample_to_record(sample: Sample) -> dict:
    caps = sample.captions
    return {
        "index": sample.index,
        "grid_size": sample.scene.grid_size,
        "cells": sample.scene.cells.reshape(-1, 3).tolist(),
        "caption": caps.caption,
        "sentences": caps.sentences,
        "phrases": caps.phrases,
        "phrase_kinds": caps.phrase_kinds,
        "annotations": [
            {"box": list(a.box), "phrase_index": a.phrase_index, "hard_negatives": negs}
            for a, negs in zip(sample.annotations, caps.hard_negatives)
        ],
    }


def record_to_sample(rec: dict) -> Sample:
    g = int(rec["grid_size"])
    cells = np.asarray(rec["cells"], dtype=np.int64).reshape(g, g, 3)
    scene = Scene(g, cells, cells[..., 0] > 0)
    anns = [RegionAnnotation(tuple(a["box"]), int(a["phrase_index"])) for a in rec["annotations"]]
    caps = ToyCaptionSet(rec["caption"], rec["sentences"], rec["phrases"], rec["phrase_kinds"],
                         [a["hard_negatives"] for a in rec["annotations"]])
    return Sample(int(rec["index"]), scene, caps, anns)


def write_dataset(path: str | Path, samples, meta: dict | None = None) -> None:
    """JSON lines; an optional first line ``{"meta": ...}`` echoes the config."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")


def iter_records(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from exc
            if "meta" in rec and len(rec) == 1:
                continue
            yield rec


def read_dataset(path: str | Path) -> list[Sample]:
    return [record_to_sample(r) for r in iter_records(path)]
