"""Synthetic retrieval world: attribute grids, edit instructions, triplets.

Stands in for a real CIR dataset and for the generative pseudo-target model.
A candidate universe of distinct grids is grown by chained single-attribute
edits; triplets are (reference, instruction, target) edges sampled inside
that universe, so every reference and target is a candidate.  The edit
oracle ``apply_instruction`` plays the role of the pseudo-target generator;
``corrupt_target`` produces the noisy "real target" analogue.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InstructionError

FORMAT_TAG = "tmcir-world/1"

KIND_SHAPE = "shape"
KIND_COLOR = "color"


@dataclass(frozen=True)
class WorldConfig:
    height: int = 4
    width: int = 4
    n_shapes: int = 5
    n_colors: int = 6
    n_triplets: int = 2560    # split 8:1:1 -> 2048 train by default
    n_candidates: int = 256
    p_noise: float = 0.3

    def __post_init__(self):
        if min(self.height, self.width) < 1:
            raise ConfigError(f"config: grid must be at least 1x1, "
                              f"got {self.height}x{self.width}")
        if self.n_shapes < 1 or self.n_colors < 1:
            raise ConfigError("config: need at least one shape and one color")
        if self.n_shapes < 2 and self.n_colors < 2:
            raise ConfigError("config: edits need a second value for some attribute")
        if not 0.0 <= self.p_noise <= 1.0:
            raise ConfigError(f"config: p_noise must be in [0, 1], got {self.p_noise}")
        if self.n_triplets < 0 or self.n_candidates < 2:
            raise ConfigError("config: need n_triplets >= 0 and n_candidates >= 2")
        space = (self.n_shapes * self.n_colors) ** (self.height * self.width)
        if space < self.n_candidates:
            raise ConfigError(
                f"config: only {space} distinct grids exist, cannot build "
                f"{self.n_candidates} candidates")

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "n_shapes": self.n_shapes, "n_colors": self.n_colors,
                "n_triplets": self.n_triplets, "n_candidates": self.n_candidates,
                "p_noise": self.p_noise}


@dataclass(frozen=True)
class AttributeGrid:
    height: int
    width: int
    cells: tuple[tuple[int, int], ...]   # row-major (shape_id, color_id)

    def __post_init__(self):
        if len(self.cells) != self.height * self.width:
            raise ConfigError(
                f"grid has {len(self.cells)} cells, expected "
                f"{self.height}x{self.width}")

    def cell(self, row: int, col: int) -> tuple[int, int]:
        return self.cells[row * self.width + col]

    def to_lists(self) -> list[list[int]]:
        return [[s, c] for s, c in self.cells]

    @classmethod
    def from_lists(cls, height: int, width: int, cells) -> "AttributeGrid":
        return cls(height, width, tuple((int(s), int(c)) for s, c in cells))


@dataclass(frozen=True)
class Edit:
    row: int
    col: int
    kind: str        # "shape" or "color"
    value: int

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "kind": self.kind,
                "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Edit":
        return cls(int(d["row"]), int(d["col"]), str(d["kind"]), int(d["value"]))


class Vocabulary:
    """Closed templated vocabulary: set / row / col / kind / value tokens.

    Renders an ``Edit`` to token ids and parses them back (a bijection on the
    reachable edit space).
    """

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        names = ["set"]
        names += [f"row-{r}" for r in range(cfg.height)]
        names += [f"col-{c}" for c in range(cfg.width)]
        names += ["shape", "color"]
        names += [f"shape-{v}" for v in range(cfg.n_shapes)]
        names += [f"color-{v}" for v in range(cfg.n_colors)]
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}

    @property
    def size(self) -> int:
        return len(self.names)

    def render(self, edit: Edit) -> list[int]:
        try:
            return [self.index["set"],
                    self.index[f"row-{edit.row}"],
                    self.index[f"col-{edit.col}"],
                    self.index[edit.kind],
                    self.index[f"{edit.kind}-{edit.value}"]]
        except KeyError as exc:
            raise InstructionError(f"edit {edit} not expressible: {exc}") from exc

    def parse(self, token_ids) -> Edit:
        if len(token_ids) != 5:
            raise InstructionError(f"instruction must have 5 tokens, got {len(token_ids)}")
        words = []
        for tid in token_ids:
            if not 0 <= tid < self.size:
                raise InstructionError(f"token id {tid} outside vocabulary")
            words.append(self.names[tid])
        if words[0] != "set" or not words[1].startswith("row-") \
                or not words[2].startswith("col-") or words[3] not in (KIND_SHAPE, KIND_COLOR):
            raise InstructionError(f"malformed instruction {words}")
        kind = words[3]
        if not words[4].startswith(kind + "-"):
            raise InstructionError(f"value token {words[4]} does not match kind {kind}")
        return Edit(row=int(words[1][4:]), col=int(words[2][4:]), kind=kind,
                    value=int(words[4][len(kind) + 1:]))


@dataclass
class TripletSample:
    id: int
    reference: AttributeGrid
    token_ids: list[int]
    edit: Edit
    target: AttributeGrid
    pseudo_target: AttributeGrid
    noisy_target: AttributeGrid
    split: str


@dataclass
class Dataset:
    config: WorldConfig
    seed: int
    samples: list[TripletSample]
    candidates: list[AttributeGrid]

    def split(self, name: str) -> list[TripletSample]:
        return [s for s in self.samples if s.split == name]

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.config)


def apply_instruction(ref: AttributeGrid, edit: Edit) -> AttributeGrid:
    """The deterministic edit oracle: change exactly the instructed attribute."""
    if not (0 <= edit.row < ref.height and 0 <= edit.col < ref.width):
        raise InstructionError(
            f"edit cell ({edit.row}, {edit.col}) outside {ref.height}x{ref.width} grid")
    if edit.kind not in (KIND_SHAPE, KIND_COLOR):
        raise InstructionError(f"unknown edit kind {edit.kind!r}")
    cells = list(ref.cells)
    k = edit.row * ref.width + edit.col
    s, c = cells[k]
    cells[k] = (edit.value, c) if edit.kind == KIND_SHAPE else (s, edit.value)
    return AttributeGrid(ref.height, ref.width, tuple(cells))


def corrupt_target(t: AttributeGrid, edit_cell: tuple[int, int], p_noise: float,
                   seed: int, cfg: WorldConfig) -> AttributeGrid:
    """Re-randomize each non-edited cell with probability p_noise (seeded)."""
    if not 0.0 <= p_noise <= 1.0:
        raise ConfigError(f"p_noise must be in [0, 1], got {p_noise}")
    rng = np.random.default_rng(seed)
    keep = edit_cell[0] * t.width + edit_cell[1]
    cells = list(t.cells)
    for k in range(len(cells)):
        if k == keep:
            continue
        if rng.random() < p_noise:
            cells[k] = (int(rng.integers(cfg.n_shapes)), int(rng.integers(cfg.n_colors)))
    return AttributeGrid(t.height, t.width, tuple(cells))


def _random_grid(cfg: WorldConfig, rng: np.random.Generator) -> AttributeGrid:
    cells = tuple(
        (int(rng.integers(cfg.n_shapes)), int(rng.integers(cfg.n_colors)))
        for _ in range(cfg.height * cfg.width))
    return AttributeGrid(cfg.height, cfg.width, cells)


def _random_edit(grid: AttributeGrid, cfg: WorldConfig,
                 rng: np.random.Generator) -> Edit:
    """A single-attribute edit guaranteed to change the grid."""
    while True:
        row = int(rng.integers(cfg.height))
        col = int(rng.integers(cfg.width))
        s, c = grid.cell(row, col)
        kind = KIND_SHAPE if rng.random() < 0.5 else KIND_COLOR
        n = cfg.n_shapes if kind == KIND_SHAPE else cfg.n_colors
        if n < 2:
            continue
        value = int(rng.integers(n))
        current = s if kind == KIND_SHAPE else c
        if value != current:
            return Edit(row, col, kind, value)


def _single_attribute_diff(a: AttributeGrid, b: AttributeGrid) -> Edit | None:
    """The edit turning a into b, if they differ in exactly one attribute."""
    found: Edit | None = None
    for k, (ca, cb) in enumerate(zip(a.cells, b.cells)):
        if ca == cb:
            continue
        if found is not None:
            return None
        if ca[0] != cb[0] and ca[1] != cb[1]:
            return None
        kind = KIND_SHAPE if ca[0] != cb[0] else KIND_COLOR
        value = cb[0] if kind == KIND_SHAPE else cb[1]
        found = Edit(k // a.width, k % a.width, kind, value)
    return found


def generate_dataset(cfg: WorldConfig, seed: int) -> Dataset:
    """Pure function of (config, seed): universe, edit edges, split triplets."""
    rng = np.random.default_rng(seed)
    universe = [_random_grid(cfg, rng)]
    seen = {universe[0].cells}
    attempts = 0
    while len(universe) < cfg.n_candidates:
        attempts += 1
        if attempts > 1000 * cfg.n_candidates:
            raise ConfigError("config: candidate universe did not fill; "
                              "attribute space too small")
        parent = universe[int(rng.integers(len(universe)))]
        child = apply_instruction(parent, _random_edit(parent, cfg, rng))
        if child.cells not in seen:
            seen.add(child.cells)
            universe.append(child)

    # every ordered pair differing in exactly one attribute is a usable edge
    edges: list[tuple[int, Edit, int]] = []
    for a_idx, a in enumerate(universe):
        for b_idx, b in enumerate(universe):
            if a_idx == b_idx:
                continue
            edit = _single_attribute_diff(a, b)
            if edit is not None:
                edges.append((a_idx, edit, b_idx))
    if cfg.n_triplets > 0 and not edges:
        raise ConfigError("config: no single-edit pairs in the candidate universe")

    vocab = Vocabulary(cfg)
    n = cfg.n_triplets
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    samples = []
    for i in range(n):
        ref_idx, edit, tgt_idx = edges[int(rng.integers(len(edges)))]
        ref = universe[ref_idx]
        target = universe[tgt_idx]
        pseudo = apply_instruction(ref, edit)
        noisy = corrupt_target(target, (edit.row, edit.col), cfg.p_noise,
                               seed=int(rng.integers(2**31 - 1)), cfg=cfg)
        samples.append(TripletSample(
            id=i, reference=ref, token_ids=vocab.render(edit), edit=edit,
            target=target, pseudo_target=pseudo, noisy_target=noisy,
            split=splits[i]))
    return Dataset(config=cfg, seed=seed, samples=samples, candidates=universe)


# -- serialization: JSON lines, fixed key order, no extra whitespace --


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _header(dataset: Dataset) -> str:
    return _dump({"format": FORMAT_TAG, "seed": dataset.seed,
                  "config": dataset.config.to_dict()})


def write_dataset(dataset: Dataset, out_dir) -> dict[str, int]:
    """Write train/val/test/candidates JSON-lines files; returns counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "val", "test"):
        lines = [_header(dataset)]
        for s in dataset.split(split):
            lines.append(_dump({
                "id": s.id, "h": s.reference.height, "w": s.reference.width,
                "ref": s.reference.to_lists(), "ins": s.token_ids,
                "edit": s.edit.to_dict(), "tgt": s.target.to_lists(),
                "pseudo": s.pseudo_target.to_lists(),
                "noisy": s.noisy_target.to_lists(), "split": s.split}))
        (out / f"{split}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        counts[split] = len(lines) - 1
    lines = [_header(dataset)]
    for cid, grid in enumerate(dataset.candidates):
        lines.append(_dump({"id": cid, "h": grid.height, "w": grid.width,
                            "cells": grid.to_lists()}))
    (out / "candidates.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    counts["candidates"] = len(dataset.candidates)
    return counts


def _read_lines(path: Path) -> tuple[dict, list[dict]]:
    if not path.is_file():
        raise DataError(f"missing dataset file {path}")
    header = None
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name}: parse error at line {lineno}: {exc}") from exc
            if lineno == 1:
                if obj.get("format") != FORMAT_TAG:
                    raise DataError(f"{path.name}: line 1: unknown format {obj.get('format')!r}")
                header = obj
            else:
                rows.append((lineno, obj))
    if header is None:
        raise DataError(f"{path.name}: empty file, missing header")
    return header, rows


def read_dataset(in_dir) -> Dataset:
    """Lossless inverse of ``write_dataset``."""
    base = Path(in_dir)
    header, _ = _read_lines(base / "train.jsonl")
    cfg = WorldConfig(**header["config"])
    samples = []
    for split in ("train", "val", "test"):
        _, rows = _read_lines(base / f"{split}.jsonl")
        for lineno, obj in rows:
            try:
                h, w = int(obj["h"]), int(obj["w"])
                samples.append(TripletSample(
                    id=int(obj["id"]),
                    reference=AttributeGrid.from_lists(h, w, obj["ref"]),
                    token_ids=[int(t) for t in obj["ins"]],
                    edit=Edit.from_dict(obj["edit"]),
                    target=AttributeGrid.from_lists(h, w, obj["tgt"]),
                    pseudo_target=AttributeGrid.from_lists(h, w, obj["pseudo"]),
                    noisy_target=AttributeGrid.from_lists(h, w, obj["noisy"]),
                    split=str(obj["split"])))
            except (KeyError, TypeError, ValueError, ConfigError) as exc:
                raise DataError(
                    f"{split}.jsonl: malformed record at line {lineno}: {exc}") from exc
    _, rows = _read_lines(base / "candidates.jsonl")
    candidates = []
    for lineno, obj in rows:
        try:
            candidates.append(AttributeGrid.from_lists(
                int(obj["h"]), int(obj["w"]), obj["cells"]))
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise DataError(
                f"candidates.jsonl: malformed record at line {lineno}: {exc}") from exc
    samples.sort(key=lambda s: s.id)
    return Dataset(config=cfg, seed=int(header["seed"]), samples=samples,
                   candidates=candidates)
