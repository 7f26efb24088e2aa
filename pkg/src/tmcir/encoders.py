"""Small trainable visual and text encoders.

Both encoders share one recipe: look up an embedding row per input symbol,
add the fixed sinusoidal positional row, then apply a trainable affine mixing
layer.  Outputs are token sequences (one row per grid cell / instruction
token) that also carry their positional rows for the fusion stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .diffcore import Tape, Var, gather_rows, l2_normalize_rows, matmul, mean_rows
from .errors import ConfigError, EmptySequenceError, EncodingError
from .params import ParameterStore


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions shared by both encoders."""

    n_shapes: int
    n_colors: int
    vocab_size: int
    d: int

    def __post_init__(self):
        if self.d <= 0 or self.d % 2 != 0:
            raise ConfigError(f"model dimension must be a positive even number, got {self.d}")
        if min(self.n_shapes, self.n_colors, self.vocab_size) < 1:
            raise ConfigError("attribute ranges and vocabulary must be non-empty")

    def to_dict(self) -> dict:
        return {"n_shapes": self.n_shapes, "n_colors": self.n_colors,
                "vocab_size": self.vocab_size, "d": self.d}


@dataclass
class TokenSequence:
    """Encoder output: token rows plus their (fixed) positional rows."""

    tokens: Var          # (length, d)
    positions: np.ndarray  # (length, d), non-trainable
    length: int


@lru_cache(maxsize=None)
def _positions_cached(n: int, d: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = k / np.power(10000.0, 2.0 * i / d)
    out = np.empty((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    out.setflags(write=False)
    return out


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed positional rows: col 2i = sin(k / 10000^(2i/d)), col 2i+1 = cos."""
    if d <= 0 or d % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    if n < 1:
        raise ConfigError(f"positional encoding needs n >= 1, got {n}")
    return _positions_cached(n, d)


def init_encoder_store(spec: ModelSpec, rng: np.random.Generator) -> ParameterStore:
    """Seeded initialization: embeddings U(-0.1, 0.1), mixing layers near identity."""
    store = ParameterStore()
    d = spec.d
    store.add("visual.cell_embedding",
              rng.uniform(-0.1, 0.1, size=(spec.n_shapes * spec.n_colors, d)))
    store.add("visual.mix_w", np.eye(d) + rng.uniform(-0.01, 0.01, size=(d, d)))
    store.add("visual.mix_b", np.zeros((1, d)))
    store.add("text.vocab_embedding", rng.uniform(-0.1, 0.1, size=(spec.vocab_size, d)))
    store.add("text.mix_w", np.eye(d) + rng.uniform(-0.01, 0.01, size=(d, d)))
    store.add("text.mix_b", np.zeros((1, d)))
    return store


def _visual_row_ids(grid, spec: ModelSpec) -> list[int]:
    ids = []
    for k, (shape_id, color_id) in enumerate(grid.cells):
        if not (0 <= shape_id < spec.n_shapes and 0 <= color_id < spec.n_colors):
            raise EncodingError(
                f"cell {k} attributes ({shape_id}, {color_id}) outside "
                f"{spec.n_shapes} shapes x {spec.n_colors} colors")
        ids.append(shape_id * spec.n_colors + color_id)
    return ids


def encode_visual(grid, params: Mapping[str, Var], spec: ModelSpec) -> TokenSequence:
    """Encode a grid cell-by-cell in row-major order: mix(embedding + position)."""
    ids = _visual_row_ids(grid, spec)
    pos = sinusoidal_positions(len(ids), spec.d)
    table = params["visual.cell_embedding"]
    raw = gather_rows(table, ids) + Var(pos, table.tape)
    tokens = matmul(raw, params["visual.mix_w"]) + params["visual.mix_b"]
    return TokenSequence(tokens=tokens, positions=pos, length=len(ids))


def encode_text(token_ids: Sequence[int], params: Mapping[str, Var],
                spec: ModelSpec) -> TokenSequence:
    """Encode an instruction token-by-token, order preserved."""
    if len(token_ids) == 0:
        raise EmptySequenceError("cannot encode an empty instruction")
    for offset, tid in enumerate(token_ids):
        if not 0 <= tid < spec.vocab_size:
            raise EncodingError(
                f"token id {tid} at offset {offset} outside vocabulary of "
                f"{spec.vocab_size}")
    pos = sinusoidal_positions(len(token_ids), spec.d)
    table = params["text.vocab_embedding"]
    raw = gather_rows(table, list(token_ids)) + Var(pos, table.tape)
    tokens = matmul(raw, params["text.mix_w"]) + params["text.mix_b"]
    return TokenSequence(tokens=tokens, positions=pos, length=len(token_ids))


def pooled_feature(seq: TokenSequence) -> Var:
    """Mean of token rows, L2-normalized: the stage-1 / candidate feature."""
    return l2_normalize_rows(mean_rows(seq.tokens))


# -- batched variants (same math, fewer graph nodes per training step) --


def pooled_visual_batch(grids: Sequence, params: Mapping[str, Var],
                        spec: ModelSpec) -> Var:
    """Pooled, normalized features for a batch of equally sized grids, (B, d)."""
    if not grids:
        raise EmptySequenceError("empty visual batch")
    per = len(grids[0].cells)
    ids: list[int] = []
    for g in grids:
        if len(g.cells) != per:
            raise EncodingError("visual batch requires equally sized grids")
        ids.extend(_visual_row_ids(g, spec))
    table = params["visual.cell_embedding"]
    pos = np.tile(sinusoidal_positions(per, spec.d), (len(grids), 1))
    raw = gather_rows(table, ids) + Var(pos, table.tape)
    tokens = matmul(raw, params["visual.mix_w"]) + params["visual.mix_b"]
    pool = np.kron(np.eye(len(grids)), np.full((1, per), 1.0 / per))
    return l2_normalize_rows(matmul(Var(pool, table.tape), tokens))


def pooled_text_batch(instructions: Sequence[Sequence[int]],
                      params: Mapping[str, Var], spec: ModelSpec) -> Var:
    """Pooled, normalized features for a batch of equal-length instructions."""
    if not instructions:
        raise EmptySequenceError("empty text batch")
    per = len(instructions[0])
    if any(len(ins) != per for ins in instructions):
        # mixed lengths: fall back to the per-sample path
        from .diffcore import concat_rows
        rows = [pooled_feature(encode_text(ins, params, spec)) for ins in instructions]
        return concat_rows(rows)
    if per == 0:
        raise EmptySequenceError("cannot encode an empty instruction")
    flat: list[int] = []
    for ins in instructions:
        for offset, tid in enumerate(ins):
            if not 0 <= tid < spec.vocab_size:
                raise EncodingError(
                    f"token id {tid} at offset {offset} outside vocabulary of "
                    f"{spec.vocab_size}")
        flat.extend(ins)
    table = params["text.vocab_embedding"]
    pos = np.tile(sinusoidal_positions(per, spec.d), (len(instructions), 1))
    raw = gather_rows(table, flat) + Var(pos, table.tape)
    tokens = matmul(raw, params["text.mix_w"]) + params["text.mix_b"]
    pool = np.kron(np.eye(len(instructions)), np.full((1, per), 1.0 / per))
    return l2_normalize_rows(matmul(Var(pool, table.tape), tokens))
