"""Synthetic world: instruction rendering, edit application, corruption,
dataset generation determinism, and jsonl round-trips."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmcir.errors import ConfigError, DataError, InstructionError
from tmcir.world import (
    KIND_COLOR,
    KIND_SHAPE,
    AttributeGrid,
    Edit,
    Vocabulary,
    WorldConfig,
    apply_instruction,
    corrupt_target,
    generate_dataset,
    read_dataset,
    write_dataset,
)

CFG = WorldConfig()          # 4x4, 5 shapes, 6 colors
SMALL = WorldConfig(height=2, width=3, n_shapes=3, n_colors=4,
                    n_triplets=40, n_candidates=12)


def edits(cfg):
    return st.builds(
        Edit,
        row=st.integers(0, cfg.height - 1),
        col=st.integers(0, cfg.width - 1),
        kind=st.sampled_from([KIND_SHAPE, KIND_COLOR]),
        value=st.integers(0, min(cfg.n_shapes, cfg.n_colors) - 1),
    )


# -- config and vocabulary --


def test_config_validation_messages_are_prefixed():
    with pytest.raises(ConfigError, match="config:"):
        WorldConfig(height=0)
    with pytest.raises(ConfigError, match="config:"):
        WorldConfig(p_noise=1.5)
    with pytest.raises(ConfigError, match="config:"):
        WorldConfig(n_candidates=0)


def test_vocabulary_layout_and_size_budget():
    vocab = Vocabulary(CFG)
    # 1 verb + 4 rows + 4 cols + 2 kinds + 5 shapes + 6 colors = 22
    assert vocab.size == 22
    assert vocab.size <= 64
    assert vocab.names[0] == "set"
    assert "row-0" in vocab.names and "col-3" in vocab.names
    assert "shape" in vocab.names and "color" in vocab.names


def test_instruction_is_five_tokens_and_never_names_old_value():
    vocab = Vocabulary(CFG)
    edit = Edit(row=1, col=2, kind=KIND_COLOR, value=4)
    ids = vocab.render(edit)
    assert len(ids) == 5
    names = [vocab.names[i] for i in ids]
    assert names == ["set", "row-1", "col-2", "color", "color-4"]


@given(edits(CFG))
@settings(max_examples=200, deadline=None)
def test_render_parse_bijection(edit):
    vocab = Vocabulary(CFG)
    assert vocab.parse(vocab.render(edit)) == edit


def test_parse_rejects_malformed_sequences():
    vocab = Vocabulary(CFG)
    good = vocab.render(Edit(0, 0, KIND_SHAPE, 1))
    with pytest.raises(InstructionError):
        vocab.parse(good[:4])
    with pytest.raises(InstructionError):
        vocab.parse([good[1]] + good[1:])          # wrong verb slot
    with pytest.raises(InstructionError):
        vocab.parse(good[:3] + [good[3]] + [good[2]])   # value slot not a value


def test_parse_rejects_kind_value_mismatch():
    vocab = Vocabulary(CFG)
    shape_ids = vocab.render(Edit(0, 0, KIND_SHAPE, 1))
    color_ids = vocab.render(Edit(0, 0, KIND_COLOR, 1))
    mixed = shape_ids[:4] + [color_ids[4]]          # kind says shape, value is a color
    with pytest.raises(InstructionError):
        vocab.parse(mixed)


# -- edit application --


def uniform_grid(cfg, shape=0, color=0):
    return AttributeGrid(cfg.height, cfg.width,
                         tuple((shape, color) for _ in range(cfg.height * cfg.width)))


@given(edits(CFG), edits(CFG))
@settings(max_examples=200, deadline=None)
def test_apply_instruction_changes_exactly_one_attribute(e1, e2):
    g = uniform_grid(CFG, shape=1, color=2)
    out = apply_instruction(g, e1)
    diffs = [(k, a, b) for k, (a, b) in
             enumerate(zip(g.cells, out.cells)) if a != b]
    assert len(diffs) <= 1
    if diffs:
        k, before, after = diffs[0]
        assert k == e1.row * CFG.width + e1.col
        # only the named attribute moves
        if e1.kind == KIND_SHAPE:
            assert before[1] == after[1] and after[0] == e1.value
        else:
            assert before[0] == after[0] and after[1] == e1.value
    # idempotence
    assert apply_instruction(out, e1) == out
    # edits to different cells commute
    if (e1.row, e1.col) != (e2.row, e2.col):
        assert (apply_instruction(apply_instruction(g, e1), e2)
                == apply_instruction(apply_instruction(g, e2), e1))


def test_apply_instruction_rejects_out_of_range_cells():
    g = uniform_grid(CFG)
    with pytest.raises(InstructionError):
        apply_instruction(g, Edit(4, 0, KIND_SHAPE, 0))
    with pytest.raises(InstructionError):
        apply_instruction(g, Edit(0, 4, KIND_COLOR, 0))
    with pytest.raises(InstructionError):
        apply_instruction(g, Edit(0, 0, "size", 0))


def test_vocabulary_rejects_out_of_range_values():
    vocab = Vocabulary(CFG)
    with pytest.raises(InstructionError):
        vocab.render(Edit(0, 0, KIND_SHAPE, 5))
    with pytest.raises(InstructionError):
        vocab.render(Edit(0, 0, KIND_COLOR, 6))


# -- corruption --


def test_corrupt_p_zero_is_identity_and_p_one_touches_every_other_cell():
    g = uniform_grid(CFG, shape=1, color=2)
    target = apply_instruction(g, Edit(0, 0, KIND_SHAPE, 3))
    assert corrupt_target(target, (0, 0), 0.0, seed=7, cfg=CFG) == target

    noisy = corrupt_target(target, (0, 0), 1.0, seed=7, cfg=CFG)
    assert noisy.cell(0, 0) == target.cell(0, 0)    # edited cell is protected
    others = [(r, c) for r in range(4) for c in range(4) if (r, c) != (0, 0)]
    changed = sum(noisy.cell(r, c) != target.cell(r, c) for r, c in others)
    # every other cell is redrawn; a redraw equals the old pair w.p. 1/30
    assert changed >= len(others) - 3
    assert changed > 0


def test_corrupt_is_deterministic_in_seed():
    g = uniform_grid(CFG, shape=2, color=1)
    a = corrupt_target(g, (1, 1), 0.5, seed=11, cfg=CFG)
    b = corrupt_target(g, (1, 1), 0.5, seed=11, cfg=CFG)
    c = corrupt_target(g, (1, 1), 0.5, seed=12, cfg=CFG)
    assert a == b
    assert a != c or True   # different seeds may rarely coincide; only a==b is required


# -- dataset generation --


def test_split_sizes_round_8_1_1():
    cfg = WorldConfig(height=2, width=2, n_shapes=2, n_colors=2,
                      n_triplets=10, n_candidates=6)
    ds = generate_dataset(cfg, seed=0)
    sizes = {name: len(ds.split(name)) for name in ("train", "val", "test")}
    assert sizes == {"train": 8, "val": 1, "test": 1}


def test_default_split_sizes():
    ds = generate_dataset(CFG, seed=0)
    assert len(ds.split("train")) == 2048
    assert len(ds.split("val")) == 256
    assert len(ds.split("test")) == 256
    assert len(ds.candidates) == CFG.n_candidates


def test_triplet_semantics_hold_for_every_sample():
    ds = generate_dataset(SMALL, seed=3)
    vocab = ds.vocabulary
    candidate_keys = {g.cells for g in ds.candidates}
    for s in ds.samples:
        # target is the instruction applied to the reference, exactly
        assert apply_instruction(s.reference, s.edit) == s.target
        assert vocab.parse(s.token_ids) == s.edit
        # pseudo target keeps only the edited cell from the target
        cell = (s.edit.row, s.edit.col)
        for r in range(SMALL.height):
            for c in range(SMALL.width):
                want = s.target.cell(r, c) if (r, c) == cell else s.reference.cell(r, c)
                assert s.pseudo_target.cell(r, c) == want
        # the noisy target never disturbs the edited cell
        assert s.noisy_target.cell(*cell) == s.target.cell(*cell)
        # every true target is retrievable from the candidate pool
        assert s.target.cells in candidate_keys


def test_reference_and_target_differ_in_one_attribute():
    ds = generate_dataset(SMALL, seed=4)
    for s in ds.samples:
        diffs = sum(a != b for a, b in zip(s.reference.cells, s.target.cells))
        assert diffs == 1


def test_generation_is_deterministic_and_seed_sensitive():
    a = generate_dataset(SMALL, seed=5)
    b = generate_dataset(SMALL, seed=5)
    c = generate_dataset(SMALL, seed=6)
    assert [s.reference.cells for s in a.samples] == [s.reference.cells for s in b.samples]
    assert [s.token_ids for s in a.samples] == [s.token_ids for s in b.samples]
    assert [g.cells for g in a.candidates] == [g.cells for g in b.candidates]
    assert ([s.reference.cells for s in a.samples]
            != [s.reference.cells for s in c.samples])


def test_candidates_are_distinct():
    ds = generate_dataset(SMALL, seed=7)
    keys = [g.cells for g in ds.candidates]
    assert len(keys) == len(set(keys))


# -- serialization --


def test_write_read_round_trip(tmp_path):
    ds = generate_dataset(SMALL, seed=8)
    write_dataset(ds, tmp_path)
    for name in ("train", "val", "test", "candidates"):
        assert (tmp_path / f"{name}.jsonl").exists()
    back = read_dataset(tmp_path)
    assert back.seed == ds.seed
    assert back.config == ds.config
    assert [g.cells for g in back.candidates] == [g.cells for g in ds.candidates]
    assert len(back.samples) == len(ds.samples)
    for x, y in zip(ds.samples, back.samples):
        assert (x.id, x.split, x.token_ids, x.edit) == (y.id, y.split, y.token_ids, y.edit)
        assert x.reference == y.reference and x.target == y.target
        assert x.pseudo_target == y.pseudo_target and x.noisy_target == y.noisy_target


def test_same_seed_writes_byte_identical_files(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    write_dataset(generate_dataset(SMALL, seed=9), d1)
    write_dataset(generate_dataset(SMALL, seed=9), d2)
    for name in ("train", "val", "test", "candidates"):
        assert (d1 / f"{name}.jsonl").read_bytes() == (d2 / f"{name}.jsonl").read_bytes()


def test_read_reports_file_and_line_on_corruption(tmp_path):
    ds = generate_dataset(SMALL, seed=10)
    write_dataset(ds, tmp_path)
    path = tmp_path / "train.jsonl"
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]       # truncate one record
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"train\.jsonl.*line 3"):
        read_dataset(tmp_path)


def test_read_rejects_mismatched_header(tmp_path):
    ds = generate_dataset(SMALL, seed=11)
    write_dataset(ds, tmp_path)
    path = tmp_path / "val.jsonl"
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["format"] = "something-else"
    lines[0] = json.dumps(header)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path)
