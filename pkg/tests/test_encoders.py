"""Encoders: positional encoding values, token shapes, pooling, and the
seeded initialization contract."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmcir.diffcore import Tape
from tmcir.encoders import (
    ModelSpec,
    encode_text,
    encode_visual,
    init_encoder_store,
    pooled_feature,
    pooled_text_batch,
    pooled_visual_batch,
    sinusoidal_positions,
)
from tmcir.errors import ConfigError, EmptySequenceError, EncodingError
from tmcir.world import AttributeGrid, WorldConfig, Vocabulary, generate_dataset

SPEC = ModelSpec(n_shapes=3, n_colors=4, vocab_size=20, d=8)


def tracked_store(spec=SPEC, seed=0):
    store = init_encoder_store(spec, np.random.default_rng(seed))
    tape = Tape()
    return store, store.tracked(tape)


def grid(h, w, fill=(0, 0)):
    return AttributeGrid(h, w, tuple(fill for _ in range(h * w)))


# -- sinusoidal positions --


def test_positions_row_zero_alternates_zero_one():
    pos = sinusoidal_positions(3, 6)
    np.testing.assert_allclose(pos[0], [0, 1, 0, 1, 0, 1])


def test_positions_row_one_d2_known_values():
    pos = sinusoidal_positions(2, 2)
    np.testing.assert_allclose(pos[1], [0.84147098, 0.54030231], atol=1e-8)


def test_positions_formula_matches_direct_evaluation():
    d = 10
    pos = sinusoidal_positions(7, d)
    for k in range(7):
        for i in range(d // 2):
            angle = k / 10000.0 ** (2.0 * i / d)
            assert pos[k, 2 * i] == pytest.approx(np.sin(angle), abs=1e-12)
            assert pos[k, 2 * i + 1] == pytest.approx(np.cos(angle), abs=1e-12)


@given(st.integers(1, 40), st.integers(1, 16))
@settings(max_examples=100, deadline=None)
def test_positions_entries_bounded(n, half_d):
    pos = sinusoidal_positions(n, 2 * half_d)
    assert np.all(pos >= -1.0) and np.all(pos <= 1.0)


def test_positions_reject_odd_dimension_and_zero_rows():
    with pytest.raises(ConfigError):
        sinusoidal_positions(4, 7)
    with pytest.raises(ConfigError):
        sinusoidal_positions(0, 4)


# -- model spec and initialization --


def test_model_spec_validates_dimension():
    with pytest.raises(ConfigError):
        ModelSpec(n_shapes=2, n_colors=2, vocab_size=4, d=7)
    with pytest.raises(ConfigError):
        ModelSpec(n_shapes=0, n_colors=2, vocab_size=4, d=8)


def test_init_store_shapes_and_ranges():
    store, _ = tracked_store()
    assert store["visual.cell_embedding"].shape == (12, 8)
    assert store["text.vocab_embedding"].shape == (20, 8)
    assert np.all(np.abs(store["visual.cell_embedding"]) <= 0.1)
    # mixing layers start near identity with zero bias
    assert np.all(np.abs(store["visual.mix_w"] - np.eye(8)) <= 0.01)
    np.testing.assert_allclose(store["visual.mix_b"], 0.0)
    np.testing.assert_allclose(store["text.mix_b"], 0.0)


def test_init_store_seeded_determinism():
    a = init_encoder_store(SPEC, np.random.default_rng(5))
    b = init_encoder_store(SPEC, np.random.default_rng(5))
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])


# -- encoding --


def test_encode_visual_token_count_matches_cells():
    _, params = tracked_store()
    seq = encode_visual(grid(2, 2), params, SPEC)
    assert seq.length == 4
    assert seq.tokens.shape == (4, 8)
    assert seq.positions.shape == (4, 8)


def test_identical_cells_get_distinct_tokens_by_position():
    _, params = tracked_store()
    seq = encode_visual(grid(2, 2, fill=(1, 2)), params, SPEC)
    assert not np.allclose(seq.tokens.data[0], seq.tokens.data[1])


def test_encode_visual_out_of_range_cell_names_index():
    _, params = tracked_store()
    bad = AttributeGrid(1, 2, ((0, 0), (9, 0)))
    with pytest.raises(EncodingError, match="cell 1"):
        encode_visual(bad, params, SPEC)


def test_zero_mix_zero_bias_gives_zero_tokens():
    store, _ = tracked_store()
    store["visual.mix_w"][:] = 0.0
    tape = Tape()
    seq = encode_visual(grid(2, 2), store.tracked(tape), SPEC)
    np.testing.assert_allclose(seq.tokens.data, 0.0)


def test_encode_text_order_and_duplicates():
    _, params = tracked_store()
    seq = encode_text([3, 3, 7], params, SPEC)
    assert seq.length == 3
    # same id at different positions still yields distinct tokens
    assert not np.allclose(seq.tokens.data[0], seq.tokens.data[1])


def test_encode_text_rejects_empty_and_unknown_ids():
    _, params = tracked_store()
    with pytest.raises(EmptySequenceError):
        encode_text([], params, SPEC)
    with pytest.raises(EncodingError, match="offset 1"):
        encode_text([0, 99], params, SPEC)


def test_reencoding_is_bit_identical():
    store, _ = tracked_store()
    t1 = encode_visual(grid(3, 2, fill=(2, 1)), store.tracked(Tape()), SPEC)
    t2 = encode_visual(grid(3, 2, fill=(2, 1)), store.tracked(Tape()), SPEC)
    np.testing.assert_array_equal(t1.tokens.data, t2.tokens.data)


# -- pooling --


def test_pooled_feature_known_value():
    # two identical tokens (3,4): mean (3,4), norm 5 -> (0.6, 0.8)
    tape = Tape()
    from tmcir.encoders import TokenSequence
    seq = TokenSequence(tokens=tape.var([[3.0, 4.0], [3.0, 4.0]]),
                        positions=np.zeros((2, 2)), length=2)
    np.testing.assert_allclose(pooled_feature(seq).data, [[0.6, 0.8]], atol=1e-12)


def test_pooled_feature_single_token_is_normalized_token():
    tape = Tape()
    from tmcir.encoders import TokenSequence
    u = np.array([[1.0, 2.0, 2.0]])
    seq = TokenSequence(tokens=tape.var(u), positions=np.zeros((1, 3)), length=1)
    np.testing.assert_allclose(pooled_feature(seq).data, u / 3.0, atol=1e-12)


def test_pooled_feature_unit_norm_on_random_input():
    _, params = tracked_store()
    seq = encode_visual(grid(4, 4, fill=(1, 3)), params, SPEC)
    norm = np.linalg.norm(pooled_feature(seq).data)
    assert abs(norm - 1.0) <= 1e-12


# -- batched encoders agree with the per-sample path --


def test_batched_visual_matches_per_sample():
    cfg = WorldConfig(height=2, width=3, n_shapes=3, n_colors=4,
                      n_triplets=20, n_candidates=8)
    ds = generate_dataset(cfg, seed=1)
    spec = ModelSpec(3, 4, Vocabulary(cfg).size, 8)
    store = init_encoder_store(spec, np.random.default_rng(0))
    grids = [s.reference for s in ds.samples[:5]]
    batched = pooled_visual_batch(grids, store.tracked(Tape()), spec).data
    single = np.vstack([
        pooled_feature(encode_visual(g, store.tracked(Tape()), spec)).data
        for g in grids])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_batched_text_matches_per_sample_including_mixed_lengths():
    _, params = tracked_store()
    same = [[1, 2, 3], [4, 5, 6]]
    mixed = [[1, 2, 3], [4, 5]]
    for batch in (same, mixed):
        batched = pooled_text_batch(batch, params, SPEC).data
        single = np.vstack([
            pooled_feature(encode_text(ins, params, SPEC)).data
            for ins in batch])
        np.testing.assert_allclose(batched, single, atol=1e-12)


def test_batched_encoders_reject_empty_batches():
    _, params = tracked_store()
    with pytest.raises(EmptySequenceError):
        pooled_visual_batch([], params, SPEC)
    with pytest.raises(EmptySequenceError):
        pooled_text_batch([], params, SPEC)
