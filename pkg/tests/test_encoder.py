import numpy as np
import pytest

from basis_transformer.encoder import (
    RowEncoder,
    TextEncoderSpec,
    load_embedding_table,
    save_embedding_table,
    tokenize,
)
from basis_transformer.smr import SmrConfig

SPEC = TextEncoderSpec()


def make_encoder(dim=16, text=SPEC, seed=0):
    return RowEncoder(dim, SmrConfig(6, 3), text, np.random.default_rng(seed))


def test_tokenize_reserved_and_frozen_ids():
    assert tokenize("", SPEC) == [0]
    assert tokenize("   ", SPEC) == [0]
    # frozen values: blake2b-64 little-endian mod (V-1) + 1, V = 4096
    assert tokenize("Great House!", SPEC) == [1467, 3095, 2240]
    assert tokenize("great house !", SPEC) == [1467, 3095, 2240]
    a, b = tokenize("a a", SPEC)
    assert a == b
    ids = tokenize("Some text, with punctuation; and MORE", SPEC)
    assert all(1 <= i < SPEC.vocab_buckets for i in ids)


def test_text_spec_validation():
    with pytest.raises(ValueError):
        TextEncoderSpec(vocab_buckets=1)
    with pytest.raises(ValueError):
        TextEncoderSpec(mode="bert")
    with pytest.raises(ValueError):
        TextEncoderSpec(mode="table")


def test_embed_shapes_and_determinism():
    enc = make_encoder()
    assert enc.embed_text(tokenize("two words", SPEC)).shape == (2, 16)
    assert enc.embed_number(2.5).shape == (1, 16)
    assert enc.embed_missing().shape == (1, 16)
    np.testing.assert_array_equal(enc.embed_number(3.25).data, enc.embed_number(3.25).data)
    with pytest.raises(ValueError):
        enc.embed_number(float("nan"))


def test_numeric_table_has_unit_length():
    enc = make_encoder()
    rows = [{"x1": 1.0, "x2": -3.5}, {"x1": 0.25, "x2": 8.0}]
    batch = enc.encode(rows)
    assert batch.names.shape == batch.values.shape == (2, 2, 1, 16)
    assert batch.value_mask.all() and batch.name_mask.all()


def test_full_width_shape():
    enc = make_encoder(dim=144)
    rows = [
        {"colour": "deep red", "note": "one two three four five", "price": 3.0},
        {"colour": "blue", "note": None, "price": 1.5},
    ]
    batch = enc.encode(rows)
    assert batch.names.shape == (2, 3, 5, 144)
    assert batch.values.shape == (2, 3, 5, 144)
    assert batch.name_mask.shape == batch.value_mask.shape == (2, 3, 5)


def test_missing_and_empty_text_are_length_one():
    enc = make_encoder()
    batch = enc.encode([{"a": None, "b": "some longer text here"}])
    assert batch.value_mask[0, 0].tolist() == [True, False, False, False]
    np.testing.assert_array_equal(batch.values.data[0, 0, 0], enc.missing_token.data[0])
    single = enc.encode([{"a": ""}])
    assert single.values.shape == (1, 1, 1, 16)
    np.testing.assert_allclose(single.values.data[0, 0], enc.embed_text([0]).data, rtol=1e-6)


def test_equal_numbers_equal_embeddings():
    enc = make_encoder()
    batch = enc.encode([{"u": 4.5, "v": 4.5}])
    np.testing.assert_array_equal(batch.values.data[0, 0], batch.values.data[0, 1])


def test_padding_is_exactly_masked_off():
    enc = make_encoder()
    rows = [{"name of col": "x", "b": 2.0, "c": "a b c d e f"}, {"name of col": "y z", "b": None, "c": ""}]
    batch = enc.encode(rows)
    for tensor, mask in ((batch.names.data, batch.name_mask), (batch.values.data, batch.value_mask)):
        assert np.all(tensor[~mask] == 0.0)
        live = np.abs(tensor[mask]).sum(-1)
        assert np.all(live > 0)


def test_pair_order_only_permutes_columns():
    enc = make_encoder()
    row = {"alpha": 1.0, "beta": "text value", "gamma": None}
    rev = dict(reversed(list(row.items())))
    a, b = enc.encode([row]), enc.encode([rev])
    assert a.columns == ("alpha", "beta", "gamma")
    assert b.columns == ("gamma", "beta", "alpha")
    np.testing.assert_array_equal(a.names.data[:, ::-1], b.names.data)
    np.testing.assert_array_equal(a.values.data[:, ::-1], b.values.data)


def test_inconsistent_columns_and_bad_cells():
    enc = make_encoder()
    with pytest.raises(ValueError):
        enc.encode([{"a": 1.0}, {"b": 2.0}])
    with pytest.raises(ValueError):
        enc.encode([])
    with pytest.raises(ValueError):
        enc.encode([{"a": float("inf")}])
    with pytest.raises(TypeError):
        enc.encode([{"a": [1, 2]}])


def test_table_file_round_trip_and_frozen(tmp_path):
    table = np.random.default_rng(0).normal(size=(10, 6)).astype(np.float32)
    path = tmp_path / "table.bin"
    save_embedding_table(path, table)
    np.testing.assert_array_equal(load_embedding_table(path), table)
    raw = path.read_bytes()
    assert raw.split(b"\n", 1)[1] == table.astype("<f4").tobytes()

    enc = make_encoder(text=TextEncoderSpec(mode="table", table_path=str(path)))
    names = [n for n, _ in enc.named_parameters()]
    assert not any("table" in n for n in names)
    ids = tokenize("hello world", enc.text_spec, enc.vocab_size)
    assert all(1 <= i < 10 for i in ids)
    out = enc.embed_text(ids)
    expected = table[ids] @ enc.text_proj.weight.data + enc.text_proj.bias.data
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)


def test_gradients_reach_encoder_parameters():
    enc = make_encoder()
    batch = enc.encode([{"k": 1.0, "t": "word", "m": None}])
    (batch.names.sum() + batch.values.sum()).backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name
