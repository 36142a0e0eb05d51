import numpy as np
import pytest

from basis_transformer.autodiff import Tensor, default_dtype, no_grad
from basis_transformer.encoder import TextEncoderSpec
from basis_transformer.model import (
    BasisCompression,
    BasisTransformer,
    LatentCompression,
    LatentContext,
    LatentDecompression,
    LatentMixture,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from basis_transformer.smr import SmrConfig

from gradcheck import check_op

TINY_TEXT = TextEncoderSpec(vocab_buckets=32, embed_dim=4)


def tiny_cfg(**kw):
    base = dict(dim=8, n_blocks=2, n_heads=2, n_basis=2, ratio=1, n_ctx_layers=1, mlp_ratio=2, smr=SmrConfig(6, 3))
    base.update(kw)
    return ModelConfig(**base)


def rows_mixed(rng, n):
    words = ["red", "green", "big house", "small old car", "a"]
    out = []
    for _ in range(n):
        out.append({
            "age": float(rng.integers(0, 60)),
            "colour name": str(rng.choice(words)),
            "weight": None if rng.random() < 0.3 else float(rng.normal() * 10),
        })
    return out


def arr(rng, *shape, dtype=np.float32):
    return Tensor(rng.normal(size=shape).astype(dtype))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_blocks=0)
    with pytest.raises(ValueError):
        ModelConfig(ratio=0)
    with pytest.raises(ValueError):
        ModelConfig(head="softmax")
    cfg = tiny_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBasisCompression:
    rng = np.random.default_rng(0)
    comp = BasisCompression(8, 2, 2, 0.0, rng)

    def test_shape(self):
        q, x = arr(self.rng, 3, 4, 8), arr(self.rng, 3, 7, 8)
        assert self.comp(q, x).shape == (3, 4, 8)

    def test_single_key_attention_ignores_query(self):
        x = arr(self.rng, 3, 1, 8)
        q1, q2 = arr(self.rng, 3, 4, 8), arr(self.rng, 3, 4, 8)
        kv = self.comp.norm_kv(x)
        a = self.comp.attn(self.comp.norm_q(q1), kv).data
        b = self.comp.attn(self.comp.norm_q(q2), kv).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(a[:, 0], a[:, 3], atol=1e-6)

    def test_key_order_invariance(self):
        q, x = arr(self.rng, 3, 4, 8), self.rng.normal(size=(3, 7, 8)).astype(np.float32)
        mask = np.ones((3, 7), dtype=bool)
        mask[1, 5:] = False
        perm = self.rng.permutation(7)
        a = self.comp(q, Tensor(x), mask).data
        b = self.comp(q, Tensor(x[:, perm]), mask[:, perm]).data
        assert np.abs(a - b).max() <= 1e-5

    def test_fully_masked_column_raises(self):
        q, x = arr(self.rng, 2, 4, 8), arr(self.rng, 2, 3, 8)
        mask = np.array([[True, False, False], [False, False, False]])
        with pytest.raises(ValueError):
            self.comp(q, x, mask)


class TestLatentMixture:
    def test_shape_and_identical_columns(self):
        rng = np.random.default_rng(1)
        mix = LatentMixture(8, 2, 0.0, rng)
        col = rng.normal(size=(1, 4, 8)).astype(np.float32)
        val = rng.normal(size=(1, 4, 8)).astype(np.float32)
        out = mix(Tensor(np.concatenate([col, col])), Tensor(np.concatenate([val, val])))
        assert out.shape == (2, 4, 8)
        np.testing.assert_array_equal(out.data[0], out.data[1])
        with pytest.raises(ValueError):
            mix(arr(rng, 2, 4, 8), arr(rng, 2, 3, 8))

    def test_gradient_reaches_both_inputs(self):
        rng = np.random.default_rng(2)
        with default_dtype(np.float64):
            mix = LatentMixture(4, 2, 0.0, rng)
        z_col = rng.normal(size=(2, 2, 4))
        z_val = rng.normal(size=(2, 2, 4))
        assert check_op(lambda a, b: mix(a, b), [z_col, z_val], rng) < 1e-5
        a, b = Tensor(z_col, requires_grad=True), Tensor(z_val, requires_grad=True)
        mix(a, b).sum().backward()
        assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0


class TestLatentCompression:
    def test_shape(self):
        rng = np.random.default_rng(3)
        assert LatentCompression(8, 4, 2, rng)(arr(rng, 3, 4, 8)).shape == (3, 16)

    def test_identity_projection_flattens(self):
        rng = np.random.default_rng(3)
        comp = LatentCompression(8, 4, 4, rng)
        comp.proj.weight.data = np.eye(32, dtype=np.float32)
        comp.proj.bias.data = np.zeros(32, dtype=np.float32)
        z = arr(rng, 3, 4, 8)
        np.testing.assert_array_equal(comp(z).data, z.data.reshape(3, 32))

    def test_depends_on_basis_order(self):
        rng = np.random.default_rng(4)
        comp = LatentCompression(8, 4, 2, rng)
        z = rng.normal(size=(3, 4, 8)).astype(np.float32)
        swapped = z[:, [1, 0, 2, 3]]
        assert np.abs(comp(Tensor(z)).data - comp(Tensor(swapped)).data).max() > 1e-3


class TestLatentContext:
    def test_shape_and_equivariance(self):
        rng = np.random.default_rng(5)
        ctx = LatentContext(16, 2, 2, 2, 0.0, rng)
        x = rng.normal(size=(5, 16)).astype(np.float32)
        perm = rng.permutation(5)
        out = ctx(Tensor(x)).data
        assert out.shape == (5, 16)
        np.testing.assert_allclose(ctx(Tensor(x[perm])).data, out[perm], atol=1e-5)

    def test_zero_layers_is_identity(self):
        rng = np.random.default_rng(5)
        x = arr(rng, 4, 16)
        assert LatentContext(16, 2, 0, 2, 0.0, rng)(x) is x


class TestLatentDecompression:
    def test_two_distinct_branches(self):
        rng = np.random.default_rng(6)
        dec = LatentDecompression(8, 4, 2, 2, 2, 0.0, rng)
        q_col, q_val = dec(arr(rng, 3, 16))
        assert np.stack([q_col.data, q_val.data]).shape == (2, 3, 4, 8)
        assert np.abs(q_col.data - q_val.data).max() > 1e-3

    def test_final_single_output(self):
        rng = np.random.default_rng(6)
        (z,) = LatentDecompression(8, 4, 2, 1, 2, 0.0, rng)(arr(rng, 3, 16))
        assert z.shape == (3, 4, 8)


def test_forward_shapes_and_duplicates():
    cfg = tiny_cfg(smr=SmrConfig(14, 6))
    model = BasisTransformer(cfg, TINY_TEXT, seed=0)
    rows = rows_mixed(np.random.default_rng(0), 1)
    rows = rows + rows
    logits = model(model.encode(rows)).data
    assert logits.shape == (2, 21)
    np.testing.assert_array_equal(logits[0], logits[1])
    scalar = BasisTransformer(tiny_cfg(head="scalar"), TINY_TEXT, seed=0)
    assert scalar(scalar.encode(rows)).shape == (2, 1)


def test_blocks_chain_and_final_emits_one():
    model = BasisTransformer(tiny_cfg(n_blocks=3), TINY_TEXT, seed=0)
    assert [len(b.decompress.branches) for b in model.blocks] == [2, 2, 1]


def test_column_permutation_invariance_64bit():
    rng = np.random.default_rng(7)
    model = BasisTransformer(tiny_cfg(), TINY_TEXT, seed=1, dtype=np.float64)
    rows = rows_mixed(rng, 4)
    cols = list(rows[0])
    a = model(model.encode(rows, cols)).data
    b = model(model.encode(rows, cols[::-1])).data
    assert np.abs(a - b).max() <= 1e-8


def test_entry_token_order_invariance():
    model = BasisTransformer(tiny_cfg(), TINY_TEXT, seed=2)
    r1 = [{"desc": "big old red house", "n": 3.0}]
    r2 = [{"desc": "house red old big", "n": 3.0}]
    a, b = model(model.encode(r1)).data, model(model.encode(r2)).data
    assert np.abs(a - b).max() <= 1e-5


def test_parameter_count_matches_hand_count():
    cfg = ModelConfig(dim=4, n_blocks=1, n_heads=1, n_basis=1, ratio=1, n_ctx_layers=0, mlp_ratio=1,
                      smr=SmrConfig(1, 0))
    text = TextEncoderSpec(vocab_buckets=2, embed_dim=1)
    # encoder 26, basis queries 8, block 560, down 20, head 10
    assert count_parameters(cfg, text) == 624
    assert BasisTransformer(cfg, text).num_parameters() == 624


@pytest.mark.parametrize("kw", [{}, {"n_blocks": 3, "ratio": 2, "n_ctx_layers": 2}, {"head": "scalar"}])
def test_parameter_count_matches_model(kw):
    cfg = tiny_cfg(**kw)
    assert count_parameters(cfg, TINY_TEXT) == BasisTransformer(cfg, TINY_TEXT).num_parameters()


def test_parameter_names_unique_and_hierarchical():
    model = BasisTransformer(tiny_cfg(), TINY_TEXT)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert "blocks.0.comp_col.attn.q.weight" in names
    assert "encoder.token_table" in names


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_bit_exact(tmp_path, dtype):
    model = BasisTransformer(tiny_cfg(), TINY_TEXT, seed=3, dtype=dtype)
    rows = rows_mixed(np.random.default_rng(1), 5)
    before = model(model.encode(rows)).data
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, extra={"stride": 4})
    loaded, extra = load_checkpoint(path)
    assert extra == {"stride": 4}
    after = loaded(loaded.encode(rows)).data
    assert after.dtype == dtype
    assert before.tobytes() == after.tobytes()
    manifest, state = read_checkpoint(path)
    assert manifest["smr"] == {"h": 6, "l": 3}
    offsets = [e["offset"] for e in manifest["parameters"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_dropout_is_keyed_by_step():
    model = BasisTransformer(tiny_cfg(dropout=0.3), TINY_TEXT, seed=0)
    rows = rows_mixed(np.random.default_rng(2), 3)
    model.ctx.train = True
    model.ctx.step = 5
    a = model(model.encode(rows)).data
    b = model(model.encode(rows)).data
    model.ctx.step = 6
    c = model(model.encode(rows)).data
    model.ctx.train = False
    d = model(model.encode(rows)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_predict_decodes():
    model = BasisTransformer(tiny_cfg(), TINY_TEXT, seed=0)
    rows = rows_mixed(np.random.default_rng(3), 7)
    preds = model.predict(rows, batch_size=3)
    assert preds.shape == (7,)
    with no_grad():
        logits = model(model.encode(rows)).data
    np.testing.assert_array_equal(preds, model.decode(logits))
