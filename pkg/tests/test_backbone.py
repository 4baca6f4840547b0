import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owczsl import numerics as nx
from owczsl.backbone import Backbone, BackboneConfig, topk_indices
from owczsl.data import CompositionSpace
from owczsl.errors import ContractError, ShapeError
from owczsl.model import Model
from owczsl.numerics import Tensor
from owczsl.train import TrainConfig, loss

from conftest import assert_gradients


def _space(n_a, n_o):
    return CompositionSpace(tuple(f"a{i}" for i in range(n_a)), tuple(f"o{j}" for j in range(n_o)), frozenset(range(n_a * n_o)))


def test_patch_count():
    bb = Backbone(BackboneConfig(image_size=16, patch_size=8, d_model=8, n_heads=2, depth=1, k=1), _space(2, 2))
    assert bb.embed_image(np.zeros((16, 16, 3))).shape == (1, 4, 8)


def test_patchify_row_major_grid():
    bb = Backbone(BackboneConfig(image_size=4, patch_size=2, d_model=4, n_heads=1, depth=0, k=1), _space(2, 2))
    img = np.arange(48, dtype=float).reshape(4, 4, 3)
    patches = bb.patchify(img)[0]
    # patch 1 is the top-right 2x2 block
    np.testing.assert_array_equal(patches[1], img[0:2, 2:4].ravel())
    np.testing.assert_array_equal(patches[2], img[2:4, 0:2].ravel())


def test_image_size_mismatch():
    bb = Backbone(BackboneConfig(image_size=8, patch_size=4, d_model=4, n_heads=1, depth=0, k=1), _space(2, 2))
    with pytest.raises(ShapeError):
        bb.embed_image(np.zeros((2, 6, 6, 3)))


def test_zero_image_gives_positional_embeddings(tiny_backbone, tiny_space):
    bb = Backbone(tiny_backbone, tiny_space)
    tokens = bb.embed_image(np.zeros((8, 8, 3))).data[0]
    np.testing.assert_array_equal(tokens, bb.params["backbone.pos"].data[3:])


def test_patch_projection_gradient(tiny_backbone, tiny_space, rng):
    bb = Backbone(tiny_backbone, tiny_space)
    images = rng.uniform(size=(2, 8, 8, 3))
    w = bb.params["backbone.patch.weight"]
    assert_gradients(lambda: bb.embed_image(images).sum(), [w])


def test_text_tokens(tiny_backbone, tiny_space):
    bb = Backbone(tiny_backbone, tiny_space)
    attr, obj = bb.embed_text()
    assert attr.shape == (3, 8) and obj.shape == (3, 8)
    bb.params["backbone.text.type"].data[:] = 0.0
    attr, obj = bb.embed_text()
    table = bb.params["backbone.text.table"].data
    np.testing.assert_array_equal(attr.data, table[:3])
    np.testing.assert_array_equal(obj.data, table[3:])


def test_text_lookup_gradient_hits_only_used_rows(tiny_backbone, tiny_space, rng):
    bb = Backbone(tiny_backbone, tiny_space)
    _, obj = bb.embed_text()
    g = rng.standard_normal(obj.shape)
    (obj * g).sum().backward()
    grad = bb.params["backbone.text.table"].grad
    expected = nx.scatter_add(g, np.arange(3, 6), 6)
    np.testing.assert_array_equal(grad, expected)
    assert not grad[:3].any()


def test_text_table_from_embeddings(tiny_space):
    from owczsl.data import synthetic_embeddings

    vocab = synthetic_embeddings(tiny_space.attrs + tiny_space.objs, dim=5, seed=0)
    cfg = BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=1, k=2)
    a = Backbone(cfg, tiny_space, vocab, seed=0).params["backbone.text.table"].data
    b = Backbone(cfg, tiny_space, vocab, seed=9).params["backbone.text.table"].data
    np.testing.assert_array_equal(a, b)  # fixed projection, independent of the model seed
    v = vocab["blue"] / np.linalg.norm(vocab["blue"])
    proj = np.random.default_rng(12345).standard_normal((5, 8)) / math.sqrt(8)
    np.testing.assert_allclose(a[1], v @ proj)


# -- TopK selection ---------------------------------------------------------


def test_topk_forced_order():
    assert topk_indices(np.array([0.1, 0.9, 0.5]), 2).tolist() == [1, 2]


def test_topk_ties_go_to_lower_index():
    assert topk_indices(np.array([0.5, 0.7, 0.5, 0.7]), 3).tolist() == [1, 3, 0]


def test_topk_k1_is_argmax():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.standard_normal(rng.integers(1, 20))
        assert topk_indices(s, 1)[0] == np.argmax(s)


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 16))
        k = int(rng.integers(1, n + 1))
        s = rng.standard_normal(n)
        got = topk_indices(s, k)
        oracle = sorted(range(n), key=lambda i: (-s[i], i))[:k]
        assert got.tolist() == oracle
        assert len(set(got.tolist())) == k


def test_selection_saturates(tiny_space, rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=1, k=3)
    bb = Backbone(cfg, tiny_space)
    patches = bb.embed_image(rng.uniform(size=(4, 8, 8, 3)))
    attr, obj = bb.embed_text()
    sel = bb.topk_select(patches, attr, obj, 3)
    for row in sel.attr_topk:
        assert sorted(row.tolist()) == [0, 1, 2]


def test_selection_scores_formula(tiny_backbone, tiny_space, rng):
    bb = Backbone(tiny_backbone, tiny_space)
    patches = bb.embed_image(rng.uniform(size=(2, 8, 8, 3)))
    attr, obj = bb.embed_text()
    sel = bb.topk_select(patches, attr, obj)
    p = bb.params
    q = patches.data.mean(axis=1) @ p["backbone.select.query"].data
    k = obj.data @ p["backbone.select.key"].data
    scores = q @ k.T / math.sqrt(8)
    np.testing.assert_allclose(sel.obj_scores.data, scores, rtol=1e-12)
    for b in range(2):
        idx = sel.obj_topk[b]
        gate = 1 / (1 + np.exp(-scores[b, idx]))
        np.testing.assert_allclose(sel.obj_tokens.data[b], obj.data[idx] * gate[:, None], rtol=1e-12)


def test_selection_rejects_bad_k(tiny_backbone, tiny_space, rng):
    bb = Backbone(tiny_backbone, tiny_space)
    patches = bb.embed_image(rng.uniform(size=(1, 8, 8, 3)))
    attr, obj = bb.embed_text()
    with pytest.raises(ContractError):
        bb.topk_select(patches, attr, obj, 4)


# -- encoder ----------------------------------------------------------------


def test_depth_zero_is_final_layernorm(tiny_space, rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=0, k=2)
    bb = Backbone(cfg, tiny_space)
    bb.params["backbone.final_ln.gain"].data = rng.standard_normal(8)
    bb.params["backbone.final_ln.bias"].data = rng.standard_normal(8)
    seq, _ = bb.build_sequence(rng.uniform(size=(2, 8, 8, 3)))
    z0, z1, z2, _ = bb.encode(seq)
    x = seq.data[:, :3]
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + cfg.norm_eps) * bb.params["backbone.final_ln.gain"].data + bb.params["backbone.final_ln.bias"].data
    np.testing.assert_allclose(np.stack([z0.data, z1.data, z2.data], axis=1), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_text_token_permutation_invariance(tiny_space, seed):
    cfg = BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=3, k=2)
    bb = Backbone(cfg, tiny_space, seed=seed)
    rng = np.random.default_rng(seed)
    seq, _ = bb.build_sequence(rng.uniform(size=(2, 8, 8, 3)))
    start = 3 + cfg.n_patches
    perm = np.concatenate([np.arange(start), start + rng.permutation(2 * cfg.k)])
    permuted = Tensor(seq.data[:, perm])
    a = bb.encode(Tensor(seq.data))
    b = bb.encode(permuted)
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_allclose(x.data, y.data, rtol=0, atol=1e-10)


def test_full_backbone_gradient(tiny_space, rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, depth=2, mlp_ratio=2, k=2)
    bb = Backbone(cfg, tiny_space, seed=3)
    images = rng.uniform(size=(2, 8, 8, 3))
    g = rng.standard_normal((3, 2, 8))

    def fn():
        (z0, z1, z2), sel = bb.forward(images)
        return (z0 * g[0]).sum() + (z1 * g[1]).sum() + (z2 * g[2]).sum()

    assert_gradients(fn, list(bb.params.values()))


def test_class_token_gradients_nonzero(tiny_backbone, tiny_space, rng):
    bb = Backbone(tiny_backbone, tiny_space)
    (z0, z1, z2), _ = bb.forward(rng.uniform(size=(3, 8, 8, 3)))
    (z0 * rng.standard_normal(z0.shape)).sum().backward()
    grad = bb.params["backbone.cls"].grad
    assert grad is not None and np.all(np.abs(grad).sum(axis=1) > 0)


def test_selector_gradient_from_selection_loss(tiny_backbone, tiny_space, rng):
    model = Model(tiny_space, tiny_backbone, seed=0)
    bundle, sel = model.forward(rng.uniform(size=(4, 8, 8, 3)))
    cfg = TrainConfig(alpha_attr=0, alpha_obj=0, alpha_pair=0, alpha_sel=1.0)
    loss(bundle, sel, [0, 1, 2, 2], [0, 1, 2, 2], tiny_space, cfg).backward()
    assert np.abs(model.params["backbone.select.query"].grad).max() > 0
    assert np.abs(model.params["backbone.select.key"].grad).max() > 0


@given(
    st.sampled_from([4, 8, 12, 16]),
    st.sampled_from([1, 2, 4]),
    st.sampled_from([(4, 1), (4, 2), (8, 4), (6, 3)]),
    st.integers(0, 3),
    st.integers(1, 3),
)
@settings(max_examples=25, deadline=None)
def test_sequence_length(image_size, patch, dims, depth, k):
    d, h = dims
    cfg = BackboneConfig(image_size=image_size, patch_size=patch, d_model=d, n_heads=h, depth=depth, k=k)
    bb = Backbone(cfg, _space(3, 4))
    seq, sel = bb.build_sequence(np.random.default_rng(0).uniform(size=(2, image_size, image_size, 3)))
    assert seq.shape == (2, cfg.sequence_length(), d)
    assert cfg.sequence_length() == 3 + (image_size // patch) ** 2 + 2 * k
    assert sel.attr_topk.shape == (2, k)


@pytest.mark.parametrize(
    "kwargs",
    [dict(image_size=10, patch_size=4), dict(d_model=10, n_heads=4), dict(k=0), dict(k=4)],
)
def test_config_validation(kwargs):
    with pytest.raises(ContractError):
        BackboneConfig(**kwargs).validate(3, 5)
