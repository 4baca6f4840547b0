import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owczsl import numerics as nx
from owczsl import slc
from owczsl.errors import ContractError, DegenerateInputError
from owczsl.numerics import Tensor
from owczsl.slc import MASKED, Slc, SlcConfig

from conftest import assert_gradients
from oracles import compose_loops, decompose_loops


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def _params(rng, d, n_a, n_o):
    return Slc(d, n_a, n_o, seed=int(rng.integers(1 << 30))).params


# -- aux heads --------------------------------------------------------------


def test_aux_heads_zero_input(rng):
    p = _params(rng, 6, 3, 4)
    y_a, y_o = slc.aux_heads(T(np.zeros(6)), T(np.zeros(6)), p)
    np.testing.assert_array_equal(y_a.data, np.zeros(3))
    np.testing.assert_array_equal(y_o.data, np.zeros(4))


def test_aux_heads_identity_weights(rng):
    p = _params(rng, 3, 3, 3)
    p["slc.mlp_attr.weight"].data = np.eye(3)
    z = rng.standard_normal(3)
    y_a, _ = slc.aux_heads(T(z), T(z), p)
    np.testing.assert_allclose(y_a.data, z)


def test_aux_heads_gradient(rng):
    p = _params(rng, 5, 3, 4)
    z0, z1 = T(rng.standard_normal((2, 5)), True), T(rng.standard_normal((2, 5)), True)
    g = rng.standard_normal((2, 7))

    def fn():
        y_a, y_o = slc.aux_heads(z0, z1, p)
        return (nx.concat([y_a, y_o], axis=-1) * g).sum()

    assert_gradients(fn, [z0, z1] + [p[k] for k in ("slc.mlp_attr.weight", "slc.mlp_attr.bias", "slc.mlp_obj.weight", "slc.mlp_obj.bias")])


# -- decompose --------------------------------------------------------------


def test_decompose_uniform():
    np.testing.assert_allclose(slc.decompose(T(np.zeros(2)), T(np.zeros(3))).data, [1 / 6] * 6, rtol=1e-14)


def test_decompose_closed_form():
    out = slc.decompose(T(np.log([1.0, 2.0])), T(np.log([1.0, 1.0, 2.0])))
    np.testing.assert_allclose(out.data, np.array([1, 1, 2, 2, 2, 4]) / 12, rtol=1e-14)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_decompose_is_rank_one_joint(n_a, n_o, seed):
    rng = np.random.default_rng(seed)
    ya, yo = rng.standard_normal(n_a) * 3, rng.standard_normal(n_o) * 3
    out = slc.decompose(T(ya), T(yo)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-10
    np.testing.assert_allclose(out, decompose_loops(ya.tolist(), yo.tolist()), rtol=1e-12)
    m = out.reshape(n_a, n_o)
    if n_a > 1 and n_o > 1:
        minors = m[:-1, :-1] * m[1:, 1:] - m[:-1, 1:] * m[1:, :-1]
        assert np.abs(minors).max() <= 1e-9


def test_decompose_l2():
    out = slc.decompose(T([3.0, 4.0]), T([0.0, 2.0]), "l2").data
    np.testing.assert_allclose(out, [0, 0.6, 0, 0.8])
    with pytest.raises(DegenerateInputError):
        slc.decompose(T([0.0, 0.0]), T([1.0, 2.0]), "l2")


def test_decompose_gradient(rng):
    ya, yo = T(rng.standard_normal((2, 3)), True), T(rng.standard_normal((2, 4)), True)
    g = rng.standard_normal((2, 12))
    for mode in ("softmax", "l2"):
        assert_gradients(lambda: (slc.decompose(ya, yo, mode) * g).sum(), [ya, yo])


# -- pair_fuse --------------------------------------------------------------


def test_pair_fuse_zero_mlp(rng):
    p = _params(rng, 4, 5, 7)
    p["slc.mlp_pair.weight"].data[:] = 0
    ya, yo = rng.standard_normal(5), rng.standard_normal(7)
    z_pair, z_tilde = slc.pair_fuse(T(rng.standard_normal(4)), T(ya), T(yo), p)
    assert z_tilde.shape == (12,)
    np.testing.assert_array_equal(z_tilde.data, np.concatenate([ya, yo]))


def test_pair_fuse_zero_heads(rng):
    p = _params(rng, 4, 5, 7)
    z_pair, z_tilde = slc.pair_fuse(T(rng.standard_normal(4)), T(np.zeros(5)), T(np.zeros(7)), p)
    np.testing.assert_array_equal(z_tilde.data, z_pair.data)


# -- sparse compose ---------------------------------------------------------


def test_compose_row_constant():
    z = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    out = slc.sparse_compose(T(z), T(np.ones((2, 3))), T(np.zeros((3, 2)))).data.reshape(2, 3)
    np.testing.assert_array_equal(out, [[1, 1, 1], [2, 2, 2]])


def test_compose_zero_input(rng):
    out = slc.sparse_compose(T(np.zeros(7)), T(rng.standard_normal((3, 4))), T(rng.standard_normal((4, 3))))
    np.testing.assert_array_equal(out.data, np.zeros(12))


def test_compose_worked_example():
    z = [1.0, 2.0, 3.0, 4.0]
    wa, wo = [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]
    out = slc.sparse_compose(T(z), T(wa), T(wo)).data
    np.testing.assert_array_equal(out.reshape(2, 2), [[4, 4], [0, 2]])
    np.testing.assert_array_equal(out, compose_loops(z, wa, wo))


def test_compose_matches_loops_and_dense():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_a, n_o = int(rng.integers(1, 13)), int(rng.integers(1, 16))
        z = rng.standard_normal(n_a + n_o)
        wa, wo = rng.standard_normal((n_a, n_o)), rng.standard_normal((n_o, n_a))
        got = slc.sparse_compose(T(z), T(wa), T(wo)).data
        np.testing.assert_allclose(got, compose_loops(z, wa, wo), rtol=0, atol=1e-12)
        dense = slc.dense_head(T(z), T(slc.embed_sparse_in_dense(wa, wo))).data
        np.testing.assert_allclose(got, dense, rtol=0, atol=1e-12)


def test_embedded_dense_has_two_entries_per_column(rng):
    dense = slc.embed_sparse_in_dense(rng.uniform(1, 2, (3, 4)), rng.uniform(1, 2, (4, 3)))
    assert dense.shape == (7, 12)
    assert np.all((dense != 0).sum(axis=0) == 2)


def test_compose_gradient(rng):
    z = T(rng.standard_normal((3, 7)), True)
    wa, wo = T(rng.standard_normal((3, 4)), True), T(rng.standard_normal((4, 3)), True)
    g = rng.standard_normal((3, 12))
    assert_gradients(lambda: (slc.sparse_compose(z, wa, wo) * g).sum(), [z, wa, wo])


def test_compose_backward_formula(rng):
    z = T(rng.standard_normal(5), True)
    wa, wo = T(rng.standard_normal((2, 3)), True), T(rng.standard_normal((3, 2)), True)
    g = rng.standard_normal(6)
    (slc.sparse_compose(z, wa, wo) * g).sum().backward()
    G = g.reshape(2, 3)
    for i in range(2):
        for j in range(3):
            assert wa.grad[i, j] == pytest.approx(z.data[i] * G[i, j])
            assert wo.grad[j, i] == pytest.approx(z.data[2 + j] * G[i, j])
    for i in range(2):
        assert z.grad[i] == pytest.approx(sum(wa.data[i, j] * G[i, j] for j in range(3)))


def test_dense_head(rng):
    assert not slc.dense_head(T(np.zeros(5)), T(rng.standard_normal((5, 6)))).data.any()
    z, w = T(rng.standard_normal((2, 5)), True), T(rng.standard_normal((5, 6)), True)
    g = rng.standard_normal((2, 6))
    assert_gradients(lambda: (slc.dense_head(z, w) * g).sum(), [z, w])


# -- fuse / mask ------------------------------------------------------------


def test_fuse(rng):
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_array_equal(slc.fuse(T(a), T(b), 0.0).data, a)
    np.testing.assert_array_equal(slc.fuse(T(np.zeros(6)), T(b), 1.0).data, b)
    np.testing.assert_allclose(slc.fuse(T(a), T(b), 0.5).data, [x + 0.5 * y for x, y in zip(a, b)], rtol=1e-15)


def test_mask_all_ones(rng):
    y = rng.standard_normal((4, 6))
    assert np.array_equal(slc.apply_mask(y, np.ones(6)).argmax(1), y.argmax(1))


def test_mask_single_pair(rng):
    y = rng.standard_normal((5, 6)) * 100
    f = np.zeros(6)
    f[4] = 1
    assert np.all(slc.apply_mask(y, f).argmax(1) == 4)
    assert np.all(slc.apply_mask(T(y), f).data.argmax(1) == 4)


def test_mask_negative_logits_cannot_lose_to_masked():
    y = np.array([-5.0, -3.0, 2.0])
    out = slc.apply_mask(y, [1, 1, 0])
    assert out.tolist() == [-5.0, -3.0, MASKED] and out.argmax() == 1


def test_mask_must_be_binary():
    with pytest.raises(ContractError):
        slc.apply_mask(np.zeros(3), [1, 0.5, 0])


def test_masked_argmax_is_restricted_argmax():
    rng = np.random.default_rng(3)
    for n_a in range(1, 7):
        for n_o in range(1, 7):
            y = rng.standard_normal((20, n_a * n_o))
            f = rng.integers(0, 2, n_a * n_o)
            if not f.any():
                f[rng.integers(n_a * n_o)] = 1
            feasible = np.flatnonzero(f)
            expected = feasible[y[:, feasible].argmax(axis=1)]
            for got in (slc.apply_mask(y, f), slc.apply_mask(T(y), f).data):
                np.testing.assert_array_equal(got.argmax(axis=1), expected)


def test_mask_gradient_is_zero_off_mask(rng):
    y = T(rng.standard_normal(4), True)
    slc.apply_mask(y, [1, 0, 1, 0]).sum().backward()
    np.testing.assert_array_equal(y.grad, [1, 0, 1, 0])


# -- parameter counts -------------------------------------------------------


def test_param_count_examples():
    sparse, dense, ratio = slc.param_count(10, 20)
    assert (sparse, dense) == (400, 6000) and ratio == pytest.approx(1 / 15, rel=1e-15)
    assert slc.param_count(1, 1) == (2, 2, 1.0)


def test_param_count_reflection():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n_a, n_o = int(rng.integers(1, 30)), int(rng.integers(1, 30))
        d = int(rng.integers(1, 10))
        sparse, dense, ratio = slc.param_count(n_a, n_o)
        s = Slc(d, n_a, n_o)
        assert s.params["slc.w_attr"].data.size + s.params["slc.w_obj"].data.size == sparse == 2 * n_a * n_o
        assert s.pair_path_size() == 2 * n_a * n_o + (d + 1) * (n_a + n_o)
        assert Slc(d, n_a, n_o, SlcConfig(head="dense")).sparse_layer_size() == dense
        assert ratio == pytest.approx(2 / (n_a + n_o), rel=1e-15)


def test_dense_initialisation_matches_sparse(rng):
    z0, z1, z2 = (T(rng.standard_normal((3, 5))) for _ in range(3))
    a = Slc(5, 3, 4, seed=0).forward(z0, z1, z2).y_final.data
    b = Slc(5, 3, 4, SlcConfig(head="dense"), seed=0).forward(z0, z1, z2).y_final.data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


# -- whole compositor -------------------------------------------------------


@pytest.mark.parametrize("config", [SlcConfig(), SlcConfig(eta=0.7, norm_mode="l2"), SlcConfig(head="dense")])
def test_composite_forward_gradient(config, rng):
    s = Slc(6, 3, 4, config, seed=2)
    for p in s.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    z = [T(rng.standard_normal((2, 6)), True) for _ in range(3)]
    f = np.array([1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1])
    g = rng.standard_normal((2, 12))

    def fn():
        b = s.forward(*z, f_pair=f)
        return (b.y_final * g).sum() + nx.cross_entropy(b.y_attr, [0, 2]) + (b.y_masked * f * g).sum()

    assert_gradients(fn, z + list(s.params.values()))


def test_bundle_shapes(rng):
    s = Slc(6, 3, 4)
    b = s.forward(*(T(rng.standard_normal((2, 6))) for _ in range(3)), f_pair=np.ones(12))
    assert b.y_attr.shape == (2, 3) and b.y_obj.shape == (2, 4)
    assert b.z_pair.shape == b.z_pair_tilde.shape == (2, 7)
    assert b.y_decompose.shape == b.y_compose.shape == b.y_final.shape == b.y_masked.shape == (2, 12)
    np.testing.assert_allclose(b.y_final.data, b.y_decompose.data + b.y_compose.data)


def test_config_validation():
    with pytest.raises(ContractError):
        SlcConfig(norm_mode="sigmoid").validate()
    with pytest.raises(ContractError):
        SlcConfig(head="conv").validate()
