import math

import numpy as np
import pytest

from crossmodal import autodiff as ad
from crossmodal import layers as L
from crossmodal.autodiff import Tensor
from crossmodal.config import ExperimentConfig
from crossmodal.errors import ConfigError, DimensionError, EmptySequenceError
from crossmodal.model import Classifier

import oracles


def rnn_params(seed, Dv=3, Da=2, H=4):
    store = L.ParamStore(seed)
    return store, L.RnnTowerParams(L.RnnParams.create(store, "v", Dv, H), L.RnnParams.create(store, "a", Da, H))


def tf_params(seed, Dv=3, Da=2, k=2, dk=3):
    store = L.ParamStore(seed)
    p = L.TransformerLayerParams(
        L.AttentionParams.create(store, "v", Dv, k, dk), L.AttentionParams.create(store, "a", Da, k, dk)
    )
    return store, p


def vlad_params(seed, Dv=3, Da=2, Kv=4, Ka=2):
    store = L.ParamStore(seed)
    return store, L.NetVladParams(L.VladParams.create(store, "v", Dv, Kv), L.VladParams.create(store, "a", Da, Ka))


def arr(p):
    return p.data


# -- attention weights ---------------------------------------------------------------------


def test_attention_uniform_for_identical_frames():
    h = Tensor(np.tile([0.3, -1.2, 0.5], (4, 1)))
    a = L.attention_weights(h, Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(a, 0.25, atol=1e-15)


def test_attention_closed_form():
    a = L.attention_weights(Tensor([[0.0], [math.log(3.0)]]), Tensor([1.0])).data
    assert np.allclose(a, [0.25, 0.75], atol=1e-15)


def test_attention_empty_sequence():
    with pytest.raises(EmptySequenceError):
        L.attention_weights(Tensor(np.zeros((0, 3))), Tensor(np.ones(3)))


def test_attention_sums_to_one_and_respects_mask():
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(5, 6, 4)))
    mask = np.ones((5, 6))
    mask[:, 4:] = 0
    a = L.attention_weights(h, Tensor(rng.normal(size=4)), mask).data
    assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-12)
    assert np.all(a[:, 4:] == 0)


# -- cross-modal RNN -------------------------------------------------------------------------------


def test_cross_modal_rnn_matches_reference():
    rng = np.random.default_rng(1)
    store, p = rnn_params(1)
    T = 4
    F_v = L.CrossModalTransform.create(store, "Fv", T, T)
    F_a = L.CrossModalTransform.create(store, "Fa", T, T)
    X_v, X_a = rng.normal(size=(T, 3)), rng.normal(size=(T, 2))
    c_v, c_a = L.cross_modal_rnn(Tensor(X_v), Tensor(X_a), p, F_v, F_a, gate=0.7)
    pv = tuple(arr(t) for t in (p.video.W_ih, p.video.W_hh, p.video.b, p.video.score))
    pa = tuple(arr(t) for t in (p.audio.W_ih, p.audio.W_hh, p.audio.b, p.audio.score))
    r_v, r_a = oracles.ref_cross_modal_rnn(X_v, X_a, pv, pa, (arr(F_v.W), arr(F_v.b)), (arr(F_a.W), arr(F_a.b)), 0.7)
    assert np.allclose(c_v.data, r_v, atol=1e-12)
    assert np.allclose(c_a.data, r_a, atol=1e-12)


def test_cross_modal_rnn_zero_transform_and_zero_gate_collapse():
    rng = np.random.default_rng(2)
    store, p = rnn_params(2)
    T = 5
    F_v = L.CrossModalTransform.create(store, "Fv", T, T)
    F_a = L.CrossModalTransform.create(store, "Fa", T, T)
    X_v, X_a = Tensor(rng.normal(size=(T, 3))), Tensor(rng.normal(size=(T, 2)))
    base_v = L.attention_rnn(X_v, p.video).data
    base_a = L.attention_rnn(X_a, p.audio).data
    zero_v, zero_a = L.CrossModalTransform.zeros_like(F_v), L.CrossModalTransform.zeros_like(F_a)
    for out in (L.cross_modal_rnn(X_v, X_a, p, zero_v, zero_a, gate=1.0), L.cross_modal_rnn(X_v, X_a, p, F_v, F_a, gate=0.0)):
        assert np.array_equal(out[0].data, base_v)
        assert np.array_equal(out[1].data, base_a)


def test_cross_modal_rnn_gradient_check():
    rng = np.random.default_rng(3)
    store, p = rnn_params(3)
    T = 3
    F_v = L.CrossModalTransform.create(store, "Fv", T, T)
    F_a = L.CrossModalTransform.create(store, "Fa", T, T)
    X_v, X_a = Tensor(rng.normal(size=(T, 3))), Tensor(rng.normal(size=(T, 2)))
    w = Tensor(rng.normal(size=8))

    def f():
        c_v, c_a = L.cross_modal_rnn(X_v, X_a, p, F_v, F_a, gate=0.8)
        return ad.reduce_sum(ad.concat([c_v, c_a], axis=0) * w)

    assert ad.gradient_check(f, list(store.params.values())) < 1e-4


def test_cross_modal_rnn_frame_mismatch():
    _, p = rnn_params(4)
    with pytest.raises(DimensionError):
        L.cross_modal_rnn(Tensor(np.ones((3, 3))), Tensor(np.ones((4, 2))), p)


# -- transformer --------------------------------------------------------------------------------------


def test_transformer_matches_reference():
    rng = np.random.default_rng(5)
    store, p = tf_params(5)
    F_v = L.CrossModalTransform.per_head(store, "Fv", 2)
    F_a = L.CrossModalTransform.per_head(store, "Fa", 2)
    X_v, X_a = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    Y_v, Y_a = L.cross_modal_transformer_layer(Tensor(X_v), Tensor(X_a), p, F_v, F_a, gate=0.6)
    pv = tuple(arr(t) for t in (p.video.W_q, p.video.W_k, p.video.W_v, p.video.W_o))
    pa = tuple(arr(t) for t in (p.audio.W_q, p.audio.W_k, p.audio.W_v, p.audio.W_o))
    r_v, r_a = oracles.ref_cross_transformer(X_v, X_a, pv, pa, (arr(F_v.W), arr(F_v.b)), (arr(F_a.W), arr(F_a.b)), 0.6)
    assert np.allclose(Y_v.data, r_v, atol=1e-12)
    assert np.allclose(Y_a.data, r_a, atol=1e-12)


def test_transformer_zero_transform_is_plain_self_attention():
    rng = np.random.default_rng(6)
    store, p = tf_params(6)
    F = L.CrossModalTransform.per_head(store, "F", 2)
    Z = L.CrossModalTransform.zeros_like(F)
    X_v, X_a = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 2)))
    Y_v, Y_a = L.cross_modal_transformer_layer(X_v, X_a, p, Z, Z, gate=1.0)
    assert Y_v.data.tobytes() == L.multihead_self_attention(X_v, p.video).data.tobytes()
    assert Y_a.data.tobytes() == L.multihead_self_attention(X_a, p.audio).data.tobytes()


def test_transformer_single_frame_single_head():
    rng = np.random.default_rng(7)
    store = L.ParamStore(7)
    p = L.TransformerLayerParams(L.AttentionParams.create(store, "v", 3, 1, 4), L.AttentionParams.create(store, "a", 2, 1, 4))
    x = rng.normal(size=(1, 3))
    Y_v, _ = L.cross_modal_transformer_layer(Tensor(x), Tensor(rng.normal(size=(1, 2))), p)
    assert np.allclose(Y_v.data, x @ p.video.W_v.data[0] @ p.video.W_o.data, atol=1e-14)


def test_transformer_gradient_check():
    rng = np.random.default_rng(8)
    store, p = tf_params(8, k=2, dk=3)
    F_v = L.CrossModalTransform.per_head(store, "Fv", 2)
    F_a = L.CrossModalTransform.per_head(store, "Fa", 2)
    X_v, X_a = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))
    w_v, w_a = Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(2, 6)))

    def f():
        Y_v, Y_a = L.cross_modal_transformer_layer(X_v, X_a, p, F_v, F_a, gate=0.9)
        return ad.reduce_sum(Y_v * w_v) + ad.reduce_sum(Y_a * w_a)

    assert ad.gradient_check(f, list(store.params.values())) < 1e-4


def test_transformer_dimension_errors():
    store = L.ParamStore(0)
    with pytest.raises(DimensionError):
        L.AttentionParams.create(store, "bad", 3, 2, 0)
    _, p = tf_params(9)
    with pytest.raises(DimensionError):
        L.cross_modal_transformer_layer(Tensor(np.ones((3, 3))), Tensor(np.ones((2, 2))), p)


# -- NetVLAD -------------------------------------------------------------------------------------------------


def test_netvlad_zero_projection_uniform():
    p = L.VladParams(Tensor(np.ones((4, 3))), Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
    a = L.netvlad_assignments(Tensor(np.random.default_rng(0).normal(size=(5, 3))), p).data
    assert np.allclose(a, 0.25, atol=1e-15)


def test_netvlad_rows_on_simplex():
    _, p = vlad_params(10)
    a = L.netvlad_assignments(Tensor(np.random.default_rng(1).normal(size=(6, 3))), p.video).data
    assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-12)


def test_netvlad_two_cluster_closed_form():
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    b = np.array([0.1, -0.2])
    x = np.array([[0.3, 0.7]])
    p = L.VladParams(Tensor(np.zeros((2, 2))), Tensor(W), Tensor(b))
    z = x @ W + b
    expected = 1.0 / (1.0 + np.exp(z[0, 1] - z[0, 0]))
    a = L.netvlad_assignments(Tensor(x), p).data
    assert abs(a[0, 0] - expected) < 1e-15 and abs(a[0, 1] - (1 - expected)) < 1e-15


def test_netvlad_zero_clusters_is_config_error():
    with pytest.raises(ConfigError):
        L.VladParams.create(L.ParamStore(0), "v", 3, 0)
    p = L.VladParams(Tensor(np.zeros((0, 3))), Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)))
    with pytest.raises(ConfigError):
        L.netvlad_assignments(Tensor(np.ones((2, 3))), p)


def test_cross_modal_netvlad_matches_reference_and_collapses():
    rng = np.random.default_rng(11)
    store, p = vlad_params(11)
    F_v = L.CrossModalTransform.create(store, "Fv", 4, 2)
    F_a = L.CrossModalTransform.create(store, "Fa", 2, 4)
    X_v, X_a = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    V_v, V_a = L.cross_modal_netvlad(Tensor(X_v), Tensor(X_a), p, F_v, F_a, gate=0.5)
    _, a_v = oracles.ref_netvlad(X_v, p.video.centers.data, p.video.W_assign.data, p.video.b_assign.data)
    _, a_a = oracles.ref_netvlad(X_a, p.audio.centers.data, p.audio.W_assign.data, p.audio.b_assign.data)
    ext_v = 0.5 * oracles.relu(a_a @ F_a.W.data + F_a.b.data)
    ext_a = 0.5 * oracles.relu(a_v @ F_v.W.data + F_v.b.data)
    r_v, _ = oracles.ref_netvlad(X_v, p.video.centers.data, p.video.W_assign.data, p.video.b_assign.data, ext_v)
    r_a, _ = oracles.ref_netvlad(X_a, p.audio.centers.data, p.audio.W_assign.data, p.audio.b_assign.data, ext_a)
    assert np.allclose(V_v.data, r_v, atol=1e-12) and np.allclose(V_a.data, r_a, atol=1e-12)
    Zv, Za = L.CrossModalTransform.zeros_like(F_v), L.CrossModalTransform.zeros_like(F_a)
    Z_v, Z_a = L.cross_modal_netvlad(Tensor(X_v), Tensor(X_a), p, Zv, Za, gate=0.37)
    assert np.array_equal(Z_v.data, L.netvlad(Tensor(X_v), p.video).data)
    assert np.array_equal(Z_a.data, L.netvlad(Tensor(X_a), p.audio).data)


def test_netvlad_frame_on_center_contributes_nothing():
    _, p = vlad_params(12)
    x = p.video.centers.data[2:3].copy()
    V = L.netvlad(Tensor(x), p.video).data
    assert np.allclose(V[2], 0.0, atol=1e-15)


def test_netvlad_gradient_check():
    rng = np.random.default_rng(13)
    store, p = vlad_params(13, Kv=4, Ka=2)
    F_v = L.CrossModalTransform.create(store, "Fv", 4, 2)
    F_a = L.CrossModalTransform.create(store, "Fa", 2, 4)
    X_v, X_a = Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(3, 2)))

    def f():
        V_v, V_a = L.cross_modal_netvlad(X_v, X_a, p, F_v, F_a, gate=1.0)
        d = ad.concat([L.vlad_descriptor(ad.reshape(V_v, (1, 4, 3))), L.vlad_descriptor(ad.reshape(V_a, (1, 2, 2)))], axis=1)
        return ad.reduce_sum(d * Tensor(np.arange(16.0) / 7.0))

    assert ad.gradient_check(f, list(store.params.values())) < 1e-4


def test_netvlad_transform_dimension_error():
    store, p = vlad_params(14)
    bad = L.CrossModalTransform.create(store, "bad", 4, 4)
    ok = L.CrossModalTransform.create(store, "ok", 4, 2)
    with pytest.raises(DimensionError):
        L.cross_modal_netvlad(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), p, ok, bad)


def test_netvlad_cluster_permutation_equivariance():
    rng = np.random.default_rng(15)
    _, p = vlad_params(15)
    X = Tensor(rng.normal(size=(5, 3)))
    perm = np.array([2, 0, 3, 1])
    q = L.VladParams(Tensor(p.video.centers.data[perm]), Tensor(p.video.W_assign.data[:, perm]), Tensor(p.video.b_assign.data[perm]))
    assert np.allclose(L.netvlad(X, q).data, L.netvlad(X, p.video).data[perm], atol=1e-14)


# -- fusion ---------------------------------------------------------------------------------------------------


def test_early_fusion_concatenates_frames():
    out = L.early_fusion(Tensor([[1.0, 2.0]]), Tensor([[3.0]]))
    assert out.data.tolist() == [[1.0, 2.0, 3.0]]
    with pytest.raises(DimensionError):
        L.early_fusion(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 1))))


def test_early_fusion_gradient_reaches_both_inputs():
    rng = np.random.default_rng(16)
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    W = Tensor(rng.normal(size=(3, 2)))
    f = lambda: ad.reduce_sum(ad.tanh(ad.matmul(L.early_fusion(a, b), W)))
    assert ad.gradient_check(f, [a, b]) < 1e-4
    ad.backward(f())
    assert np.any(a.grad != 0) and np.any(b.grad != 0)


def test_late_fusion_head():
    store = L.ParamStore(17)
    head = L.HeadParams.create(store, "head", 5, 4, 7)
    rng = np.random.default_rng(17)
    e_v, e_a = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 2)))
    assert L.late_fusion_head(e_v, e_a, head).shape == (2, 7)
    zero = L.HeadParams(head.W1, head.b1, Tensor(np.zeros((4, 7))), head.b2)
    out = L.late_fusion_head(e_v, e_a, zero).data
    assert np.array_equal(out, np.tile(head.b2.data, (2, 1)))
    assert ad.gradient_check(lambda: ad.reduce_sum(ad.sigmoid(L.late_fusion_head(e_v, e_a, head))), [e_v, *store.params.values()]) < 1e-4


def test_masked_mean_ignores_padding():
    rng = np.random.default_rng(18)
    X = rng.normal(size=(3, 4))
    padded = np.vstack([X, np.zeros((2, 4))])
    m = np.array([1, 1, 1, 0, 0.0])
    assert np.allclose(L.masked_mean(Tensor(padded), m).data, X.mean(axis=0), atol=1e-15)


def test_outputs_finite_for_bounded_parameters():
    rng = np.random.default_rng(19)
    for _ in range(5):
        store, p = tf_params(int(rng.integers(1000)))
        F = L.CrossModalTransform.per_head(store, "F", 2)
        for t in store.params.values():
            t.data[...] = rng.uniform(-10, 10, size=t.shape)
        Y_v, Y_a = L.cross_modal_transformer_layer(Tensor(rng.normal(size=(6, 3)) * 5), Tensor(rng.normal(size=(6, 2)) * 5), p, F, F)
        assert np.all(np.isfinite(Y_v.data)) and np.all(np.isfinite(Y_a.data))
        store, q = vlad_params(int(rng.integers(1000)))
        for t in store.params.values():
            t.data[...] = rng.uniform(-10, 10, size=t.shape)
        d = L.vlad_descriptor(L.netvlad(Tensor(rng.normal(size=(1, 6, 3)) * 5), q.video))
        assert np.all(np.isfinite(d.data))


# -- full models ----------------------------------------------------------------------------------------------


@pytest.mark.parametrize("backbone", ["rnn", "transformer", "netvlad"])
@pytest.mark.parametrize("variant", ["E", "L", "CM-G", "CM-C"])
def test_full_model_gradient_check(backbone, variant):
    cfg = ExperimentConfig(backbone=backbone, variant=variant, rnn_hidden=3, heads=2, head_dim=2,
                           clusters_video=3, clusters_audio=2, head_hidden=4)
    T, B = 2, 2
    corr_dim = 3 if variant == "CM-C" else 0
    model = Classifier(cfg, 3, 2, 5, T, corr_dim=corr_dim, seed=1)
    rng = np.random.default_rng(20)
    batch = {"video": rng.normal(size=(B, T, 3)), "audio": rng.normal(size=(B, T, 2)),
             "mask": np.ones((B, T)), "targets": (rng.random((B, 5)) > 0.5).astype(float)}
    gate = np.array([1.0, 0.4]) if variant.startswith("CM") else None
    feat = rng.uniform(size=(B, 3)) if corr_dim else None
    err = ad.gradient_check(lambda: model.loss(batch, gate, feat), list(model.params.values()))
    assert err < 1e-4


def test_concat_variant_widens_inputs_by_feature_length():
    cfg = ExperimentConfig(backbone="transformer", variant="CM-C", heads=2, head_dim=2)
    base = Classifier(cfg.replace(variant="CM-G"), 6, 4, 5, 8, seed=0)
    cat = Classifier(cfg, 6, 4, 5, 8, corr_dim=17, seed=0)
    assert cat.tower.video.W_q.shape[1] - base.tower.video.W_q.shape[1] == 17
    assert cat.tower.audio.W_q.shape[1] - base.tower.audio.W_q.shape[1] == 17
