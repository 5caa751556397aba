import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import avf_layer, fusion_head, head_attention
from pstp import autodiff as ad
from pstp.autodiff import Tape, Tensor
from pstp.config import ModelConfig, SynthSpec
from pstp.errors import ConfigError, ShapeError
from pstp.features import generate_synthetic
from pstp.model import (
    PSTPNet,
    avam_attend,
    avf_fuse,
    lgpm_perceive,
    segment_embed,
    srsm_select,
    stack_bundles,
    topk_ascending,
    tssm_select,
)
from pstp.nn import Linear, MultiHeadAttention

F64 = np.float64


def t(x):
    return Tensor(np.asarray(x, dtype=F64))


def model_and_batch(cfg, n=3, seed=0, strength=2.0):
    data = generate_synthetic(SynthSpec(n_videos=n, seed=seed, signal_strength=strength), cfg)
    return PSTPNet(cfg, seed=seed, dtype=F64), stack_bundles(data, F64), data


# ---------------------------------------------------------------- fusion


def test_avf_zero_in_zero_out():
    a, v = avf_fuse(t(np.zeros((3, 4))), t(np.zeros((3, 4))))
    assert np.all(a.data == 0) and np.all(v.data == 0)


def test_avf_single_snippet(rng):
    a0, v0 = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
    a, v = avf_fuse(t(a0), t(v0))
    np.testing.assert_allclose(a.data, a0 + a0 + v0, atol=1e-12)
    np.testing.assert_allclose(v.data, v0 + v0 + a0, atol=1e-12)


@pytest.mark.parametrize("layers", [1, 2])
def test_avf_matches_transcription(rng, layers):
    a0, v0 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    a, v = avf_fuse(t(a0), t(v0), layers)
    ra, rv = a0, v0
    for _ in range(layers):
        ra, rv = avf_layer(ra, rv)
    np.testing.assert_allclose(a.data, ra, atol=1e-6)
    np.testing.assert_allclose(v.data, rv, atol=1e-6)


def test_avf_shape_mismatch():
    with pytest.raises(ShapeError):
        avf_fuse(t(np.zeros((3, 4))), t(np.zeros((2, 4))))


def test_lgpm_single_step_and_zero(rng):
    a0, v0 = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
    a, v = lgpm_perceive(t(a0), t(v0))
    np.testing.assert_allclose(a.data, 2 * a0 + v0, atol=1e-12)
    np.testing.assert_allclose(v.data, 2 * v0 + a0, atol=1e-12)
    z, _ = lgpm_perceive(t(np.zeros((4, 4))), t(np.zeros((4, 4))))
    assert np.all(z.data == 0)


def test_lgpm_matches_transcription(rng):
    a0, v0 = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))  # K=2, T=2 flattened
    a, v = lgpm_perceive(t(a0), t(v0))
    ra, rv = avf_layer(a0, v0)
    np.testing.assert_allclose(a.data, ra, atol=1e-6)
    np.testing.assert_allclose(v.data, rv, atol=1e-6)


def test_lgpm_length_mismatch():
    with pytest.raises(ShapeError):
        lgpm_perceive(t(np.zeros((4, 4))), t(np.zeros((3, 4))))


# ------------------------------------------------------- segment embedding


def test_segment_embed_identical_snippets(rng):
    fc = Linear(8, 4, rng, F64)
    row_a, row_v = rng.standard_normal(4), rng.standard_normal(4)
    out = segment_embed(t(np.tile(row_a, (1, 3, 1))), t(np.tile(row_v, (1, 3, 1))), fc)
    ref = np.maximum(np.concatenate([row_a, row_v]) @ fc.weight.data, 0)
    np.testing.assert_allclose(out.data[0], ref, atol=1e-12)
    assert out.shape == (1, 4)


def test_segment_embed_identity_fc(rng):
    fc = Linear(8, 4, rng, F64)
    fc.weight.data = np.vstack([np.eye(4), np.eye(4)])
    a, v = rng.standard_normal((1, 5, 4)), rng.standard_normal((1, 5, 4))
    out = segment_embed(t(a), t(v), fc)
    np.testing.assert_allclose(out.data[0], np.maximum(a[0].mean(0) + v[0].mean(0), 0), atol=1e-6)


# --------------------------------------------------------------- top-k


def test_topk_sort_oracle_examples():
    assert topk_ascending(np.array([0.1, 0.3, 0.05, 0.25, 0.3]), 2).tolist() == [1, 4]
    assert topk_ascending(np.array([0.4, 0.1, 0.3, 0.2]), 2).tolist() == [0, 2]
    assert topk_ascending(np.full(6, 1 / 6), 3).tolist() == [0, 1, 2]
    assert topk_ascending(np.array([0.1, 0.7, 0.2]), 1).tolist() == [1]
    assert topk_ascending(np.ones(5), 5).tolist() == [0, 1, 2, 3, 4]


def test_topk_rejects_oversized_k():
    with pytest.raises(ConfigError):
        topk_ascending(np.ones(3), 4)


def check_selection(w, idx, k):
    assert len(idx) == k == len(set(idx.tolist()))
    assert np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() < len(w)
    rest = np.setdiff1d(np.arange(len(w)), idx)
    if len(rest):
        assert w[idx].min() >= w[rest].max()
        # ties at the boundary go to the lower index
        boundary = w[idx].min()
        tied_out = rest[w[rest] == boundary]
        tied_in = idx[w[idx] == boundary]
        if len(tied_out):
            assert tied_in.max() < tied_out.min()


def test_selection_invariants_over_random_vectors():
    rng = np.random.default_rng(99)
    for trial in range(1000):
        n = int(rng.integers(1, 30))
        k = int(rng.integers(1, n + 1))
        w = rng.random(n)
        if trial % 3 == 0:
            w = np.round(w * 4) / 4  # force ties
        check_selection(w, topk_ascending(w, k), k)


# -------------------------------------------------------- selection heads


def test_tssm_keeps_everything_when_top_k_is_k(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    idx, w, _ = tssm_select(t(rng.standard_normal((2, 5, 8))), t(rng.standard_normal((2, 1, 8))), attn, 5)
    assert idx.tolist() == [[0, 1, 2, 3, 4]] * 2
    np.testing.assert_allclose(w.sum(axis=-1), 1, atol=1e-12)


def test_tssm_weights_are_head_average(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    seg, q = rng.standard_normal((1, 5, 8)), rng.standard_normal((1, 1, 8))
    _, w, _ = tssm_select(t(seg), t(q), attn, 2)
    _, ref_w = head_attention(attn, q[0], seg[0], seg[0])
    np.testing.assert_allclose(w[0], ref_w[0], atol=1e-12)


def test_tssm_rejects_large_top_k(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    with pytest.raises(ConfigError):
        tssm_select(t(np.zeros((1, 3, 8))), t(np.zeros((1, 1, 8))), attn, 4)


def test_srsm_keeps_all_in_order_when_top_m_is_m(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    patches = t(rng.standard_normal((1, 2, 4, 8)))
    kept, idx, w = srsm_select(patches, t(rng.standard_normal((1, 1, 8))), attn, 4)
    assert idx.tolist() == [[[0, 1, 2, 3]] * 2]
    # every key's contribution, projected, summed minus the extra biases equals the attention output
    q = rng.standard_normal((1, 8))
    kept, idx, w = srsm_select(patches, t(q[None]), attn, 4)
    out, _ = head_attention(attn, q, patches.data[0, 0], patches.data[0, 0])
    bias = attn.o_proj.bias.data
    np.testing.assert_allclose(kept.data[0, 0].sum(axis=0) - 3 * bias, out[0], atol=1e-10)


def test_srsm_rejects_large_top_m(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    with pytest.raises(ConfigError):
        srsm_select(t(np.zeros((1, 1, 3, 8))), t(np.zeros((1, 1, 8))), attn, 4)


def test_avam_identical_rows(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    row = rng.standard_normal(8)
    patches = np.tile(row, (1, 2, 3, 1))
    out = avam_attend(t(patches), t(rng.standard_normal((1, 2, 8))), attn)
    attended = (row @ attn.v_proj.weight.data + attn.v_proj.bias.data) @ attn.o_proj.weight.data
    np.testing.assert_allclose(out.data - patches, np.broadcast_to(attended, patches.shape), atol=1e-10)


def test_avam_zero_patches(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    out = avam_attend(t(np.zeros((1, 2, 3, 8))), t(rng.standard_normal((1, 2, 8))), attn)
    assert np.all(out.data == 0)


def test_avam_matches_per_frame_oracle(rng):
    attn = MultiHeadAttention(4, 2, rng, F64)
    patches, audio = rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((1, 2, 4))
    out = avam_attend(t(patches), t(audio), attn)
    for g in range(2):
        ref, _ = head_attention(attn, audio[0, g:g + 1], patches[0, g], patches[0, g])
        np.testing.assert_allclose(out.data[0, g], patches[0, g] + ref, atol=1e-6)


def test_avam_frame_mismatch(rng):
    attn = MultiHeadAttention(4, 2, rng, F64)
    with pytest.raises(ShapeError):
        avam_attend(t(np.zeros((1, 2, 3, 4))), t(np.zeros((1, 3, 4))), attn)


# ------------------------------------------------------------- full model


@settings(max_examples=25)
@given(
    K=st.integers(1, 4), T=st.integers(1, 3), M=st.integers(1, 5), heads=st.sampled_from([1, 2]),
    C=st.integers(2, 5), data=st.data(),
)
def test_shape_contract(K, T, M, heads, C, data):
    top_k = data.draw(st.integers(1, K))
    top_m = data.draw(st.integers(1, M))
    cfg = ModelConfig(K=K, T=T, M=M, D=4, D_a=3, top_k=top_k, top_m=top_m, heads=heads, C=C)
    model, batch, _ = model_and_batch(cfg, n=2)
    res = model.forward(batch)
    o, G, D = res.outputs, cfg.gamma, cfg.D
    assert o.f_tssm.shape == (2, top_k, T, D)
    assert o.f_tssm_audio.shape == (2, G, D)
    assert o.f_tssm_patch.shape == (2, G, M, D)
    assert o.f_srsm.shape == (2, G, top_m, D)
    assert o.f_avam.shape == (2, G, top_m, D)
    assert o.f_lgpm_a.shape == o.f_lgpm_v.shape == (2, K * T, D)
    assert res.logits.shape == res.probs.shape == (2, C)
    tr = res.trace
    assert tr.segment_indices.shape == (2, top_k) and tr.segment_weights.shape == (2, K)
    assert tr.patch_indices.shape == (2, G, top_m) and tr.patch_weights.shape == (2, G, M)
    np.testing.assert_allclose(tr.segment_weights.sum(-1), 1, atol=1e-6)
    np.testing.assert_allclose(tr.patch_weights.sum(-1), 1, atol=1e-6)
    np.testing.assert_allclose(res.probs.data.sum(-1), 1, atol=1e-6)
    for b in range(2):
        check_selection(tr.segment_weights[b], tr.segment_indices[b], top_k)
        for g in range(G):
            check_selection(tr.patch_weights[b, g], tr.patch_indices[b, g], top_m)


def test_gathers_follow_selected_segments(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg)
    res = model.forward(batch)
    cfg = tiny_cfg
    for b in range(len(batch)):
        for slot, k in enumerate(res.trace.segment_indices[b]):
            for s in range(cfg.T):
                g = slot * cfg.T + s
                np.testing.assert_array_equal(
                    res.outputs.f_tssm_patch.data[b, g],
                    model.patch_proj(t(batch.visual_patch[b, k, s])).data,
                )


def test_fusion_matches_transcription(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg)
    res = model.forward(batch)
    for b in range(len(batch)):
        ref = fusion_head(res.outputs, batch.question, model.fusion_fc, model.classifier, b)
        np.testing.assert_allclose(res.logits.data[b], ref, atol=1e-6)


def test_zero_question_removes_video_dependence(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg)
    batch.question[:] = 0
    logits = model.forward(batch).logits.data
    ref = model.fusion_fc.bias.data @ model.classifier.weight.data + model.classifier.bias.data
    np.testing.assert_allclose(logits, np.broadcast_to(ref, logits.shape), atol=1e-12)


def test_probabilities_are_open_interval(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg, n=5)
    p = model.forward(batch).probs.data
    assert np.all(p > 0) and np.all(p < 1)


@pytest.mark.parametrize("shift", [-7.5, 3.0, 1e3])
def test_logit_shift_invariance(tiny_cfg, shift):
    model, batch, _ = model_and_batch(tiny_cfg, n=4)
    base, moved = model.forward(batch).trace, model.forward(batch, logit_shift=shift).trace
    assert base.segment_indices.tobytes() == moved.segment_indices.tobytes()
    assert base.patch_indices.tobytes() == moved.patch_indices.tobytes()
    np.testing.assert_allclose(base.segment_weights, moved.segment_weights, atol=1e-6)
    np.testing.assert_allclose(base.patch_weights, moved.patch_weights, atol=1e-6)


def test_unselected_segments_get_no_patch_gradient(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg, n=2)
    patches = Tensor(batch.visual_patch.copy(), requires_grad=True)
    batch.visual_patch = patches
    with Tape() as tape:
        loss, res = model.loss(batch)
    tape.backward(loss)
    for b in range(2):
        for k in range(tiny_cfg.K):
            block = patches.grad[b, k]
            if k in res.trace.segment_indices[b]:
                assert np.any(block != 0)
            else:
                assert np.all(block == 0)


def test_permutation_equivariance_without_global_module():
    cfg = ModelConfig(K=4, T=2, M=5, D=8, D_a=4, top_k=2, top_m=3, heads=2, C=3, use_lgpm=False)
    model, batch, _ = model_and_batch(cfg, n=3)
    perm = np.array([2, 0, 3, 1])
    res = model.forward(batch)
    for name in ("audio_raw", "visual_frame", "visual_patch"):
        setattr(batch, name, getattr(batch, name)[:, perm])
    moved = model.forward(batch)
    np.testing.assert_allclose(moved.trace.segment_weights, res.trace.segment_weights[:, perm], atol=1e-12)
    inv = np.argsort(perm)
    for b in range(3):
        mapped = np.sort(inv[res.trace.segment_indices[b]])
        assert moved.trace.segment_indices[b].tolist() == mapped.tolist()
    np.testing.assert_allclose(moved.logits.data, res.logits.data, atol=1e-10)


def test_forward_is_bit_deterministic(tiny_cfg):
    m1, batch, _ = model_and_batch(tiny_cfg)
    m2, _, _ = model_and_batch(tiny_cfg)
    assert m1.forward(batch).logits.data.tobytes() == m2.forward(batch).logits.data.tobytes()


def test_disabled_modules(tiny_cfg):
    for name in ("srsm", "avam", "lgpm", "tssm"):
        cfg = tiny_cfg.ablate(name)
        model, batch, _ = model_and_batch(cfg)
        res = model.forward(batch)
        np.testing.assert_allclose(res.probs.data.sum(-1), 1, atol=1e-6)
        if name == "srsm":
            assert res.trace.patch_indices is None
        if name == "avam":
            assert res.outputs.f_avam is None
        if name == "lgpm":
            assert res.outputs.f_lgpm_a is None


def test_batch_dims_checked(tiny_cfg):
    model, batch, _ = model_and_batch(tiny_cfg)
    other = PSTPNet(tiny_cfg.replace(M=6), dtype=F64)
    with pytest.raises(ConfigError):
        other.forward(batch)
