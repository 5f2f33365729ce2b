from dataclasses import replace

import numpy as np
import pytest

from contentctr import autodiff as ad
from contentctr.autodiff import DimensionError, Tape, Tensor, grad_check
from contentctr.model import ContentCTR, ModelConfig, attention_mask

SMALL = ModelConfig(n=4, d=8, d_h=4, n_h=2, ffn_hidden=8, d_visual=6, d_text=5, n_streamers=3)


def inputs(cfg, b=2, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return (scale * rng.uniform(-1, 1, size=(b, cfg.n, cfg.d_visual)),
            scale * rng.uniform(-1, 1, size=(b, cfg.n, cfg.d_text)),
            rng.integers(0, cfg.n_streamers, size=b))


def zeroed(model, prefixes):
    arrays = model.parameter_arrays()
    for k in arrays:
        if any(k.startswith(p) for p in prefixes):
            arrays[k] = np.zeros_like(arrays[k])
    return ContentCTR(model.config, arrays)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n=1)
    with pytest.raises(ValueError):
        ModelConfig(mask_mode="sideways")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"width": 3})
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_causal_mask_n3():
    m = attention_mask(3, "causal")
    expected = np.array([[0, -np.inf, -np.inf], [0, 0, -np.inf], [0, 0, 0]])
    np.testing.assert_array_equal(m, expected)
    np.testing.assert_array_equal(attention_mask(3, "full"), np.zeros((3, 3)))


def test_first_row_attends_only_to_itself():
    scores = np.random.default_rng(0).normal(size=(5, 5))
    w = ad.softmax(Tensor(scores + attention_mask(5)), axis=-1).data
    np.testing.assert_array_equal(w[0], [1, 0, 0, 0, 0])


def test_fuse_identity_projection():
    cfg = replace(SMALL, d_visual=8)
    model = ContentCTR(cfg)
    arrays = model.parameter_arrays()
    arrays["proj_visual.0.weight"] = np.eye(8)
    arrays["proj_visual.0.bias"] = np.zeros(8)
    arrays["proj_text.0.bias"] = np.arange(8.0)
    model = ContentCTR(cfg, arrays)
    visual = np.random.default_rng(1).normal(size=(2, cfg.n, 8))
    E_f, _, _ = model.fuse_features(visual, np.zeros((2, cfg.n, cfg.d_text)))
    np.testing.assert_array_equal(E_f.data[:, :, 0], visual)
    np.testing.assert_array_equal(E_f.data[:, :, 1], np.broadcast_to(np.arange(8.0), (2, cfg.n, 8)))


def test_fuse_shapes_at_full_width():
    cfg = ModelConfig(n=20, d=512, d_h=64, n_h=8, ffn_hidden=8, d_visual=32, d_text=32)
    E_f, S_p, S_a = ContentCTR(cfg).fuse_features(np.ones((2, 20, 32)), np.ones((2, 20, 32)))
    assert E_f.shape == (2, 20, 2, 512) and S_p.shape == S_a.shape == (2, 20, 512)


def test_fuse_batch_equivariance():
    model = ContentCTR(SMALL)
    v, t, _ = inputs(SMALL, b=3)
    perm = np.array([2, 0, 1])
    a = model.fuse_features(v, t)[0].data
    b = model.fuse_features(v[perm], t[perm])[0].data
    np.testing.assert_array_equal(a[perm], b)


def test_fuse_rejects_bad_dims():
    model = ContentCTR(SMALL)
    v, t, _ = inputs(SMALL)
    with pytest.raises(DimensionError):
        model.fuse_features(v[..., :-1], t)
    with pytest.raises(DimensionError):
        model.fuse_features(v, t[:, :-1])


def test_perceiver_residual_identity():
    model = zeroed(ContentCTR(SMALL), ["perceiver.0.attn.wo", "perceiver.0.ffn.2"])
    rng = np.random.default_rng(2)
    E_u = rng.normal(size=(2, SMALL.d))
    E_p = model.perceiver_forward(Tensor(rng.normal(size=(2, SMALL.n, 2, SMALL.d))), Tensor(E_u)).data
    np.testing.assert_array_equal(E_p, np.broadcast_to(E_u[:, None, :], E_p.shape))


def test_decoder_residual_identity():
    cfg = replace(SMALL, use_positional=False)
    model = zeroed(ContentCTR(cfg), ["decoder.0.attn.wo", "decoder.0.ffn.2"])
    E_p = np.random.default_rng(3).normal(size=(2, cfg.n, cfg.d))
    np.testing.assert_array_equal(model.decoder_forward(Tensor(E_p)).data, E_p)


def test_perceiver_shape():
    cfg = ModelConfig(n=4, d=8, n_h=2, d_h=4, L_perceiver=1)
    out = ContentCTR(cfg).perceiver_forward(Tensor(np.ones((1, 4, 2, 8))), Tensor(np.ones((1, 8))))
    assert out.shape == (1, 4, 8)


def test_perceiver_timestamp_independence():
    for seed in range(50):
        cfg = replace(SMALL, init_seed=seed)
        model = ContentCTR(cfg)
        rng = np.random.default_rng(seed)
        E_f = rng.normal(size=(2, cfg.n, 2, cfg.d))
        E_u = Tensor(rng.normal(size=(2, cfg.d)))
        i, j = rng.choice(cfg.n, size=2, replace=False)
        swapped = E_f.copy()
        swapped[:, [i, j]] = E_f[:, [j, i]]
        a = model.perceiver_forward(Tensor(E_f), E_u).data
        b = model.perceiver_forward(Tensor(swapped), E_u).data
        a[:, [i, j]] = a[:, [j, i]]
        np.testing.assert_array_equal(a, b)


def test_decoder_causality_bit_identical():
    rng = np.random.default_rng(4)
    model = ContentCTR(replace(SMALL, n=8))
    for _ in range(100):
        E_p = rng.normal(size=(2, 8, SMALL.d))
        i = int(rng.integers(0, 7))
        changed = E_p.copy()
        changed[:, i + 1:] = rng.normal(scale=10.0, size=changed[:, i + 1:].shape)
        a = model.decoder_forward(Tensor(E_p)).data
        b = model.decoder_forward(Tensor(changed)).data
        assert np.array_equal(a[:, : i + 1], b[:, : i + 1])


def test_predict_zero_head_is_half():
    model = zeroed(ContentCTR(SMALL), ["head."])
    s = model.predict(Tensor(np.random.default_rng(5).normal(size=(3, SMALL.n, SMALL.d)))).data
    np.testing.assert_array_equal(s, 0.5)
    assert s.shape == (3, SMALL.n)


def test_predict_monotone_in_logit():
    model = ContentCTR(SMALL)
    arrays = model.parameter_arrays()
    H = np.zeros((1, SMALL.n, SMALL.d))
    values = []
    for b in np.linspace(-3, 3, 7):
        arrays["head.bias"] = np.array([b])
        values.append(ContentCTR(SMALL, arrays).predict(Tensor(H)).data[0, 0])
    assert np.all(np.diff(values) > 0)


def test_model_shapes_at_full_width():
    cfg = ModelConfig(n=20, d=512, d_h=64, n_h=8, L_perceiver=3, L_decoder=3, ffn_hidden=64,
                      d_visual=16, d_text=16, n_streamers=4)
    out = ContentCTR(cfg)(*inputs(cfg, b=48))
    assert out.s.shape == (48, 20) and out.S_p.shape == (48, 20, 512)


def test_desk_forward_backward_smoke():
    cfg = ModelConfig(n=6, d=16, d_h=8, n_h=2, ffn_hidden=32, d_visual=16, d_text=16)
    model = ContentCTR(cfg)
    with Tape() as tape:
        loss = ad.mean(model(*inputs(cfg, b=2)).s)
    grads = tape.backward(loss, model.params.values())
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_mean_s_gradient_matches_finite_differences():
    cfg = ModelConfig(n=4, d=8, d_h=4, n_h=2, ffn_hidden=8, d_visual=6, d_text=6, n_streamers=3)
    model = ContentCTR(cfg)
    v, t, u = inputs(cfg, seed=11)
    names = list(model.params)

    def f(*tensors):
        return ad.mean(model.with_params(dict(zip(names, tensors)))(v, t, u).s)

    assert grad_check(f, [model.params[k].data for k in names]) < 1e-4


def test_outputs_finite_for_large_inputs():
    model = ContentCTR(SMALL)
    s = model(*inputs(SMALL, scale=1e3)).s.data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    s = model(*inputs(SMALL)).s.data
    assert np.all((s > 0) & (s < 1))


def test_full_mask_breaks_causality():
    model = ContentCTR(replace(SMALL, n=8))
    v, t, u = inputs(replace(SMALL, n=8), seed=6)
    v2 = v.copy()
    v2[:, -1] += 5.0
    a = model(v, t, u, mask_mode="full").s.data
    b = model(v2, t, u, mask_mode="full").s.data
    assert not np.array_equal(a[:, :-1], b[:, :-1])


def test_unknown_streamer_uses_fallback_row():
    model = ContentCTR(SMALL)
    table = model.params["streamer_table"].data
    emb = model.streamer_embedding(np.array([0, 99, -1])).data
    np.testing.assert_array_equal(emb[0], table[0])
    np.testing.assert_array_equal(emb[1], table[-1])
    np.testing.assert_array_equal(emb[2], table[-1])
    off = ContentCTR(replace(SMALL, use_streamer=False))
    np.testing.assert_array_equal(off.streamer_embedding(np.array([0]))[0].data, table[-1])


def test_modality_switches_change_outputs():
    v, t, u = inputs(SMALL, seed=8)
    full = ContentCTR(SMALL)(v, t, u).s.data
    no_text = ContentCTR(replace(SMALL, use_text=False))
    # with the text channel off, text inputs have no influence on s
    a = no_text(v, t, u).s.data
    b = no_text(v, t * -3.0, u).s.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(full, a)


def test_positional_table_length_checked():
    model = ContentCTR(SMALL)
    with pytest.raises(DimensionError):
        model.decoder_forward(Tensor(np.zeros((1, SMALL.n + 1, SMALL.d))))


def test_load_rejects_wrong_shapes():
    model = ContentCTR(SMALL)
    arrays = model.parameter_arrays()
    arrays["head.weight"] = np.zeros((3, 3))
    with pytest.raises(DimensionError):
        ContentCTR(SMALL, arrays)
    arrays.pop("head.weight")
    with pytest.raises(DimensionError):
        ContentCTR(SMALL, arrays)


def test_forward_deterministic():
    model = ContentCTR(SMALL)
    x = inputs(SMALL)
    assert np.array_equal(model(*x).s.data, model(*x).s.data)
    assert np.array_equal(ContentCTR(SMALL)(*x).s.data, model(*x).s.data)
