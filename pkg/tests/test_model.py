import numpy as np
import pytest

import skiplab.tensor as T
from skiplab.model import Model, ModelConfig, apply_lora, causal_mask, module_param_counts
from skiplab.routing import forward_routed


def tiny_config(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=19, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


def zero_module(module):
    for key, w in module.weights.items():
        if key != "norm":
            w.data[:] = 0.0


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(n_layers=1, d_model=10, n_heads=3, d_ff=8)
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(n_layers=0, d_model=8, n_heads=2, d_ff=8)
    assert tiny_config().n_modules == 4


def test_zero_weight_module_outputs_zero():
    model = Model(tiny_config(), dtype=np.float64, seed=0)
    zero_module(model.modules[0])
    x = T.tensor(np.random.default_rng(0).standard_normal((1, 4, 16)))
    out = model.modules[0].forward(x, causal_mask(4))
    np.testing.assert_array_equal(out.data, np.zeros_like(out.data))
    # residual-wrapped: routed output reduces to x
    np.testing.assert_array_equal(T.add(x, out).data, x.data)


def test_single_position_attention_weights_are_one():
    cfg = tiny_config(n_heads=1)
    model = Model(cfg, dtype=np.float64, seed=1)
    attn = model.modules[0]
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, cfg.d_model))
    out = attn.forward(T.tensor(x), causal_mask(1)).data
    # With one position softmax is 1, so output is o-proj(v-proj(norm(x))).
    normed = x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + cfg.rms_eps)
    expected = (normed @ attn.weights["wv"].data) @ attn.weights["wo"].data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def _straight_line_attention(x, weights, cfg):
    """Independent numpy re-statement of the attention module."""
    S, d = x.shape
    H, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
    normed = x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + cfg.rms_eps)
    q = normed @ weights["wq"].data
    k = normed @ weights["wk"].data
    v = normed @ weights["wv"].data
    out = np.zeros_like(x)
    for h in range(H):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
        for t in range(S):
            row = scores[t, : t + 1]
            row = np.exp(row - row.max())
            p = row / row.sum()
            out[t, sl] = p @ v[: t + 1, sl]
    return out @ weights["wo"].data


def _straight_line_mlp(x, weights, cfg):
    normed = x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + cfg.rms_eps)
    g = normed @ weights["wg"].data
    u = normed @ weights["wu"].data
    act = g / (1.0 + np.exp(-g)) * u
    return act @ weights["wd"].data


def test_forward_module_matches_straight_line_oracle():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, cfg.d_model))
    attn_out = model.modules[0].forward(T.tensor(x[None]), causal_mask(3)).data[0]
    ref = _straight_line_attention(x, model.modules[0].weights, cfg)
    assert np.abs(attn_out - ref).max() / np.abs(ref).max() <= 1e-10
    mlp_out = model.modules[1].forward(T.tensor(x[None]), None).data[0]
    ref = _straight_line_mlp(x, model.modules[1].weights, cfg)
    assert np.abs(mlp_out - ref).max() / np.abs(ref).max() <= 1e-10


def test_dense_equals_all_execute_routing():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=5)
    toks = np.random.default_rng(6).integers(0, cfg.vocab_size, size=(2, 7))
    dense = model.forward_dense(toks).data
    routed = forward_routed(model, [], toks, mode="forced", forced=np.ones(cfg.n_modules)).logits.data
    np.testing.assert_array_equal(routed, dense)


def test_logits_shape():
    cfg = tiny_config()
    model = Model(cfg, seed=7)
    toks = np.zeros((3, 5), dtype=np.int64)
    assert model.forward_dense(toks).shape == (3, 5, cfg.vocab_size)


def test_token_out_of_range_rejected():
    cfg = tiny_config()
    model = Model(cfg, seed=8)
    with pytest.raises(IndexError):
        model.forward_dense(np.array([[0, cfg.vocab_size]]))


def test_sequence_too_long_rejected():
    cfg = tiny_config(max_seq_len=6)
    model = Model(cfg, seed=9)
    with pytest.raises(ValueError, match="max_seq_len"):
        model.forward_dense(np.zeros((1, 7), dtype=np.int64))


def test_causality_perturbation():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=10)
    rng = np.random.default_rng(11)
    toks = rng.integers(0, cfg.vocab_size, size=(1, 8))
    base = model.forward_dense(toks).data
    t = 4
    model.embed_tok.data[toks[0, t]] += 0.37  # perturb token t's embedding row
    pert = model.forward_dense(toks).data
    np.testing.assert_array_equal(pert[0, :t], base[0, :t])
    assert np.abs(pert[0, t:] - base[0, t:]).max() > 0


def test_residual_decomposition_exact():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=12)
    toks = np.random.default_rng(13).integers(0, cfg.vocab_size, size=(1, 5))
    dense = model.forward_dense(toks).data
    # Fold the gated update with execute gates fixed to 1 for all modules.
    mask = causal_mask(5)
    x = model.embed(toks)
    for m in model.modules:
        f = m.forward(x, mask)
        x = T.add(T.mul(T.tensor(np.ones((1, 5, 1))), T.add(f, x)),
                  T.mul(T.tensor(np.zeros((1, 5, 1))), x))
    folded = model.head(x).data
    np.testing.assert_array_equal(folded, dense)


def test_lora_zero_init_is_identity():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=14)
    toks = np.random.default_rng(15).integers(0, cfg.vocab_size, size=(2, 6))
    base = model.forward_dense(toks).data
    apply_lora(model, rank=4, scale=2.0, seed=16)
    adapted = model.forward_dense(toks).data
    np.testing.assert_array_equal(adapted, base)


def test_lora_full_rank_matches_weight_update():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=17)
    toks = np.random.default_rng(18).integers(0, cfg.vocab_size, size=(1, 4))
    target = "layers.0.attn.wq"
    apply_lora(model, targets=[target], rank=cfg.d_model, scale=1.0, seed=19)
    ad = model.modules[0].lora["wq"]
    rng = np.random.default_rng(20)
    ad.A.data = rng.standard_normal(ad.A.data.shape)
    ad.B.data = rng.standard_normal(ad.B.data.shape)
    adapted = model.forward_dense(toks).data

    plain = Model(cfg, dtype=np.float64, seed=17)
    plain.modules[0].weights["wq"].data += ad.A.data @ ad.B.data
    direct = plain.forward_dense(toks).data
    assert np.abs(adapted - direct).max() <= 1e-10 * np.abs(direct).max()


def test_lora_gradient_reaches_adapters_only():
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float64, seed=21)
    apply_lora(model, rank=2, seed=22)
    model.set_trainable(False, adapters=True)
    toks = np.random.default_rng(23).integers(0, cfg.vocab_size, size=(1, 5))
    loss = T.cross_entropy(model.forward_dense(toks), toks)
    loss.backward()
    assert all(p.grad is None for p in model.base_parameters())
    adapters = model.adapter_parameters()
    assert adapters and any(p.grad is not None and np.abs(p.grad).max() > 0 for p in adapters)


def test_lora_rejects_unknown_target_and_bad_rank():
    model = Model(tiny_config(), seed=24)
    with pytest.raises(ValueError, match="unknown LoRA target"):
        apply_lora(model, targets=["layers.0.attn.bogus"])
    with pytest.raises(ValueError, match="rank"):
        apply_lora(model, targets=["layers.0.attn.wq"], rank=999)


def test_module_param_counts_match_tensors():
    cfg = tiny_config()
    model = Model(cfg, seed=25)
    np.testing.assert_array_equal(model.module_param_counts(), module_param_counts(cfg))
