import math

import numpy as np
import pytest

from violet.attention import AttentionParams, cross_attention, self_attention
from violet.decoder import (
    DecoderModel,
    GeminiConfig,
    TrainConfig,
    build_gemini,
    dataset_loss,
    decoder_forward,
    fit,
    fusion_param_count,
    generate_greedy,
    perplexity,
    pretrain_lm_step,
    sequence_loss_and_grads,
    train_step,
)
from violet.encoder import Encoder, EncoderConfig, EncoderStack, FeatureSet
from violet.fusion import GateConfig, MeshParams, fuse_layer
from violet.numeric import OptimHyper, ShapeError, grad_check, layer_norm, sigmoid
from violet.verify import GradCheckDims, full_model_gradcheck

TOY = dict(n_layers=4, d_model=16, n_heads=2, vocab_size=40, max_positions=12, mesh_layers=2)


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def make_models(seed=0, std=0.02, tau=0.3, randomize_new=False, **kw):
    rng = np.random.default_rng(seed)
    cfg = GeminiConfig(**{**TOY, "tau": tau, **kw})
    plain = DecoderModel.init_plain(cfg, rng, std=std)
    gem = build_gemini(plain, cfg, rng)
    if randomize_new:
        for name, e in gem.store.entries.items():
            if ".xattn." in name or ".mesh." in name:
                e.value[...] = rng.normal(0, 0.3, e.value.shape)
    enc = Encoder.init(EncoderConfig(n_layers=cfg.mesh_layers, d_model=cfg.d_model,
                                     n_heads=cfg.n_heads, d_in=6), rng, std=std)
    return plain, gem, enc, rng


# --------------------------------------------------------------------------
# reference compositions built only from module primitives


def _ln(x, s, p):
    return layer_norm(x, s[p + "g"], s[p + "b"])


def _attn(s, p, heads):
    return AttentionParams(s[p + "wq"], s[p + "wk"], s[p + "wv"], s[p + "wo"], heads)


def _ffn(x, s, p):
    return gelu(x @ s[p + "w1"] + s[p + "b1"]) @ s[p + "w2"] + s[p + "b2"]


def reference_logits(model, tokens, enc_layers, fusion_residual=None):
    cfg, s = model.cfg, model.store
    x = s["tok_emb"][tokens] + s["pos_emb"][: len(tokens)]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a, _ = self_attention(_ln(x, s, p + "ln1."), _attn(s, p + "attn.", cfg.n_heads), causal=True)
        if model.is_fusion_layer(i):
            if fusion_residual is not None:
                a = fusion_residual(a, s, p)
            else:
                xs = [cross_attention(a, enc_layers[j], _attn(s, f"{p}xattn.{j}.", cfg.n_heads))
                      for j in range(cfg.mesh_layers)]
                mesh = MeshParams.from_store(s, p + "mesh.", cfg.mesh_layers)
                a = fuse_layer(a, xs, mesh, GateConfig(cfg.tau), a).z
        x = x + a
        x = x + _ffn(_ln(x, s, p + "ln2."), s, p + "ff.")
    return _ln(x, s, "ln_f.") @ s["head.w"] + s["head.b"]


def test_composition_oracle():
    _, gem, enc, rng = make_models(seed=1, std=0.3, randomize_new=True)
    feats = FeatureSet("x", rng.normal(size=(3, 6)))
    tokens = rng.integers(0, 40, 7)
    stack, _ = enc.forward(feats)
    np.testing.assert_allclose(decoder_forward(gem, tokens, stack),
                               reference_logits(gem, tokens, stack.layer_outputs), atol=1e-12)


def test_plain_composition_oracle():
    plain, _, _, rng = make_models(seed=2, std=0.3)
    tokens = rng.integers(0, 40, 6)
    np.testing.assert_allclose(decoder_forward(plain, tokens), reference_logits(plain, tokens, None),
                               atol=1e-12)


def test_converted_model_is_gated_scaled_decoder():
    """Zero cross-attention outputs and tau=0 leave only pi_t- and alpha-scaled self-attention."""
    _, gem, enc, rng = make_models(seed=3, std=0.3, tau=0.0)
    for name, e in gem.store.entries.items():
        if ".mesh." in name:
            e.value[...] = rng.normal(0, 0.5, e.value.shape)
    L = gem.cfg.mesh_layers

    def scaled(a, s, p):
        pi_t = 1.0 - sigmoid(a)
        alpha = sum(sigmoid(np.hstack([a, np.tile(s[f"{p}mesh.{j}.b"], (a.shape[0], 1))])
                            @ s[f"{p}mesh.{j}.w"]) for j in range(L))
        return pi_t * a * alpha / math.sqrt(L)

    tokens = rng.integers(0, 40, 6)
    stack, _ = enc.forward(FeatureSet("x", rng.normal(size=(3, 6))))
    got = decoder_forward(gem, tokens, stack)
    np.testing.assert_allclose(got, reference_logits(gem, tokens, None, fusion_residual=scaled), atol=1e-12)
    # a different image gives the same logits: the visual path is closed at init
    stack2, _ = enc.forward(FeatureSet("y", rng.normal(size=(4, 6))))
    np.testing.assert_allclose(decoder_forward(gem, tokens, stack2), got, atol=1e-13)


# --------------------------------------------------------------------------
# conversion


def test_frozen_census_and_copy():
    plain, gem, _, _ = make_models()
    split = gem.cfg.split_index
    frozen = set(gem.store.frozen_names())
    expected = {"tok_emb", "pos_emb"} | {n for n in gem.store if any(
        n.startswith(f"layers.{i}.") for i in range(split))}
    assert frozen == expected
    for name in plain.store:
        assert gem.store[name].tobytes() == plain.store[name].tobytes()
        assert gem.store[name] is not plain.store[name]
    for i in range(split):
        assert not gem.store.names(f"layers.{i}.xattn")
    for i in range(split, gem.cfg.n_layers):
        assert len([n for n in gem.store.names(f"layers.{i}.xattn.") if n.endswith(".wq")]) == gem.cfg.mesh_layers
        assert np.all(gem.store[f"layers.{i}.xattn.0.wo"] == 0.0)
        assert not gem.store.entries[f"layers.{i}.attn.wq"].frozen


def test_parameter_accounting():
    plain, gem, _, _ = make_models()
    d, L, split = 16, 2, 2
    assert fusion_param_count(gem.cfg) == L * (6 * d * d + d)
    assert gem.num_params() == plain.num_params() + split * fusion_param_count(gem.cfg)
    V, P, ff = 40, 12, 64
    per_layer = 4 * d * d + 4 * d + (d * ff + ff + ff * d + d)
    assert plain.num_params() == V * d + P * d + 4 * per_layer + 2 * d + d * V + V


def test_layer_count_mismatch():
    plain, _, _, rng = make_models()
    with pytest.raises(ShapeError):
        build_gemini(plain, GeminiConfig(**{**TOY, "n_layers": 6}), rng)


def test_config_validation():
    with pytest.raises(ValueError):
        GeminiConfig(n_layers=3)
    with pytest.raises(ValueError):
        GeminiConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# --------------------------------------------------------------------------
# forward properties


def test_causality():
    _, gem, enc, rng = make_models(seed=4, std=0.3, randomize_new=True)
    stack, _ = enc.forward(rng.normal(size=(3, 6)))
    t = rng.integers(0, 40, 6)
    t2 = t.copy()
    t2[1:] = (t2[1:] + 7) % 40
    np.testing.assert_array_equal(decoder_forward(gem, t, stack)[0], decoder_forward(gem, t2, stack)[0])


def test_visual_sensitivity():
    _, gem, enc, rng = make_models(seed=5, std=0.3, randomize_new=True)
    stack, _ = enc.forward(rng.normal(size=(3, 6)))
    t = rng.integers(0, 40, 5)
    base = decoder_forward(gem, t, stack)
    bumped = EncoderStack([o + 0.01 * rng.normal(size=o.shape) for o in stack.layer_outputs])
    assert np.abs(decoder_forward(gem, t, bumped) - base).max() > 1e-6


def test_forward_errors():
    _, gem, enc, rng = make_models()
    stack, _ = enc.forward(rng.normal(size=(3, 6)))
    with pytest.raises(ValueError):
        decoder_forward(gem, np.zeros(13, dtype=int), stack)
    with pytest.raises(ValueError):
        decoder_forward(gem, [0, 40], stack)
    with pytest.raises(ValueError):
        decoder_forward(gem, [0, 1], None)


def test_forward_deterministic():
    _, gem, enc, rng = make_models(seed=6, std=0.3, randomize_new=True)
    stack, _ = enc.forward(rng.normal(size=(3, 6)))
    t = rng.integers(0, 40, 5)
    assert decoder_forward(gem, t, stack).tobytes() == decoder_forward(gem, t, stack).tobytes()


# --------------------------------------------------------------------------
# gradients


def test_plain_decoder_gradients():
    plain, _, _, rng = make_models(seed=7, std=0.3)
    toks = rng.integers(0, 40, 6)

    def f():
        loss, _, g, _, _ = sequence_loss_and_grads(plain, toks)
        return loss, g

    rep = grad_check(f, plain.store, 1e-5, 1e-4, max_entries=6, rng=np.random.default_rng(0))
    assert rep.passed, {k: v for k, v in rep.max_rel_error.items() if v > 1e-4}


def test_full_model_gradients_sampled():
    rep = full_model_gradcheck(GradCheckDims(), seed=0, max_entries=4)
    assert rep["gate_margin"] > 1e-3
    assert rep["passed"], rep["worst"]


def test_frozen_layers_get_no_gradient_entries():
    _, gem, enc, rng = make_models()
    _, _, g, eg, _ = sequence_loss_and_grads(gem, rng.integers(0, 40, 5), enc, rng.normal(size=(3, 6)))
    assert not set(g) & set(gem.store.frozen_names())
    assert set(g) == set(gem.store.names(trainable_only=True))
    assert set(eg) == set(enc.store.names())


# --------------------------------------------------------------------------
# training


def test_uniform_baseline_loss():
    plain, gem, enc, rng = make_models(std=0.02)
    seq = rng.integers(0, 40, 8)
    assert sequence_loss_and_grads(plain, seq)[0] == pytest.approx(math.log(40), abs=0.05)
    loss = train_step(gem, enc, [(FeatureSet("a", rng.normal(size=(3, 6))), seq)], OptimHyper())
    assert loss == pytest.approx(math.log(40), abs=0.05)


def test_pretrain_repeated_token_to_zero():
    plain, _, _, _ = make_models(seed=8)
    hyper = OptimHyper(learning_rate=1e-2)
    batch = [[5] * 8] * 4
    for _ in range(60):
        loss = pretrain_lm_step(plain, batch, hyper)
    assert loss < 1e-2


def test_pretrain_loss_trends_down():
    plain, _, _, rng = make_models(seed=9)
    corpus = [list(rng.integers(4, 12, 8)) for _ in range(10)]
    hyper = OptimHyper(learning_rate=3e-3)
    losses = [pretrain_lm_step(plain, corpus, hyper) for _ in range(50)]
    means = [np.mean(losses[i:i + 10]) for i in range(0, 50, 10)]
    assert all(a > b for a, b in zip(means, means[1:])), means


def test_pretrain_rejects_gemini_and_empty():
    plain, gem, _, _ = make_models()
    with pytest.raises(ValueError):
        pretrain_lm_step(gem, [[1, 2]], OptimHyper())
    with pytest.raises(ValueError):
        pretrain_lm_step(plain, [], OptimHyper())


def test_train_step_keeps_frozen_and_moves_trainable():
    _, gem, enc, rng = make_models(seed=10)
    frozen = {n: gem.store[n].copy() for n in gem.store.frozen_names()}
    trainable = {n: gem.store[n].copy() for n in gem.store.names(trainable_only=True)}
    batch = [(FeatureSet(str(i), rng.normal(size=(3, 6))), rng.integers(0, 40, 6)) for i in range(3)]
    for _ in range(5):
        train_step(gem, enc, batch, OptimHyper(learning_rate=1e-3))
    for n, v in frozen.items():
        assert gem.store[n].tobytes() == v.tobytes()
    assert all(not np.array_equal(gem.store[n], v) for n, v in trainable.items())


def test_train_step_missing_features():
    _, gem, enc, _ = make_models()
    with pytest.raises(KeyError):
        train_step(gem, enc, [(None, [1, 2, 3])], OptimHyper())


def _single_pair():
    _, gem, enc, rng = make_models(seed=11)
    caption = [1, 7, 12, 9, 30, 2]
    pair = (FeatureSet("a", rng.normal(size=(3, 6))), caption)
    return gem, enc, pair, rng


def test_overfit_single_pair_and_generation():
    gem, enc, pair, rng = _single_pair()
    hist = fit(gem, enc, [pair], TrainConfig(learning_rate=5e-3, batch_size=1, max_epochs=150,
                                             early_stop_patience=20), rng)
    assert hist[-1]["val_loss"] < 0.05 or min(h["val_loss"] for h in hist) < 0.05
    out = generate_greedy(gem, pair[0], enc, 10, bos_id=1, eos_id=2)
    assert out == pair[1][1:-1]
    assert generate_greedy(gem, pair[0], enc, 10, 1, 2) == out
    assert len(generate_greedy(gem, pair[0], enc, 1, 1, 2)) <= 1
    with pytest.raises(ValueError):
        generate_greedy(gem, pair[0], enc, 0, 1, 2)


def test_early_stopping_restores_best():
    gem, enc, pair, rng = _single_pair()
    hist = fit(gem, enc, [pair], TrainConfig(learning_rate=0.5, batch_size=1, max_epochs=30,
                                             early_stop_patience=2), rng)
    best = min(h["val_loss"] for h in hist)
    assert len(hist) < 30
    assert dataset_loss(gem, [pair], enc) == pytest.approx(best, rel=1e-12)


# --------------------------------------------------------------------------
# perplexity


def _constant_logit_model(bias):
    plain, _, _, _ = make_models()
    plain.store["head.w"][...] = 0.0
    plain.store["head.b"][...] = bias
    return plain


def test_perplexity_uniform():
    m = _constant_logit_model(0.0)
    assert perplexity(m, [5, 9, 3, 3, 17]) == pytest.approx(40.0, abs=1e-9)


def test_perplexity_certain_model():
    b = np.zeros(40)
    b[3] = 1000.0
    assert perplexity(_constant_logit_model(b), [3, 3, 3, 3]) == 1.0


def test_perplexity_hand_case():
    b = np.zeros(40)
    b[:3] = [2.0, 1.0, -1.0]
    m = _constant_logit_model(b)
    log_z = math.log(math.exp(2) + math.exp(1) + math.exp(-1) + 37)
    nll = [-(1.0 - log_z), -(-1.0 - log_z)]
    assert perplexity(m, [0, 1, 2]) == pytest.approx(math.exp(sum(nll) / 2), rel=1e-12)
    assert perplexity(m, [1, 2], bos_id=0) == pytest.approx(math.exp(sum(nll) / 2), rel=1e-12)
    with pytest.raises(ValueError):
        perplexity(m, [])


def test_perplexity_with_image():
    _, gem, enc, rng = make_models()
    fs = FeatureSet("a", rng.normal(size=(3, 6)))
    p = perplexity(gem, [4, 5, 6], (enc, fs), bos_id=1)
    assert p == pytest.approx(perplexity(gem, [4, 5, 6], enc.forward(fs)[0], bos_id=1))
    assert 20 < p < 80
