"""Parameter initialisation and pre-norm transformer sublayers shared by the
encoder and decoder.  Parameters live in a ``ParamStore`` under dotted
prefixes; backward functions return gradients keyed by full name.
"""

import numpy as np

from .attention import AttentionParams, self_attention_backward, self_attention_forward
from .numeric import (
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
)

INIT_STD = 0.02
LN_EPS = 1e-5


def init_layer_norm(store, prefix, d, frozen=False):
    store.add(prefix + "g", np.ones(d), frozen)
    store.add(prefix + "b", np.zeros(d), frozen)


def init_attention(store, prefix, d_model, rng, std=INIT_STD, zero_output=False, frozen=False):
    for name in ("wq", "wk", "wv"):
        store.add(prefix + name, rng.normal(0.0, std, (d_model, d_model)), frozen)
    wo = np.zeros((d_model, d_model)) if zero_output else rng.normal(0.0, std, (d_model, d_model))
    store.add(prefix + "wo", wo, frozen)


def init_ffn(store, prefix, d_model, ff_dim, rng, std=INIT_STD, frozen=False):
    store.add(prefix + "w1", rng.normal(0.0, std, (d_model, ff_dim)), frozen)
    store.add(prefix + "b1", np.zeros(ff_dim), frozen)
    store.add(prefix + "w2", rng.normal(0.0, std, (ff_dim, d_model)), frozen)
    store.add(prefix + "b2", np.zeros(d_model), frozen)


def ln_forward(x, store, prefix):
    return layer_norm_forward(x, store[prefix + "g"], store[prefix + "b"], LN_EPS)


def ln_backward(dy, cache, prefix, grads):
    dx, dg, db = layer_norm_backward(dy, cache)
    grads[prefix + "g"] = dg
    grads[prefix + "b"] = db
    return dx


def ffn_forward(x, store, prefix):
    w1, b1, w2, b2 = (store[prefix + k] for k in ("w1", "b1", "w2", "b2"))
    pre = x @ w1 + b1
    act, gcache = gelu_forward(pre)
    return act @ w2 + b2, (x, act, gcache)


def ffn_backward(dy, cache, store, prefix, grads):
    x, act, gcache = cache
    dact, grads[prefix + "w2"], grads[prefix + "b2"] = linear_backward(dy, act, store[prefix + "w2"])
    dpre = gelu_backward(dact, gcache)
    dx, grads[prefix + "w1"], grads[prefix + "b1"] = linear_backward(dpre, x, store[prefix + "w1"])
    return dx


def attn_params(store, prefix, n_heads):
    return AttentionParams.from_store(store, prefix, n_heads)


def attn_backward(dy, cache, store, prefix, n_heads, grads):
    p = attn_params(store, prefix, n_heads)
    dx, g = self_attention_backward(dy, cache, p)
    for k, v in g.items():
        grads[prefix + k] = v
    return dx


def plain_block_forward(x, store, prefix, n_heads, causal):
    """``x + Attn(LN1 x)`` followed by ``+ FFN(LN2 .)``."""
    h, ln1 = ln_forward(x, store, prefix + "ln1.")
    a, acache = self_attention_forward(h, attn_params(store, prefix + "attn.", n_heads), causal)
    x1 = x + a
    h2, ln2 = ln_forward(x1, store, prefix + "ln2.")
    f, fcache = ffn_forward(h2, store, prefix + "ff.")
    return x1 + f, (ln1, acache, ln2, fcache)


def plain_block_backward(dout, cache, store, prefix, n_heads, grads):
    ln1, acache, ln2, fcache = cache
    dh2 = ffn_backward(dout, fcache, store, prefix + "ff.", grads)
    dx1 = dout + ln_backward(dh2, ln2, prefix + "ln2.", grads)
    dh = attn_backward(dx1, acache, store, prefix + "attn.", n_heads, grads)
    return dx1 + ln_backward(dh, ln1, prefix + "ln1.", grads)
