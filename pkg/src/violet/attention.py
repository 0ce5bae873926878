"""Multi-head self- and cross-attention with analytic backward passes."""

from dataclasses import dataclass

import numpy as np

from .numeric import ShapeError, softmax_rows, softmax_rows_backward


@dataclass
class AttentionParams:
    """Per-head projections stored column-stacked.

    ``wq[:, h*d_head:(h+1)*d_head]`` is head ``h``'s query matrix, and the
    same for ``wk`` and ``wv``.  ``d_k`` is the scaling denominator and
    defaults to ``d_head``.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int
    d_k: float = None

    def __post_init__(self):
        d_model, width = self.wq.shape
        if width % self.n_heads:
            raise ShapeError(f"projection width {width} not divisible by {self.n_heads} heads")
        if self.wk.shape != self.wq.shape or self.wv.shape != self.wq.shape:
            raise ShapeError("wq, wk, wv must share one shape")
        if self.wo.shape != (width, d_model):
            raise ShapeError(f"wo has shape {self.wo.shape}, expected {(width, d_model)}")
        if self.d_k is None:
            self.d_k = width // self.n_heads

    @property
    def d_head(self):
        return self.wq.shape[1] // self.n_heads

    @classmethod
    def from_store(cls, store, prefix, n_heads, d_k=None):
        return cls(
            store[prefix + "wq"], store[prefix + "wk"], store[prefix + "wv"], store[prefix + "wo"],
            n_heads, d_k,
        )


def _split_heads(x, n_heads):
    t, w = x.shape
    return x.reshape(t, n_heads, w // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def attention_forward(q_src, kv_src, p, causal=False):
    """Generic attention: queries from ``q_src``, keys/values from ``kv_src``.

    Returns ``(out, preproj, cache)`` where ``preproj`` is the concatenated
    head output before ``wo``.
    """
    d_model = p.wq.shape[0]
    if q_src.ndim != 2 or q_src.shape[1] != d_model:
        raise ShapeError(f"query source {q_src.shape} does not match d_model={d_model}")
    if kv_src.ndim != 2 or kv_src.shape[1] != d_model:
        raise ShapeError(f"key/value source {kv_src.shape} does not match d_model={d_model}")
    t, k = q_src.shape[0], kv_src.shape[0]
    if causal and t != k:
        raise ShapeError("causal attention needs equal query and key lengths")
    h = p.n_heads
    scale = 1.0 / np.sqrt(p.d_k)
    qh = _split_heads(q_src @ p.wq, h)
    kh = _split_heads(kv_src @ p.wk, h)
    vh = _split_heads(kv_src @ p.wv, h)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if causal:
        scores = np.where(np.triu(np.ones((t, k), dtype=bool), 1), -np.inf, scores)
    probs = softmax_rows(scores.reshape(h * t, k)).reshape(h, t, k)
    oh = np.matmul(probs, vh)
    preproj = _merge_heads(oh)
    out = preproj @ p.wo
    cache = (q_src, kv_src, qh, kh, vh, probs, preproj, scale)
    return out, preproj, cache


def attention_backward(dout, cache, p):
    """Returns ``(dq_src, dkv_src, grads)`` with grads keyed wq/wk/wv/wo."""
    q_src, kv_src, qh, kh, vh, probs, preproj, scale = cache
    h = p.n_heads
    dwo = preproj.T @ dout
    doh = _split_heads(dout @ p.wo.T, h)
    dprobs = np.matmul(doh, vh.transpose(0, 2, 1))
    dvh = np.matmul(probs.transpose(0, 2, 1), doh)
    dscores = softmax_rows_backward(probs, dprobs) * scale
    dqh = np.matmul(dscores, kh)
    dkh = np.matmul(dscores.transpose(0, 2, 1), qh)
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    grads = {
        "wq": q_src.T @ dq,
        "wk": kv_src.T @ dk,
        "wv": kv_src.T @ dv,
        "wo": dwo,
    }
    dq_src = dq @ p.wq.T
    dkv_src = dk @ p.wk.T + dv @ p.wv.T
    return dq_src, dkv_src, grads


def self_attention(s, p, causal=True):
    """Multi-head self-attention over token states ``s`` (T x d_model).

    Returns ``(out, attn_out_preproj)``.  ``out`` is projected by ``wo``.
    """
    out, preproj, _ = attention_forward(s, s, p, causal=causal)
    return out, preproj


def self_attention_forward(s, p, causal=True):
    out, _, cache = attention_forward(s, s, p, causal=causal)
    return out, cache


def self_attention_backward(dout, cache, p):
    dq, dkv, grads = attention_backward(dout, cache, p)
    return dq + dkv, grads


def cross_attention(s_t, s_m, p):
    """Queries from token states ``s_t``, keys and values from visual states ``s_m``."""
    return attention_forward(s_t, s_m, p, causal=False)[0]


def cross_attention_forward(s_t, s_m, p):
    out, _, cache = attention_forward(s_t, s_m, p, causal=False)
    return out, cache


def cross_attention_backward(dout, cache, p):
    return attention_backward(dout, cache, p)
