import math

import numpy as np
import pytest

from violet.attention import (
    AttentionParams,
    attention_backward,
    attention_forward,
    cross_attention,
    self_attention,
)
from violet.numeric import ParamStore, ShapeError, grad_check


def random_params(rng, d_model=4, n_heads=2, scale=0.5):
    w = lambda: rng.normal(0, scale, (d_model, d_model))  # noqa: E731
    return AttentionParams(w(), w(), w(), w(), n_heads)


def scalar_attention(queries, keys, values, dk):
    """Brute-force single-head attention on python lists."""
    out = []
    for q in queries:
        logits = [sum(a * b for a, b in zip(q, k)) / math.sqrt(dk) for k in keys]
        m = max(logits)
        ws = [math.exp(l - m) for l in logits]
        z = sum(ws)
        out.append([sum(w / z * v[j] for w, v in zip(ws, values)) for j in range(len(values[0]))])
    return out


def rows_times(m, w):
    return [[sum(r[k] * w[k][j] for k in range(len(w))) for j in range(len(w[0]))] for r in m]


def test_single_token_is_value_path():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    s = rng.normal(size=(1, 4))
    out, _ = self_attention(s, p, causal=True)
    np.testing.assert_allclose(out, s @ p.wv @ p.wo, atol=1e-14)


def test_causal_row_zero_ignores_future():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    s = rng.normal(size=(5, 4))
    s2 = s.copy()
    s2[1:] = rng.normal(size=(4, 4))
    a, _ = self_attention(s, p, causal=True)
    b, _ = self_attention(s2, p, causal=True)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.allclose(a[1:], b[1:])


def test_self_attention_hand_case():
    wq = [[1.0, 0.0], [0.5, 1.0]]
    wk = [[0.0, 1.0], [1.0, -1.0]]
    wv = [[2.0, 0.0], [1.0, 1.0]]
    wo = [[1.0, -1.0], [0.5, 2.0]]
    s = [[1.0, 2.0], [-1.0, 0.5]]
    q, k, v = rows_times(s, wq), rows_times(s, wk), rows_times(s, wv)
    for causal in (False, True):
        rows = []
        for i in range(2):
            lim = i + 1 if causal else 2
            rows.append(scalar_attention([q[i]], k[:lim], v[:lim], 2)[0])
        expected = rows_times(rows, wo)
        p = AttentionParams(*(np.array(m) for m in (wq, wk, wv, wo)), n_heads=1)
        out, pre = self_attention(np.array(s), p, causal=causal)
        np.testing.assert_allclose(out, expected, atol=1e-14)
        np.testing.assert_allclose(pre, rows, atol=1e-14)


def test_cross_attention_single_region():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    st, sm = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    out = cross_attention(st, sm, p)
    np.testing.assert_allclose(out, np.tile(sm @ p.wv @ p.wo, (3, 1)), atol=1e-14)


def test_cross_attention_hand_case():
    wq = [[1.0, 2.0], [0.0, 1.0]]
    wk = [[1.0, 0.0], [-1.0, 1.0]]
    wv = [[0.5, 1.0], [1.0, 0.0]]
    wo = [[1.0, 0.0], [0.0, 1.0]]
    st = [[0.5, -1.0]]
    sm = [[1.0, 1.0], [2.0, -1.0]]
    expected = scalar_attention(rows_times(st, wq), rows_times(sm, wk), rows_times(sm, wv), 2)
    p = AttentionParams(*(np.array(m) for m in (wq, wk, wv, wo)), n_heads=1)
    np.testing.assert_allclose(cross_attention(np.array(st), np.array(sm), p), expected, atol=1e-14)


def test_cross_attention_duplication_and_permutation_invariance():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    st, sm = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    base = cross_attention(st, sm, p)
    np.testing.assert_allclose(cross_attention(st, np.vstack([sm, sm]), p), base, atol=1e-14)
    perm = rng.permutation(5)
    np.testing.assert_allclose(cross_attention(st, sm[perm], p), base, atol=1e-14)


def test_dk_denominator_is_live():
    rng = np.random.default_rng(4)
    p = random_params(rng, n_heads=1)
    st, sm = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    p2 = AttentionParams(p.wq, p.wk, p.wv, p.wo, 1, d_k=2 * p.d_k)
    p3 = AttentionParams(p.wq / math.sqrt(2), p.wk, p.wv, p.wo, 1)
    got = cross_attention(st, sm, p2)
    np.testing.assert_allclose(got, cross_attention(st, sm, p3), atol=1e-14)
    assert not np.allclose(got, cross_attention(st, sm, p))


def test_shape_errors():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    with pytest.raises(ShapeError):
        cross_attention(np.ones((2, 3)), np.ones((2, 4)), p)
    with pytest.raises(ShapeError):
        AttentionParams(np.ones((4, 4)), np.ones((4, 4)), np.ones((4, 4)), np.ones((4, 4)), 3)


@pytest.mark.parametrize("causal,cross", [(True, False), (False, False), (False, True)])
def test_attention_gradients(causal, cross):
    rng = np.random.default_rng(6)
    s = ParamStore()
    for k in ("wq", "wk", "wv", "wo"):
        s.add(k, rng.normal(0, 0.7, (4, 4)))
    s.add("q_src", rng.normal(size=(3, 4)))
    s.add("kv_src", rng.normal(size=(4 if cross else 3, 4)))
    w = rng.normal(size=(3, 4))

    def f():
        p = AttentionParams(s["wq"], s["wk"], s["wv"], s["wo"], 2)
        kv = s["kv_src"] if cross else s["q_src"]
        out, _, cache = attention_forward(s["q_src"], kv, p, causal=causal)
        dq, dkv, g = attention_backward(w, cache, p)
        if cross:
            g["q_src"], g["kv_src"] = dq, dkv
        else:
            g["q_src"], g["kv_src"] = dq + dkv, np.zeros_like(s["kv_src"])
        return float((out * w).sum()), g

    rep = grad_check(f, s, 1e-6, 1e-4)
    assert rep.passed, rep.max_rel_error
