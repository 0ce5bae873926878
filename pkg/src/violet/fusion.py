"""Threshold gating of text/vision branches and meshed aggregation over
encoder layers.

For a self-attention output ``A`` and cross-attention outputs ``X_i`` (one
per encoder layer)::

    pi_m = sig(A) * [sig(A) > tau]
    pi_t = (1 - sig(A)) * [1 - sig(A) > tau]
    Z_i  = pi_m * X_i + pi_t * A
    a_i  = sig([S_t | X_i + b_i] @ W_i)
    Z    = sum_i a_i * Z_i / sqrt(L)

All products are elementwise.  The indicator is held constant in the
backward pass, so gated-off elements carry no gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from .numeric import ShapeError, concat_features, sigmoid


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.3

    def __post_init__(self):
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")


@dataclass
class GateMasks:
    pi_m: np.ndarray
    pi_t: np.ndarray
    sig: np.ndarray
    keep_m: np.ndarray
    keep_t: np.ndarray

    def zero_fraction(self):
        total = self.pi_m.size + self.pi_t.size
        return (np.count_nonzero(self.pi_m == 0.0) + np.count_nonzero(self.pi_t == 0.0)) / total

    def margin(self, tau):
        """Smallest distance of any gate input from its threshold."""
        return float(min(np.abs(self.sig - tau).min(), np.abs(1.0 - self.sig - tau).min()))


@dataclass
class MeshParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("mesh weights and biases differ in length")
        for w, b in zip(self.weights, self.biases):
            d = b.shape[0]
            if w.shape != (2 * d, d):
                raise ShapeError(f"mesh weight {w.shape} does not match bias dim {d}")

    def __len__(self):
        return len(self.weights)

    @classmethod
    def from_store(cls, store, prefix, n_layers):
        return cls(
            [store[f"{prefix}{i}.w"] for i in range(n_layers)],
            [store[f"{prefix}{i}.b"] for i in range(n_layers)],
        )


@dataclass
class FusionOutput:
    z: np.ndarray
    z_layers: list
    alphas: list
    gates: GateMasks = field(repr=False, default=None)


def srau_gates(attn_out, cfg):
    sig = sigmoid(attn_out)
    comp = 1.0 - sig
    keep_m = sig > cfg.tau
    keep_t = comp > cfg.tau
    pi_m = np.where(keep_m, sig, 0.0)
    pi_t = np.where(keep_t, comp, 0.0)
    return GateMasks(pi_m=pi_m, pi_t=pi_t, sig=sig, keep_m=keep_m, keep_t=keep_t)


def mesh_alpha(s_t, xattn, w, b):
    if s_t.shape != xattn.shape:
        raise ShapeError(f"token states {s_t.shape} vs cross-attention {xattn.shape}")
    cat = concat_features(s_t, xattn + b)
    if cat.shape[1] != w.shape[0]:
        raise ShapeError(f"concatenation width {cat.shape[1]} vs mesh weight {w.shape}")
    return sigmoid(cat @ w)


def fuse_layer(self_out, xattn_list, mesh, cfg, s_t):
    L = len(xattn_list)
    if L == 0 or L != len(mesh):
        raise ShapeError(f"{L} cross-attention branches for {len(mesh)} mesh entries")
    for x in xattn_list:
        if x.shape != self_out.shape:
            raise ShapeError(f"branch shape {x.shape} vs self-attention {self_out.shape}")
    gates = srau_gates(self_out, cfg)
    text_part = gates.pi_t * self_out
    z_layers, alphas = [], []
    z = np.zeros_like(self_out)
    for x, w, b in zip(xattn_list, mesh.weights, mesh.biases):
        zi = gates.pi_m * x + text_part
        ai = mesh_alpha(s_t, x, w, b)
        z_layers.append(zi)
        alphas.append(ai)
        z += ai * zi
    z /= np.sqrt(L)
    return FusionOutput(z=z, z_layers=z_layers, alphas=alphas, gates=gates)


def fuse_layer_backward(dz, fo, self_out, xattn_list, mesh, s_t):
    """Returns ``(d_self_out, d_xattn_list, d_s_t, d_weights, d_biases)``."""
    L = len(xattn_list)
    c = 1.0 / np.sqrt(L)
    g = fo.gates
    d_self = np.zeros_like(self_out)
    d_st = np.zeros_like(s_t)
    d_pim = np.zeros_like(self_out)
    d_pit = np.zeros_like(self_out)
    d_x, d_w, d_b = [], [], []
    for x, w, b, zi, ai in zip(xattn_list, mesh.weights, mesh.biases, fo.z_layers, fo.alphas):
        d_zi = c * dz * ai
        d_ai = c * dz * zi
        dx = d_zi * g.pi_m
        d_self += d_zi * g.pi_t
        d_pim += d_zi * x
        d_pit += d_zi * self_out
        du = d_ai * ai * (1.0 - ai)
        d = s_t.shape[1]
        d_w.append(concat_features(s_t, x + b).T @ du)
        d_st += du @ w[:d].T
        dy = du @ w[d:].T
        dx = dx + dy
        d_b.append(dy.sum(axis=0))
        d_x.append(dx)
    dsig = g.sig * (1.0 - g.sig)
    d_self += np.where(g.keep_m, d_pim, 0.0) * dsig
    d_self -= np.where(g.keep_t, d_pit, 0.0) * dsig
    return d_self, d_x, d_st, d_w, d_b
