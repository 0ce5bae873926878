"""Region-feature projection and an L-layer pre-norm transformer encoder
that exposes every layer's output for the meshed decoder connection."""

from dataclasses import asdict, dataclass

import numpy as np

from . import blocks
from .numeric import ParamStore, ShapeError


@dataclass
class FeatureSet:
    image_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"features for {self.image_id!r} must be K x D with K >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"non-finite feature values for {self.image_id!r}")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 3
    d_model: int = 768
    n_heads: int = 12
    ff_dim: int = 0
    d_in: int = 2048

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_in) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ff_dim == 0:
            object.__setattr__(self, "ff_dim", 4 * self.d_model)

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderStack:
    layer_outputs: list

    def __len__(self):
        return len(self.layer_outputs)


class Encoder:
    def __init__(self, cfg, store):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg, rng, std=blocks.INIT_STD):
        store = ParamStore()
        store.add("proj.w", rng.normal(0.0, std, (cfg.d_in, cfg.d_model)))
        store.add("proj.b", np.zeros(cfg.d_model))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            blocks.init_layer_norm(store, p + "ln1.", cfg.d_model)
            blocks.init_attention(store, p + "attn.", cfg.d_model, rng, std)
            blocks.init_layer_norm(store, p + "ln2.", cfg.d_model)
            blocks.init_ffn(store, p + "ff.", cfg.d_model, cfg.ff_dim, rng, std)
        return cls(cfg, store)

    def forward(self, features):
        f = features.features if isinstance(features, FeatureSet) else features
        s0 = project_features(f, self.store["proj.w"], self.store["proj.b"])
        stack, caches = encoder_forward_cached(s0, self.cfg, self.store)
        return stack, (f, caches)

    def backward(self, d_layers, cache):
        """Gradients of all encoder parameters given per-layer output gradients."""
        f, caches = cache
        grads = {}
        ds = np.zeros_like(d_layers[-1])
        for i in reversed(range(self.cfg.n_layers)):
            ds = ds + d_layers[i]
            ds = blocks.plain_block_backward(
                ds, caches[i], self.store, f"layers.{i}.", self.cfg.n_heads, grads
            )
        grads["proj.w"] = f.T @ ds
        grads["proj.b"] = ds.sum(axis=0)
        return grads


def project_features(f, w_p, b_p):
    f = f.features if isinstance(f, FeatureSet) else np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != w_p.shape[0] or b_p.shape != (w_p.shape[1],):
        raise ShapeError(f"features {f.shape} vs projection {w_p.shape} / {b_p.shape}")
    return f @ w_p + b_p


def encoder_forward_cached(s0, cfg, store):
    if s0.ndim != 2 or s0.shape[1] != cfg.d_model:
        raise ShapeError(f"encoder input {s0.shape} vs d_model={cfg.d_model}")
    outs, caches = [], []
    x = s0
    for i in range(cfg.n_layers):
        x, c = blocks.plain_block_forward(x, store, f"layers.{i}.", cfg.n_heads, causal=False)
        outs.append(x)
        caches.append(c)
    return EncoderStack(outs), caches


def encoder_forward(s0, cfg, store):
    return encoder_forward_cached(s0, cfg, store)[0]
