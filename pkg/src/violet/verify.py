"""Finite-difference verification of the full captioning model at toy size."""

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderModel, GeminiConfig, build_gemini, gate_margin, sequence_loss_and_grads
from .encoder import Encoder, EncoderConfig, FeatureSet
from .numeric import grad_check


@dataclass(frozen=True)
class GradCheckDims:
    n_layers: int = 4
    d_model: int = 16
    n_heads: int = 2
    mesh_layers: int = 2
    regions: int = 3
    d_in: int = 8
    vocab_size: int = 40
    seq_len: int = 5
    tau: float = 0.3


def random_toy_model(dims, seed, std=0.3):
    """A Gemini decoder, encoder, features and tokens with every weight random.

    Cross-attention output projections are randomised too; at their zero
    init the cross-attention query/key gradients vanish identically.
    """
    rng = np.random.default_rng(seed)
    cfg = GeminiConfig(
        n_layers=dims.n_layers, d_model=dims.d_model, n_heads=dims.n_heads,
        vocab_size=dims.vocab_size, max_positions=dims.seq_len + 1, tau=dims.tau,
        mesh_layers=dims.mesh_layers,
    )
    plain = DecoderModel.init_plain(cfg, rng, std=std)
    for name in ("ln_f.g", "ln_f.b"):
        plain.store[name][...] += rng.normal(0.0, 0.1, plain.store[name].shape)
    model = build_gemini(plain, cfg, rng)
    for name, e in model.store.entries.items():
        if ".xattn." in name or ".mesh." in name:
            e.value[...] = rng.normal(0.0, std, e.value.shape)
    encoder = Encoder.init(
        EncoderConfig(n_layers=dims.mesh_layers, d_model=dims.d_model, n_heads=dims.n_heads,
                      d_in=dims.d_in),
        rng, std=std,
    )
    feats = FeatureSet("toy", rng.normal(size=(dims.regions, dims.d_in)))
    tokens = rng.integers(0, dims.vocab_size, dims.seq_len + 1)
    return model, encoder, feats, tokens


def find_smooth_point(dims, seed=0, min_margin=1e-3, max_tries=200):
    """First seed at or after ``seed`` whose gate inputs all sit ``min_margin`` away
    from the threshold."""
    for s in range(seed, seed + max_tries):
        model, encoder, feats, tokens = random_toy_model(dims, s)
        cache = sequence_loss_and_grads(model, tokens, encoder, feats)[4]
        margin = gate_margin(model, cache)
        if margin > min_margin:
            return s, margin, (model, encoder, feats, tokens)
    raise RuntimeError(f"no seed in [{seed}, {seed + max_tries}) clears gate margin {min_margin}")


def full_model_gradcheck(dims=GradCheckDims(), seed=0, step_h=1e-4, tol=1e-3, max_entries=None):
    """Check every trainable decoder and encoder tensor; returns a report dict.

    The default step is 1e-4 rather than the usual 1e-5: some mesh-weight
    entries have gradients near 1e-8, where the central difference of a
    loss around 4 is dominated by rounding (about ulp(loss) / h).
    """
    used_seed, margin, (model, encoder, feats, tokens) = find_smooth_point(dims, seed)

    def dec_fn():
        loss, _, g, _, _ = sequence_loss_and_grads(model, tokens, encoder, feats)
        return loss, g

    def enc_fn():
        loss, _, _, eg, _ = sequence_loss_and_grads(model, tokens, encoder, feats)
        return loss, eg

    rng = np.random.default_rng(used_seed)
    dec = grad_check(dec_fn, model.store, step_h, tol, max_entries=max_entries, rng=rng)
    enc = grad_check(enc_fn, encoder.store, step_h, tol, max_entries=max_entries, rng=rng)
    return {
        "seed": used_seed,
        "gate_margin": margin,
        "tol": tol,
        "step": step_h,
        "passed": dec.passed and enc.passed,
        "decoder": dec.to_dict(),
        "encoder": enc.to_dict(),
        "worst": max(dec.worst(), enc.worst()),
    }
