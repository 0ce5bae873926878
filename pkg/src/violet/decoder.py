"""Causal decoder language model and its split "Gemini" conversion.

A plain decoder is a stack of pre-norm causal blocks.  ``build_gemini``
keeps the bottom half as-is (frozen, together with the embeddings) and
turns every upper-half layer into a fusion layer::

    h  = LN1(x)
    a  = SelfAttn(h)
    Xj = XAttn(a, S_m_j)            for every encoder layer j
    x1 = x + fuse_layer(a, [Xj], mesh, tau, s_t=a).z
    out = x1 + FFN(LN2(x1))
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import blocks
from .attention import cross_attention_backward, cross_attention_forward, self_attention_forward
from .fusion import GateConfig, MeshParams, fuse_layer, fuse_layer_backward
from .numeric import (
    OptimHyper,
    ParamStore,
    ShapeError,
    adamw_step,
    cross_entropy_backward,
    cross_entropy_forward,
    linear_backward,
)


@dataclass(frozen=True)
class GeminiConfig:
    n_layers: int = 12
    d_model: int = 768
    n_heads: int = 12
    vocab_size: int = 63999
    max_positions: int = 64
    tau: float = 0.3
    mesh_layers: int = 3
    ff_dim: int = 0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError("n_layers must be an even positive integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.max_positions, self.mesh_layers) < 1:
            raise ValueError("vocab_size, max_positions and mesh_layers must be positive")
        GateConfig(self.tau)
        if self.ff_dim == 0:
            object.__setattr__(self, "ff_dim", 4 * self.d_model)

    @property
    def split_index(self):
        return self.n_layers // 2

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 60
    max_epochs: int = 20
    early_stop_patience: int = 5
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0
                and self.early_stop_patience > 0):
            raise ValueError("training hyperparameters must be positive")

    def hyper(self):
        return OptimHyper(learning_rate=self.learning_rate, weight_decay=self.weight_decay)

    def to_dict(self):
        return asdict(self)


class DecoderModel:
    """Parameters and config for either a plain decoder or a Gemini decoder."""

    def __init__(self, cfg, store, fusion=False):
        self.cfg = cfg
        self.store = store
        self.fusion = fusion

    @classmethod
    def init_plain(cls, cfg, rng, std=blocks.INIT_STD):
        d = cfg.d_model
        store = ParamStore()
        store.add("tok_emb", rng.normal(0.0, std, (cfg.vocab_size, d)))
        store.add("pos_emb", rng.normal(0.0, std, (cfg.max_positions, d)))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            blocks.init_layer_norm(store, p + "ln1.", d)
            blocks.init_attention(store, p + "attn.", d, rng, std)
            blocks.init_layer_norm(store, p + "ln2.", d)
            blocks.init_ffn(store, p + "ff.", d, cfg.ff_dim, rng, std)
        blocks.init_layer_norm(store, "ln_f.", d)
        store.add("head.w", rng.normal(0.0, std, (d, cfg.vocab_size)))
        store.add("head.b", np.zeros(cfg.vocab_size))
        return cls(cfg, store, fusion=False)

    def is_fusion_layer(self, i):
        return self.fusion and i >= self.cfg.split_index

    def num_params(self):
        return self.store.num_params()

    def copy(self):
        return DecoderModel(self.cfg, self.store.copy(), self.fusion)


def fusion_param_count(cfg):
    """Parameters added per fusion layer: L cross-attentions plus L mesh gates."""
    d = cfg.d_model
    return cfg.mesh_layers * (4 * d * d + 2 * d * d + d)


def build_gemini(pretrained, cfg, rng):
    if pretrained.fusion:
        raise ValueError("model is already a Gemini decoder")
    n_pre = sum(1 for k in pretrained.store if k.endswith(".ln1.g"))
    if n_pre != cfg.n_layers:
        raise ShapeError(f"pretrained decoder has {n_pre} layers, config says {cfg.n_layers}")
    pc = pretrained.cfg
    if (pc.d_model, pc.n_heads, pc.vocab_size, pc.max_positions, pc.ff_dim) != (
        cfg.d_model, cfg.n_heads, cfg.vocab_size, cfg.max_positions, cfg.ff_dim
    ):
        raise ShapeError("pretrained decoder dimensions do not match the Gemini config")
    store = ParamStore()
    for name, e in pretrained.store.entries.items():
        store.add(name, e.value.copy())
    for name in ("tok_emb", "pos_emb"):
        store.entries[name].frozen = True
    for i in range(cfg.split_index):
        store.set_frozen(f"layers.{i}.")
    d = cfg.d_model
    for i in range(cfg.split_index, cfg.n_layers):
        for j in range(cfg.mesh_layers):
            blocks.init_attention(store, f"layers.{i}.xattn.{j}.", d, rng, zero_output=True)
        for j in range(cfg.mesh_layers):
            store.add(f"layers.{i}.mesh.{j}.w", rng.normal(0.0, blocks.INIT_STD, (2 * d, d)))
            store.add(f"layers.{i}.mesh.{j}.b", np.zeros(d))
    return DecoderModel(cfg, store, fusion=True)


# --------------------------------------------------------------------------
# forward / backward


def _check_tokens(model, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D sequence")
    if tokens.size > model.cfg.max_positions:
        raise ValueError(f"sequence length {tokens.size} exceeds max_positions={model.cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size:
        raise ValueError("token id out of range")
    return tokens


def _fusion_block_forward(x, store, prefix, cfg, enc):
    gate_cfg = GateConfig(cfg.tau)
    L = cfg.mesh_layers
    h, ln1 = blocks.ln_forward(x, store, prefix + "ln1.")
    ap = blocks.attn_params(store, prefix + "attn.", cfg.n_heads)
    a, acache = self_attention_forward(h, ap, causal=True)
    xs, xcaches = [], []
    for j in range(L):
        xp = blocks.attn_params(store, f"{prefix}xattn.{j}.", cfg.n_heads)
        xj, xc = cross_attention_forward(a, enc.layer_outputs[j], xp)
        xs.append(xj)
        xcaches.append(xc)
    mesh = MeshParams.from_store(store, prefix + "mesh.", L)
    fo = fuse_layer(a, xs, mesh, gate_cfg, a)
    x1 = x + fo.z
    h2, ln2 = blocks.ln_forward(x1, store, prefix + "ln2.")
    f, fcache = blocks.ffn_forward(h2, store, prefix + "ff.")
    return x1 + f, (ln1, a, acache, xs, xcaches, fo, ln2, fcache)


def _fusion_block_backward(dout, cache, store, prefix, cfg, grads, d_enc):
    ln1, a, acache, xs, xcaches, fo, ln2, fcache = cache
    L = cfg.mesh_layers
    dh2 = blocks.ffn_backward(dout, fcache, store, prefix + "ff.", grads)
    dx1 = dout + blocks.ln_backward(dh2, ln2, prefix + "ln2.", grads)
    mesh = MeshParams.from_store(store, prefix + "mesh.", L)
    d_self, d_xs, d_st, d_w, d_b = fuse_layer_backward(dx1, fo, a, xs, mesh, a)
    da = d_self + d_st
    for j in range(L):
        grads[f"{prefix}mesh.{j}.w"] = d_w[j]
        grads[f"{prefix}mesh.{j}.b"] = d_b[j]
        xpre = f"{prefix}xattn.{j}."
        xp = blocks.attn_params(store, xpre, cfg.n_heads)
        dq, dkv, g = cross_attention_backward(d_xs[j], xcaches[j], xp)
        for k, v in g.items():
            grads[xpre + k] = v
        da += dq
        d_enc[j] += dkv
    dh = blocks.attn_backward(da, acache, store, prefix + "attn.", cfg.n_heads, grads)
    return dx1 + blocks.ln_backward(dh, ln1, prefix + "ln1.", grads)


def decoder_forward_cached(model, tokens, enc=None):
    cfg, store = model.cfg, model.store
    tokens = _check_tokens(model, tokens)
    if model.fusion:
        if enc is None:
            raise ValueError("a Gemini decoder needs encoder outputs")
        if len(enc) != cfg.mesh_layers:
            raise ShapeError(f"{len(enc)} encoder layers for mesh of {cfg.mesh_layers}")
    t = tokens.size
    x = store["tok_emb"][tokens] + store["pos_emb"][:t]
    caches = []
    for i in range(cfg.n_layers):
        prefix = f"layers.{i}."
        if model.is_fusion_layer(i):
            x, c = _fusion_block_forward(x, store, prefix, cfg, enc)
        else:
            x, c = blocks.plain_block_forward(x, store, prefix, cfg.n_heads, causal=True)
        caches.append(c)
    h, lnf = blocks.ln_forward(x, store, "ln_f.")
    logits = h @ store["head.w"] + store["head.b"]
    return logits, (tokens, caches, lnf, h, enc)


def decoder_forward(model, tokens, enc=None):
    return decoder_forward_cached(model, tokens, enc)[0]


def _lowest_trainable_layer(model):
    s = model.store
    if not (s.entries["tok_emb"].frozen and s.entries["pos_emb"].frozen):
        return -1
    for i in range(model.cfg.n_layers):
        if s.names(f"layers.{i}.", trainable_only=True):
            return i
    return model.cfg.n_layers


def decoder_backward(model, dlogits, cache, full=False):
    """Backpropagate ``dlogits``; returns ``(grads, d_enc_layers)``.

    Unless ``full`` is set, the pass stops below the lowest layer that owns
    a trainable parameter, so frozen tensors receive no gradient entry.
    """
    cfg, store = model.cfg, model.store
    tokens, caches, lnf, h, enc = cache
    grads = {}
    d_enc = [np.zeros_like(o) for o in enc.layer_outputs] if model.fusion else None
    dh, grads["head.w"], grads["head.b"] = linear_backward(dlogits, h, store["head.w"])
    dx = blocks.ln_backward(dh, lnf, "ln_f.", grads)
    stop = -1 if full else _lowest_trainable_layer(model)
    for i in reversed(range(cfg.n_layers)):
        if i < stop:
            break
        prefix = f"layers.{i}."
        if model.is_fusion_layer(i):
            dx = _fusion_block_backward(dx, caches[i], store, prefix, cfg, grads, d_enc)
        else:
            dx = blocks.plain_block_backward(dx, caches[i], store, prefix, cfg.n_heads, grads)
    if stop < 0:
        t = tokens.size
        demb = np.zeros_like(store["tok_emb"])
        np.add.at(demb, tokens, dx)
        grads["tok_emb"] = demb
        dpos = np.zeros_like(store["pos_emb"])
        dpos[:t] = dx
        grads["pos_emb"] = dpos
    if not full:
        grads = {k: v for k, v in grads.items() if not store.entries[k].frozen}
    return grads, d_enc


def gate_margin(model, cache):
    """Smallest |sig(A) - tau| or |1 - sig(A) - tau| over every fusion layer."""
    if not model.fusion:
        return math.inf
    caches = cache[1]
    return min(
        caches[i][5].gates.margin(model.cfg.tau)
        for i in range(model.cfg.split_index, model.cfg.n_layers)
    )


# --------------------------------------------------------------------------
# losses and training


def _split_sequence(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("need at least two tokens for a next-token objective")
    return tokens[:-1], tokens[1:]


def sequence_loss_and_grads(model, tokens, encoder=None, features=None, ignore_id=-100, full=False):
    """Teacher-forced next-token loss for one sequence plus all gradients.

    Returns ``(loss, n_targets, dec_grads, enc_grads, fwd_cache)``.
    """
    inp, tgt = _split_sequence(tokens)
    enc_out = enc_cache = None
    if model.fusion:
        if encoder is None or features is None:
            raise ValueError("Gemini training needs an encoder and features")
        enc_out, enc_cache = encoder.forward(features)
    logits, cache = decoder_forward_cached(model, inp, enc_out)
    loss, ce_cache = cross_entropy_forward(logits, tgt, ignore_id)
    grads, d_enc = decoder_backward(model, cross_entropy_backward(ce_cache), cache, full=full)
    enc_grads = encoder.backward(d_enc, enc_cache) if model.fusion else {}
    return loss, ce_cache[3], grads, enc_grads, cache


def pretrain_lm_step(model, batch, hyper):
    """One optimizer step of causal LM training on a batch of token sequences."""
    if model.fusion:
        raise ValueError("pretraining expects a plain decoder")
    if not batch:
        raise ValueError("empty batch")
    parts = [sequence_loss_and_grads(model, seq) for seq in batch]
    total = sum(p[1] for p in parts)
    loss = 0.0
    for l, n, g, _, _ in parts:
        model.store.accumulate(g, n / total)
        loss += l * n / total
    adamw_step(model.store, hyper)
    return loss


def train_step(model, encoder, batch, hyper):
    """One teacher-forced fusion-training step.

    ``batch`` is a sequence of ``(FeatureSet, tokens)``.  Gradients are
    summed in batch order, weighted by target count.
    """
    if not model.fusion:
        raise ValueError("fusion training expects a Gemini decoder")
    if not batch:
        raise ValueError("empty batch")
    parts = []
    for feats, seq in batch:
        if feats is None:
            raise KeyError("missing features for a training caption")
        parts.append(sequence_loss_and_grads(model, seq, encoder, feats))
    total = sum(p[1] for p in parts)
    loss = 0.0
    for l, n, g, eg, _ in parts:
        w = n / total
        model.store.accumulate(g, w)
        encoder.store.accumulate(eg, w)
        loss += l * w
    adamw_step(model.store, hyper)
    adamw_step(encoder.store, hyper)
    return loss


def dataset_loss(model, pairs, encoder=None):
    """Token-weighted mean teacher-forced loss over ``(features, tokens)`` pairs."""
    tot = n = 0.0
    for feats, seq in pairs:
        inp, tgt = _split_sequence(seq)
        enc = encoder.forward(feats)[0] if model.fusion else None
        loss, cache = cross_entropy_forward(decoder_forward(model, inp, enc), tgt)
        tot += loss * cache[3]
        n += cache[3]
    return tot / n


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(model, sequences, tcfg, rng, epochs=None, log=None):
    hyper = tcfg.hyper()
    history = []
    for epoch in range(epochs or tcfg.max_epochs):
        losses = [pretrain_lm_step(model, [sequences[i] for i in b], hyper)
                  for b in _batches(len(sequences), tcfg.batch_size, rng)]
        history.append(float(np.mean(losses)))
        if log:
            log(epoch, history[-1])
    return history


def fit(model, encoder, train_pairs, tcfg, rng, val_pairs=None, log=None):
    """Fusion training with early stopping on validation loss.

    The training set doubles as the validation set when none is given.  The
    best checkpoint (by validation loss) is restored into ``model`` and
    ``encoder`` before returning the history.
    """
    hyper = tcfg.hyper()
    val_pairs = train_pairs if val_pairs is None else val_pairs
    best = (math.inf, None, None)
    bad_epochs = 0
    history = []
    for epoch in range(tcfg.max_epochs):
        losses = [train_step(model, encoder, [train_pairs[i] for i in b], hyper)
                  for b in _batches(len(train_pairs), tcfg.batch_size, rng)]
        val = dataset_loss(model, val_pairs, encoder)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        if log:
            log(history[-1])
        if val < best[0]:
            best = (val, model.store.copy(), encoder.store.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.early_stop_patience:
                break
    if best[1] is not None:
        model.store = best[1]
        encoder.store = best[2]
    return history


# --------------------------------------------------------------------------
# inference


def generate_greedy(model, features, encoder, max_len, bos_id, eos_id):
    """Greedy decoding from BOS; returns generated ids without BOS.

    ``argmax`` returns the first maximal index, so ties go to the lowest id.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    enc = encoder.forward(features)[0] if model.fusion else None
    seq = [bos_id]
    out = []
    limit = min(max_len, model.cfg.max_positions)
    for _ in range(limit):
        logits = decoder_forward(model, seq, enc)
        nxt = int(np.argmax(logits[-1]))
        if nxt == eos_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def perplexity(model, tokens, enc=None, bos_id=None):
    """``exp`` of the mean next-token negative log-likelihood.

    If ``bos_id`` is given it is prepended, so every token of ``tokens`` is
    scored.  ``enc`` may be an ``EncoderStack`` or ``(encoder, FeatureSet)``.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty sequence")
    if bos_id is not None:
        tokens = [bos_id] + tokens
    inp, tgt = _split_sequence(tokens)
    if isinstance(enc, tuple):
        enc = enc[0].forward(enc[1])[0]
    loss, _ = cross_entropy_forward(decoder_forward(model, inp, enc), tgt)
    return float(math.exp(loss))


# --------------------------------------------------------------------------
# parameter groups


def parameter_group(name):
    """Coarse grouping of decoder parameter names for reporting."""
    if name in ("tok_emb", "pos_emb"):
        return "embeddings"
    if name.startswith("head."):
        return "head"
    if name.startswith("ln_f."):
        return "final_norm"
    parts = name.split(".")
    kind = parts[2]
    return {"xattn": "cross_attention", "mesh": "mesh", "attn": "self_attention",
            "ff": "feed_forward", "ln1": "norms", "ln2": "norms"}[kind]

