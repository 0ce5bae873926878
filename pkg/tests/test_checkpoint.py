import numpy as np

from violet.checkpoint import load_model, save_model
from violet.data import bpe_train
from violet.decoder import DecoderModel, GeminiConfig, build_gemini, decoder_forward, train_step
from violet.encoder import Encoder, EncoderConfig, FeatureSet
from violet.numeric import OptimHyper


def _trained(seed=0):
    rng = np.random.default_rng(seed)
    cfg = GeminiConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=20, max_positions=8, mesh_layers=2)
    gem = build_gemini(DecoderModel.init_plain(cfg, rng), cfg, rng)
    enc = Encoder.init(EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_in=4), rng)
    pair = (FeatureSet("a", rng.normal(size=(2, 4))), [1, 5, 6, 2])
    for _ in range(3):
        train_step(gem, enc, [pair], OptimHyper(learning_rate=1e-2))
    return gem, enc, pair


def test_round_trip_bit_exact(tmp_path):
    gem, enc, pair = _trained()
    tok = bpe_train(["a b c"], 12)
    save_model(tmp_path / "m.npz", gem, enc, tok, {"epoch": 3})
    gem2, enc2, tok_d, extra = load_model(tmp_path / "m.npz")
    assert extra == {"epoch": 3} and tok_d == tok.to_dict()
    assert gem2.fusion and gem2.cfg == gem.cfg and enc2.cfg == enc.cfg
    for a, b in ((gem.store, gem2.store), (enc.store, enc2.store)):
        assert list(a) == list(b)
        for name in a:
            ea, eb = a.entries[name], b.entries[name]
            assert ea.frozen == eb.frozen and ea.step == eb.step
            for part in ("value", "m", "v"):
                x, y = getattr(ea, part), getattr(eb, part)
                assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
    stack = enc.forward(pair[0])[0]
    stack2 = enc2.forward(pair[0])[0]
    assert decoder_forward(gem, pair[1], stack).tobytes() == decoder_forward(gem2, pair[1], stack2).tobytes()


def test_resumed_training_matches(tmp_path):
    gem, enc, pair = _trained()
    save_model(tmp_path / "m.npz", gem, enc)
    gem2, enc2, _, _ = load_model(tmp_path / "m.npz")
    h = OptimHyper(learning_rate=1e-2)
    train_step(gem, enc, [pair], h)
    train_step(gem2, enc2, [pair], h)
    for name in gem.store:
        assert gem.store[name].tobytes() == gem2.store[name].tobytes()


def test_files_byte_identical(tmp_path):
    for name in ("a.npz", "b.npz"):
        gem, enc, _ = _trained()
        save_model(tmp_path / name, gem, enc)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_numpy_can_read_values(tmp_path):
    gem, enc, _ = _trained()
    save_model(tmp_path / "m.npz", gem, enc)
    with np.load(tmp_path / "m.npz") as z:
        np.testing.assert_array_equal(z["decoder/head.w/value"], gem.store["head.w"])
