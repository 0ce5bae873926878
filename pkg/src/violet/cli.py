"""Batch entry point: ``violet <subcommand> --config run.toml``.

Subcommands write their artifacts under ``paths.out`` (or ``--out``):

    synth      toy corpus, captions, features and embeddings fixtures
    pretrain   BPE tokenizer + plain decoder LM     -> tokenizer.json, pretrained.npz
    convert    Gemini decoder + fresh encoder        -> gemini.npz
    train      fusion training with early stopping   -> trained.npz, train_log.json
    generate   greedy captions for a features file   -> generated.jsonl
    evaluate   BLEU / ROUGE-L / CIDEr                -> eval_report.json
    filter     embedding-similarity filter           -> filter_report.json, kept.jsonl, rejected.jsonl
    gradcheck  finite-difference verification suite  -> gradcheck_report.json

Exit status is 0 on success, 1 when a stage fails and 2 for configuration
errors.  Errors are printed to stderr as a single JSON object.
"""

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import checkpoint, data, metrics, synthetic
from .decoder import (
    DecoderModel,
    GeminiConfig,
    TrainConfig,
    build_gemini,
    dataset_loss,
    fit,
    generate_greedy,
    pretrain,
)
from .encoder import Encoder, EncoderConfig
from .verify import GradCheckDims, full_model_gradcheck

log = logging.getLogger("violet")

SUBCOMMANDS = ("synth", "pretrain", "convert", "train", "generate", "evaluate", "filter", "gradcheck")
PATH_KEYS = ("corpus", "captions", "features", "embeddings", "candidates", "references",
             "val_captions", "checkpoint")
STAGE_SALT = {name: i for i, name in enumerate(SUBCOMMANDS)}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out: Path = Path("runs/default")
    paths: dict = field(default_factory=dict)
    vocab_size: int = 64
    decoder: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: dict = field(default_factory=dict)
    max_len: int = 20
    threshold: float = 0.6
    gradcheck: dict = field(default_factory=dict)

    def path(self, key, required=True):
        p = self.paths.get(key)
        if p is None and required:
            raise ConfigError(f"paths.{key} is not set")
        return None if p is None else Path(p)

    def rng(self, stage):
        return np.random.default_rng([self.seed, STAGE_SALT[stage]])

    def encoder_config(self, d_in):
        kw = {"d_model": self.decoder.get("d_model", 32), "n_heads": self.decoder.get("n_heads", 2)}
        kw.update(self.encoder)
        kw["d_in"] = d_in
        return EncoderConfig(**kw)

    def gemini_config(self, vocab_size):
        kw = dict(self.decoder)
        kw.setdefault("mesh_layers", self.encoder.get("n_layers", 3))
        kw["vocab_size"] = vocab_size
        return GeminiConfig(**kw)


def _section(doc, name):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _only(sec, allowed, name):
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")


def _train_config(sec, name):
    _only(sec, [f.name for f in fields(TrainConfig)], name)
    try:
        return TrainConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def load_config(path, overrides):
    """Parse and fully validate a TOML run config; raises ``ConfigError``."""
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    _only(doc, ["seed", "threads", "paths", "tokenizer", "decoder", "encoder", "pretrain", "train",
                "synth", "generate", "filter", "gradcheck"], "top level")
    paths = _section(doc, "paths")
    _only(paths, PATH_KEYS + ("out",), "paths")
    # config-file paths are relative to the config file, CLI overrides to the cwd
    base = Path(path).parent if path is not None else Path(".")
    paths = {k: str(base / v) for k, v in paths.items()}
    cfg = RunConfig(
        seed=doc.get("seed", 0),
        threads=doc.get("threads", 1),
        out=Path(paths.pop("out", "runs/default")),
        paths=paths,
        decoder=_section(doc, "decoder"),
        encoder=_section(doc, "encoder"),
        pretrain=_train_config(_section(doc, "pretrain"), "pretrain"),
        train=_train_config(_section(doc, "train"), "train"),
        synth=_section(doc, "synth"),
        gradcheck=_section(doc, "gradcheck"),
    )
    tok = _section(doc, "tokenizer")
    _only(tok, ["vocab_size"], "tokenizer")
    cfg.vocab_size = tok.get("vocab_size", cfg.vocab_size)
    gen = _section(doc, "generate")
    _only(gen, ["max_len"], "generate")
    cfg.max_len = gen.get("max_len", cfg.max_len)
    flt = _section(doc, "filter")
    _only(flt, ["threshold"], "filter")
    cfg.threshold = flt.get("threshold", cfg.threshold)
    _only(cfg.synth, ["corpus_size", "pairs", "d_in", "noise"], "synth")
    _only(cfg.gradcheck, [f.name for f in fields(GradCheckDims)] + ["step", "tol", "max_entries", "seed"],
          "gradcheck")

    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = value
        elif key == "threads":
            cfg.threads = value
        elif key == "out":
            cfg.out = Path(value)
        else:
            cfg.paths[key] = value

    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    if not isinstance(cfg.max_len, int) or cfg.max_len < 1:
        raise ConfigError("generate.max_len must be a positive integer")
    if not isinstance(cfg.threshold, (int, float)) or not -1.0 <= cfg.threshold <= 1.0:
        raise ConfigError("filter.threshold must lie in [-1, 1]")
    _only(cfg.decoder, [f.name for f in fields(GeminiConfig) if f.name != "vocab_size"], "decoder")
    _only(cfg.encoder, [f.name for f in fields(EncoderConfig) if f.name != "d_in"], "encoder")
    try:
        cfg.gemini_config(vocab_size=max(cfg.vocab_size, 1))
        cfg.encoder_config(d_in=1)
        GradCheckDims(**{k: v for k, v in cfg.gradcheck.items()
                         if k not in ("step", "tol", "max_entries", "seed")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# --------------------------------------------------------------------------
# helpers


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return Path(path)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=1)
        fh.write("\n")


def _read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        lines = [data.normalize_text(line) for line in fh]
    return [s for s in lines if s]


def _caption_ids(tok, text):
    return [tok.bos_id] + tok.encode(data.normalize_text(text)) + [tok.eos_id]


def _pairs(tok, records, feats):
    pairs = []
    for rec in records:
        fs = feats.get(rec.image_id)
        if fs is None:
            raise StageError(f"missing features for image {rec.image_id!r}")
        pairs.append((fs, _caption_ids(tok, rec.caption)))
    return pairs


def _checkpoint_path(cfg, default_name):
    p = cfg.path("checkpoint", required=False)
    return p if p is not None else cfg.out / default_name


# --------------------------------------------------------------------------
# stages;  every stage validates its inputs first, then returns a callable
# that performs the side effects.


def stage_synth(cfg):
    corpus_p = cfg.path("corpus")
    captions_p = cfg.path("captions")
    features_p = cfg.path("features")
    emb_p = cfg.path("embeddings", required=False)
    n_corpus = cfg.synth.get("corpus_size", 200)
    n_pairs = cfg.synth.get("pairs", 32)
    d_in = cfg.synth.get("d_in", 16)
    noise = cfg.synth.get("noise", 0.1)
    if n_pairs > len(synthetic.scenes()):
        raise ConfigError(f"synth.pairs must be <= {len(synthetic.scenes())}")

    def run():
        rng = cfg.rng("synth")
        corpus = synthetic.make_corpus(n_corpus, rng)
        feats, recs = synthetic.make_pairs(n_pairs, rng, d_in=d_in, noise=noise)
        if emb_p is not None:
            for rec in recs:
                rec.embedding_id = rec.image_id
        for p in (corpus_p, captions_p, features_p, emb_p):
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
        corpus_p.write_text("".join(s + "\n" for s in corpus), encoding="utf-8")
        data.write_jsonl(captions_p, [r.to_dict() for r in recs])
        data.write_jsonl(features_p, data.feature_rows(feats))
        if emb_p is not None:
            rows = []
            for k, rec in enumerate(recs):
                u = rng.normal(size=8)
                noise_v = rng.normal(size=8)
                v = u + (0.2 if k % 4 else 3.0) * noise_v
                rows.append({"embedding_id": rec.image_id, "source_vector": u.tolist(),
                             "translation_vector": v.tolist()})
            data.write_jsonl(emb_p, rows)
        return {"corpus": len(corpus), "pairs": len(recs)}

    return run


def stage_pretrain(cfg):
    corpus_p = _need_file(cfg.path("corpus"), "corpus")

    def run():
        corpus = _read_corpus(corpus_p)
        if not corpus:
            raise StageError("corpus is empty after normalization")
        extra = []
        cap_p = cfg.path("captions", required=False)
        if cap_p is not None and cap_p.is_file():
            extra = [data.normalize_text(r.caption) for r in data.load_captions(cap_p)]
        tok = data.bpe_train(corpus + extra, cfg.vocab_size)
        rng = cfg.rng("pretrain")
        gcfg = cfg.gemini_config(tok.vocab_size)
        seqs = [_caption_ids(tok, s) for s in corpus]
        too_long = [s for s in seqs if len(s) - 1 > gcfg.max_positions]
        if too_long:
            raise StageError(f"{len(too_long)} corpus sentences exceed max_positions")
        model = DecoderModel.init_plain(gcfg, rng)
        history = pretrain(model, seqs, cfg.pretrain, rng,
                           log=lambda e, l: log.info("pretrain epoch %d loss %.4f", e, l))
        cfg.out.mkdir(parents=True, exist_ok=True)
        tok.save(cfg.out / "tokenizer.json")
        checkpoint.save_model(cfg.out / "pretrained.npz", model, tokenizer=tok,
                              extra={"stage": "pretrain"})
        _write_json(cfg.out / "pretrain_log.json", {"loss": history})
        return {"vocab_size": tok.vocab_size, "final_loss": history[-1]}

    return run


def stage_convert(cfg):
    src = _need_file(_checkpoint_path(cfg, "pretrained.npz"), "pretrained checkpoint")
    features_p = _need_file(cfg.path("features"), "features")

    def run():
        plain, _, tok_d, _ = checkpoint.load_model(src)
        if plain.fusion:
            raise StageError("checkpoint already holds a Gemini decoder")
        feats = data.load_features(features_p)
        d_in = next(iter(feats.values())).features.shape[1]
        gcfg = cfg.gemini_config(plain.cfg.vocab_size)
        ecfg = cfg.encoder_config(d_in)
        if ecfg.n_layers != gcfg.mesh_layers:
            raise StageError("encoder.n_layers must equal decoder.mesh_layers")
        rng = cfg.rng("convert")
        model = build_gemini(plain, gcfg, rng)
        encoder = Encoder.init(ecfg, rng)
        tok = data.BpeTokenizer.from_dict(tok_d)
        cfg.out.mkdir(parents=True, exist_ok=True)
        checkpoint.save_model(cfg.out / "gemini.npz", model, encoder, tok, {"stage": "convert"})
        return {"params": model.num_params(), "frozen": len(model.store.frozen_names())}

    return run


def stage_train(cfg):
    src = _need_file(_checkpoint_path(cfg, "gemini.npz"), "Gemini checkpoint")
    captions_p = _need_file(cfg.path("captions"), "captions")
    features_p = _need_file(cfg.path("features"), "features")
    val_p = cfg.path("val_captions", required=False)
    if val_p is not None:
        _need_file(val_p, "validation captions")

    def run():
        model, encoder, tok_d, _ = checkpoint.load_model(src)
        if not model.fusion or encoder is None:
            raise StageError("train needs a converted Gemini checkpoint")
        tok = data.BpeTokenizer.from_dict(tok_d)
        feats = data.load_features(features_p)
        pairs = _pairs(tok, data.load_captions(captions_p), feats)
        val = _pairs(tok, data.load_captions(val_p), feats) if val_p is not None else None
        history = fit(model, encoder, pairs, cfg.train, cfg.rng("train"), val_pairs=val,
                      log=lambda h: log.info("epoch %(epoch)d train %(train_loss).4f val %(val_loss).4f", h))
        final = dataset_loss(model, pairs, encoder)
        cfg.out.mkdir(parents=True, exist_ok=True)
        checkpoint.save_model(cfg.out / "trained.npz", model, encoder, tok, {"stage": "train"})
        _write_json(cfg.out / "train_log.json", {"history": history, "final_train_loss": final})
        return {"epochs": len(history), "final_train_loss": final}

    return run


def stage_generate(cfg):
    src = _need_file(_checkpoint_path(cfg, "trained.npz"), "trained checkpoint")
    features_p = _need_file(cfg.path("features"), "features")

    def run():
        model, encoder, tok_d, _ = checkpoint.load_model(src)
        if not model.fusion or encoder is None:
            raise StageError("generate needs a Gemini checkpoint")
        tok = data.BpeTokenizer.from_dict(tok_d)
        rows = []
        for image_id, fs in data.load_features(features_p).items():
            ids = generate_greedy(model, fs, encoder, cfg.max_len, tok.bos_id, tok.eos_id)
            rows.append({"image_id": image_id, "caption": tok.decode(ids)})
        cfg.out.mkdir(parents=True, exist_ok=True)
        data.write_jsonl(cfg.out / "generated.jsonl", rows)
        return {"captions": len(rows)}

    return run


def build_eval_corpus(candidate_rows, reference_records):
    refs = {}
    for r in reference_records:
        refs.setdefault(r.image_id, []).append(data.tokenize(r.caption))
    corpus = metrics.EvalCorpus()
    for row in candidate_rows:
        image_id = str(row["image_id"])
        if image_id in corpus:
            raise StageError(f"duplicate candidate for image {image_id!r}")
        if image_id not in refs:
            raise StageError(f"no references for image {image_id!r}")
        corpus[image_id] = (data.tokenize(row["caption"]), refs[image_id])
    if not corpus:
        raise StageError("no candidates to evaluate")
    return corpus


def stage_evaluate(cfg):
    cand_p = cfg.path("candidates", required=False) or cfg.out / "generated.jsonl"
    cand_p = _need_file(cand_p, "candidates")
    ref_p = _need_file(cfg.path("references", required=False) or cfg.path("captions"), "references")

    def run():
        corpus = build_eval_corpus(data.read_jsonl(cand_p), data.load_captions(ref_p))
        report = metrics.evaluate(corpus)
        cfg.out.mkdir(parents=True, exist_ok=True)
        _write_json(cfg.out / "eval_report.json", report.to_dict())
        return {k: getattr(report, k) for k in ("bleu1", "bleu4", "rouge_l", "cider")}

    return run


def stage_filter(cfg):
    captions_p = _need_file(cfg.path("captions"), "captions")
    emb_p = _need_file(cfg.path("embeddings"), "embeddings")

    def run():
        records = data.load_captions(captions_p)
        table = data.load_embeddings(emb_p)
        kept, rejected, stats = data.filter_dataset(records, table, cfg.threshold)
        cfg.out.mkdir(parents=True, exist_ok=True)
        report = stats.to_dict()
        report["threshold"] = cfg.threshold
        for row, rec in zip(report["records"], records):
            row["image_id"] = rec.image_id
        _write_json(cfg.out / "filter_report.json", report)
        data.write_jsonl(cfg.out / "kept.jsonl", [r.to_dict() for r in kept])
        data.write_jsonl(cfg.out / "rejected.jsonl", [r.to_dict() for r in rejected])
        return {"kept": stats.kept, "rejected": stats.rejected}

    return run


def stage_gradcheck(cfg):
    gc = dict(cfg.gradcheck)
    step = gc.pop("step", 1e-4)
    tol = gc.pop("tol", 1e-3)
    max_entries = gc.pop("max_entries", None)
    seed = gc.pop("seed", cfg.seed)
    dims = GradCheckDims(**gc)

    def run():
        report = full_model_gradcheck(dims, seed=seed, step_h=step, tol=tol, max_entries=max_entries)
        cfg.out.mkdir(parents=True, exist_ok=True)
        _write_json(cfg.out / "gradcheck_report.json", report)
        if not report["passed"]:
            raise StageError(f"gradient check failed, worst relative error {report['worst']:.3e}")
        return {"passed": True, "worst": report["worst"]}

    return run


STAGES = {
    "synth": stage_synth,
    "pretrain": stage_pretrain,
    "convert": stage_convert,
    "train": stage_train,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
    "filter": stage_filter,
    "gradcheck": stage_gradcheck,
}


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def build_parser():
    parser = argparse.ArgumentParser(prog="violet", description="Meshed Gemini-decoder captioning toolkit")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="TOML run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="artifact directory")
    for key in PATH_KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, help=f"override paths.{key}")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code, stage, exc):
    err = {"error": {"stage": stage, "type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def run(subcommand, config_path=None, overrides=None):
    """Run one subcommand; returns the process exit status."""
    overrides = overrides or {}
    try:
        cfg = load_config(config_path, overrides)
        action = STAGES[subcommand](cfg)
    except ConfigError as exc:
        return _fail(2, subcommand, exc)
    try:
        with _limit_threads(cfg.threads):
            summary = action()
    except ConfigError as exc:
        return _fail(2, subcommand, exc)
    except Exception as exc:  # noqa: BLE001 -- every stage failure maps to exit 1
        log.debug("stage failure", exc_info=True)
        return _fail(1, subcommand, exc)
    print(json.dumps({"stage": subcommand, **summary}, sort_keys=True))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "threads", "out") + PATH_KEYS}
    return run(args.subcommand, args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
