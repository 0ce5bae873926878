"""Caption ingestion, text normalisation, byte-pair encoding and the
embedding-similarity quality filter."""

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .encoder import FeatureSet

MAX_RUN = 2
PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
UNK_SENTINEL = "�"

_RUN_RE = re.compile(r"(.)\1{%d,}" % MAX_RUN, re.DOTALL)
_WS_RE = re.compile(r"\s+")
_CHUNK_RE = re.compile(r" ?[^ ]+| +")


# --------------------------------------------------------------------------
# records


@dataclass
class CaptionRecord:
    image_id: str
    caption: str
    source_caption: str = None
    embedding_id: str = None

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not normalize_text(self.caption):
            raise ValueError(f"caption for {self.image_id!r} is empty after normalization")

    def to_dict(self):
        d = {"image_id": self.image_id, "caption": self.caption}
        if self.source_caption is not None:
            d["source_caption"] = self.source_caption
        if self.embedding_id is not None:
            d["embedding_id"] = self.embedding_id
        return d


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_captions(path):
    rows = read_jsonl(path)
    try:
        return [
            CaptionRecord(
                image_id=str(r["image_id"]),
                caption=r["caption"],
                source_caption=r.get("source_caption"),
                embedding_id=r.get("embedding_id"),
            )
            for r in rows
        ]
    except KeyError as exc:
        raise ValueError(f"{path}: caption record missing key {exc}") from None


def load_features(path):
    """Read a features JSON Lines file into ``{image_id: FeatureSet}``."""
    out = {}
    for r in read_jsonl(path):
        fs = FeatureSet(str(r["image_id"]), np.asarray(r["features"], dtype=np.float64))
        out[fs.image_id] = fs
    dims = {fs.features.shape[1] for fs in out.values()}
    if len(dims) > 1:
        raise ValueError(f"{path}: inconsistent feature widths {sorted(dims)}")
    return out


def feature_rows(features):
    return [{"image_id": fs.image_id, "features": fs.features.tolist()} for fs in features]


@dataclass
class EmbeddingTable:
    pairs: dict = field(default_factory=dict)
    dim: int = None

    def add(self, embedding_id, source, translation):
        u = np.asarray(source, dtype=np.float64)
        v = np.asarray(translation, dtype=np.float64)
        if u.ndim != 1 or u.shape != v.shape:
            raise ValueError(f"embedding {embedding_id!r}: vectors must be 1-D of equal length")
        if self.dim is None:
            self.dim = u.shape[0]
        elif u.shape[0] != self.dim:
            raise ValueError(f"embedding {embedding_id!r} has dim {u.shape[0]}, expected {self.dim}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError(f"embedding {embedding_id!r} has non-finite values")
        self.pairs[embedding_id] = (u, v)

    def __contains__(self, key):
        return key in self.pairs

    def __getitem__(self, key):
        return self.pairs[key]


def load_embeddings(path):
    table = EmbeddingTable()
    for r in read_jsonl(path):
        table.add(str(r["embedding_id"]), r["source_vector"], r["translation_vector"])
    return table


# --------------------------------------------------------------------------
# normalisation


def normalize_text(s):
    """Strip Unicode punctuation, cap character runs at two, squeeze whitespace."""
    s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    s = _RUN_RE.sub(lambda m: m.group(1) * MAX_RUN, s)
    return _WS_RE.sub(" ", s).strip()


def tokenize(s):
    return normalize_text(s).split()


# --------------------------------------------------------------------------
# BPE


def _chunks(s):
    return _CHUNK_RE.findall(s)


class BpeTokenizer:
    def __init__(self, alphabet, merges):
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.tokens = list(SPECIALS) + self.alphabet + [a + b for a, b in self.merges]
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self._alpha = set(self.alphabet)
        self._cache = {}

    @property
    def vocab_size(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    @property
    def unk_id(self):
        return 3

    def _encode_chunk(self, chunk):
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        syms = [c if c in self._alpha else None for c in chunk]
        while len(syms) > 1:
            best = None
            for i in range(len(syms) - 1):
                a, b = syms[i], syms[i + 1]
                if a is None or b is None:
                    continue
                r = self.ranks.get((a, b))
                if r is not None and (best is None or r < best[0]):
                    best = (r, a, b)
            if best is None:
                break
            _, a, b = best
            merged, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == a and syms[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        ids = [self.unk_id if s is None else self.token_to_id[s] for s in syms]
        self._cache[chunk] = ids
        return ids

    def encode(self, s):
        out = []
        for chunk in _chunks(s):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids):
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} out of range")
            if i == self.unk_id:
                parts.append(UNK_SENTINEL)
            elif i >= len(SPECIALS):
                parts.append(self.tokens[i])
        return "".join(parts)

    def to_dict(self):
        return {"alphabet": self.alphabet, "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["alphabet"], d["merges"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def bpe_train(corpus, vocab_size):
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair.  Training stops at
    ``vocab_size`` or when no pair occurs at least twice.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    alphabet = sorted({ch for s in corpus for ch in s})
    base = len(SPECIALS) + len(alphabet)
    if vocab_size < base:
        raise ValueError(f"vocab_size {vocab_size} below alphabet + specials ({base})")
    words = Counter()
    for s in corpus:
        words.update(_chunks(s))
    seqs = {w: list(w) for w in words}
    merges = []
    while base + len(merges) < vocab_size:
        pairs = Counter()
        for w, syms in seqs.items():
            c = words[w]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += c
        known = set(SPECIALS) | {a + b for a, b in merges}
        # a pair whose concatenation is already a token would alias two ids
        ranked = sorted((-c, p) for p, c in pairs.items() if p[0] + p[1] not in known)
        if not ranked or -ranked[0][0] < 2:
            break
        pair = ranked[0][1]
        a, b = pair
        merges.append(pair)
        for w, syms in seqs.items():
            if len(syms) < 2:
                continue
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == a and syms[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            seqs[w] = out
    return BpeTokenizer(alphabet, merges)


# --------------------------------------------------------------------------
# similarity filter


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(u @ v) / (nu * nv)))


@dataclass
class FilterStats:
    total: int
    kept: int
    rejected: int
    rejection_rate: float
    similarity: list
    decisions: list
    errors: list

    def to_dict(self):
        return {
            "total": self.total,
            "kept": self.kept,
            "rejected": self.rejected,
            "rejection_rate": self.rejection_rate,
            "records": [
                {"index": i, "similarity": s, "decision": d}
                for i, (s, d) in enumerate(zip(self.similarity, self.decisions))
            ],
            "errors": self.errors,
        }


def filter_dataset(records, table, threshold=0.6):
    """Keep records whose source/translation embeddings have similarity >= threshold."""
    kept, rejected = [], []
    sims, decisions, errors = [], [], []
    for i, rec in enumerate(records):
        key = rec.embedding_id
        if key is None or key not in table:
            errors.append({"index": i, "image_id": rec.image_id,
                           "reason": f"missing embedding {key!r}"})
            sims.append(None)
            decisions.append("rejected")
            rejected.append(rec)
            continue
        s = cosine_similarity(*table[key])
        sims.append(s)
        if s >= threshold:
            decisions.append("kept")
            kept.append(rec)
        else:
            decisions.append("rejected")
            rejected.append(rec)
    total = len(records)
    stats = FilterStats(
        total=total,
        kept=len(kept),
        rejected=len(rejected),
        rejection_rate=len(rejected) / total if total else 0.0,
        similarity=sims,
        decisions=decisions,
        errors=errors,
    )
    return kept, rejected, stats
