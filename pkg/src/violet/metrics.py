"""Corpus-level captioning metrics: BLEU-1/4, ROUGE-L and CIDEr-D.

A corpus maps image ids to ``(candidate, references)`` where every caption
is a list of string tokens.
"""

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

from . import _kernels

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_N = 4


class EvalCorpus(dict):
    """``{image_id: (candidate_tokens, [reference_tokens, ...])}``."""

    def __init__(self, items=()):
        super().__init__()
        for image_id, (cand, refs) in dict(items).items():
            self[image_id] = (cand, refs)

    def __setitem__(self, image_id, value):
        cand, refs = value
        refs = [list(r) for r in refs]
        if not refs:
            raise ValueError(f"image {image_id!r} has no references")
        cand = list(cand)
        for toks in [cand] + refs:
            if any(t == "" for t in toks):
                raise ValueError("empty token in caption")
        super().__setitem__(image_id, (cand, refs))


@dataclass
class EvalReport:
    bleu1: float
    bleu4: float
    rouge_l: float
    cider: float
    per_image: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(corpus, n):
    """Corpus totals ``(clipped_matches, candidate_ngrams)`` for order ``n``."""
    if n < 1:
        raise ValueError("n must be positive")
    matches = total = 0
    for cand, refs in corpus.values():
        counts = ngrams(cand, n)
        if not counts:
            continue
        max_ref = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        matches += sum(min(c, max_ref[g]) for g, c in counts.items())
        total += sum(counts.values())
    return matches, total


def _closest_ref_len(cand_len, refs):
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def brevity_penalty(corpus):
    c = sum(len(cand) for cand, _ in corpus.values())
    r = sum(_closest_ref_len(len(cand), refs) for cand, refs in corpus.values())
    if c == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - r / c))


def bleu(corpus, max_n=4):
    if not corpus:
        raise ValueError("empty corpus")
    if max_n not in (1, 2, 3, 4):
        raise ValueError("max_n must be in 1..4")
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = modified_precision(corpus, n)
        if m == 0:
            return 0.0
        log_sum += math.log(m / t)
    return brevity_penalty(corpus) * math.exp(log_sum / max_n)


def _lcs(a, b):
    vocab = {}
    ia = [vocab.setdefault(t, len(vocab)) for t in a]
    ib = [vocab.setdefault(t, len(vocab)) for t in b]
    return _kernels.lcs_length(ia, ib)


def rouge_l_f(cand, ref, beta=ROUGE_BETA):
    if not cand or not ref:
        return 0.0
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l_per_image(corpus):
    return {k: max(rouge_l_f(c, r) for r in refs) for k, (c, refs) in corpus.items()}


def rouge_l(corpus):
    if not corpus:
        raise ValueError("empty corpus")
    scores = rouge_l_per_image(corpus)
    return sum(scores.values()) / len(scores)


def _document_frequency(corpus, n_max):
    df = Counter()
    for _, refs in corpus.values():
        seen = set()
        for r in refs:
            for n in range(1, n_max + 1):
                seen.update(ngrams(r, n))
        df.update(seen)
    return df


def _tfidf(tokens, df, log_n, n_max):
    vecs, norms = [], []
    for n in range(1, n_max + 1):
        vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_per_image(corpus, n_max=CIDER_N, sigma=CIDER_SIGMA):
    """CIDEr-D per image: clipped tf-idf cosine with a Gaussian length penalty, times 10."""
    if not corpus:
        raise ValueError("empty corpus")
    df = _document_frequency(corpus, n_max)
    log_n = math.log(float(len(corpus)))
    out = {}
    for image_id, (cand, refs) in corpus.items():
        cv, cn = _tfidf(cand, df, log_n, n_max)
        per_n = [0.0] * n_max
        for r in refs:
            rv, rn = _tfidf(r, df, log_n, n_max)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
            for k in range(n_max):
                if cn[k] == 0 or rn[k] == 0:
                    continue
                dot = sum(min(v, rv[k][g]) * rv[k][g] for g, v in cv[k].items() if g in rv[k])
                per_n[k] += penalty * dot / (cn[k] * rn[k])
        out[image_id] = 10.0 * sum(per_n) / n_max / len(refs)
    return out


def cider(corpus, n_max=CIDER_N, sigma=CIDER_SIGMA):
    scores = cider_per_image(corpus, n_max, sigma)
    return sum(scores.values()) / len(scores)


def evaluate(corpus):
    if not corpus:
        raise ValueError("empty corpus")
    rouge = rouge_l_per_image(corpus)
    cid = cider_per_image(corpus)
    per_image = {}
    for k, item in corpus.items():
        single = EvalCorpus({k: item})
        per_image[k] = {
            "bleu1": bleu(single, 1),
            "bleu4": bleu(single, 4),
            "rouge_l": rouge[k],
            "cider": cid[k],
        }
    return EvalReport(
        bleu1=bleu(corpus, 1),
        bleu4=bleu(corpus, 4),
        rouge_l=sum(rouge.values()) / len(rouge),
        cider=sum(cid.values()) / len(cid),
        per_image=per_image,
    )
