"""Text metrics: ROUGE-L, CIDEr and normalized exact-match accuracy."""
from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from typing import Sequence

from .errors import ContractError, DataError

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
CIDER_SCALE = 10.0

_WORD = re.compile(r"[^\W_]+")


def metric_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric runs; everything else separates tokens."""
    return _WORD.findall(text.lower())


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_tokens(cand: Sequence, ref: Sequence, beta: float = ROUGE_BETA) -> dict[str, float]:
    if not cand or not ref:
        return {"precision": 0.0, "recall": 0.0, "f": 0.0}
    lcs = lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p) if lcs else 0.0
    return {"precision": p, "recall": r, "f": f}


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> dict[str, float]:
    return rouge_l_tokens(metric_tokens(candidate), metric_tokens(reference), beta)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(k, 0.0) for k, v in a.items()) / (na * nb)


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]],
          max_n: int = CIDER_MAX_N, scale: float = CIDER_SCALE) -> tuple[list[float], float]:
    """Per-item CIDEr and the corpus mean.

    Document frequency counts items whose references contain an n-gram; n-grams
    absent from every reference get df 1 (they can only match a zero entry anyway).
    """
    if not candidates:
        raise DataError("CIDEr needs at least one item")
    if len(candidates) != len(references):
        raise ContractError("candidates and references differ in length")
    if any(len(refs) == 0 for refs in references):
        raise DataError("every item needs at least one reference")
    n_items = len(candidates)
    cand_toks = [metric_tokens(c) for c in candidates]
    ref_toks = [[metric_tokens(r) for r in refs] for refs in references]
    scores = [0.0] * n_items
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in ref_toks:
            df.update(set().union(*(ngrams(r, n) for r in refs)))

        def vec(tokens):
            return {g: c * math.log(n_items / max(1, df[g])) for g, c in ngrams(tokens, n).items()}

        for i in range(n_items):
            cv = vec(cand_toks[i])
            sims = [_cosine(cv, vec(r)) for r in ref_toks[i]]
            scores[i] += sum(sims) / len(sims)
    per_item = [scale * s / max_n for s in scores]
    return per_item, sum(per_item) / n_items


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation characters, collapse whitespace."""
    kept = "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P"))
    return " ".join(kept.split())


def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise ContractError("accuracy needs at least one item")
    hits = sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(predictions, golds))
    return hits / len(golds)


def metric_parameters() -> dict:
    """Settings embedded in evaluation reports."""
    return {"rouge_l": {"beta": ROUGE_BETA, "tokens": "lowercase alphanumeric runs"},
            "cider": {"max_n": CIDER_MAX_N, "scale": CIDER_SCALE, "idf": "ln(N/max(1,df))"},
            "accuracy": {"normalize": "lowercase, strip punctuation, collapse whitespace"}}
