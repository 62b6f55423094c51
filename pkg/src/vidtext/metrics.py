"""Corpus caption metrics (BLEU@4, ROUGE-L, CIDEr-D) and exact-match accuracy.

Inputs are token lists; use :func:`vidtext.media.split_words` to turn strings
into tokens so scoring agrees with the model's tokenizer.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .media import normalize_answer

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Corpus BLEU with clipped 1-4 gram precisions and closest-reference brevity penalty."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        return 0.0
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(hyp: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
    return best


def rouge_l(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], beta: float = 1.2) -> float:
    """Mean over items of the best LCS F-measure against any reference."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        return 0.0
    return sum(rouge_l_single(h, r, beta) for h, r in zip(hypotheses, references)) / len(hypotheses)


class CiderD:
    """CIDEr-D with document frequencies taken from a reference corpus.

    ``score_item`` rates one hypothesis against its references using the
    corpus statistics, which is what per-sample rewards need. A one-item
    corpus gives every n-gram zero idf, so all scores are 0.
    """

    def __init__(self, references: Sequence[Sequence[Tokens]], n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)
        self.log_n_docs = math.log(float(max(len(references), 1)))

    def _vec(self, tokens: Tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_n_docs - math.log(max(1.0, self.df[g]))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def _sim(self, hv, hn, hl, rv, rn, rl) -> list[float]:
        delta = hl - rl
        out = []
        for k in range(self.n):
            val = sum(min(x, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, x in hv[k].items())
            if hn[k] != 0 and rn[k] != 0:
                val /= hn[k] * rn[k]
            out.append(val * math.exp(-(delta**2) / (2 * self.sigma**2)))
        return out

    def score_item(self, hyp: Tokens, refs: Sequence[Tokens]) -> float:
        hv, hn = self._vec(hyp)
        total = [0.0] * self.n
        for r in refs:
            rv, rn = self._vec(r)
            for k, s in enumerate(self._sim(hv, hn, len(hyp), rv, rn, len(r))):
                total[k] += s
        return 10.0 * sum(total) / self.n / len(refs)


def cider_d(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], sigma: float = 6.0) -> float:
    """Corpus CIDEr-D in [0, 10]; document frequencies come from ``references``."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        return 0.0
    scorer = CiderD(references, sigma=sigma)
    return sum(scorer.score_item(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def exact_match_accuracy(predictions: Sequence[str], answers: Sequence[str]) -> float:
    if len(predictions) != len(answers):
        raise ValueError(f"{len(predictions)} predictions for {len(answers)} answers")
    if not answers:
        return 0.0
    return sum(normalize_answer(p) == normalize_answer(a) for p, a in zip(predictions, answers)) / len(answers)
