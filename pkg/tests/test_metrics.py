import math

import pytest

from oracles import bleu4_bruteforce, cider_d_bruteforce, lcs_bruteforce, random_caption_corpus
from vidtext.media import split_words
from vidtext.metrics import CiderD, bleu4, cider_d, exact_match_accuracy, lcs_length, ngrams, rouge_l


def _toks(s):
    return split_words(s)


@pytest.mark.parametrize("seed", range(25))
def test_bleu_matches_bruteforce(seed):
    hyps, refs = random_caption_corpus(seed)
    assert bleu4(hyps, refs) == pytest.approx(bleu4_bruteforce(hyps, refs), abs=1e-9)


@pytest.mark.parametrize("seed", range(25))
def test_cider_matches_bruteforce(seed):
    hyps, refs = random_caption_corpus(seed)
    assert cider_d(hyps, refs) == pytest.approx(cider_d_bruteforce(hyps, refs), abs=1e-9)


def test_identity_corpus():
    refs = [[_toks("a red square moves left")], [_toks("a blue circle appears then a green triangle disappears")]]
    hyps = [r[0] for r in refs]
    assert bleu4(hyps, refs) == pytest.approx(1.0)
    assert rouge_l(hyps, refs) == pytest.approx(1.0)
    assert cider_d(hyps, refs) == pytest.approx(10.0)


def test_disjoint_corpus_scores_zero():
    refs = [[_toks("a b c d e")], [_toks("f g h i j")]]
    hyps = [_toks("k l m n o"), _toks("p q r s t")]
    assert bleu4(hyps, refs) == 0.0
    assert rouge_l(hyps, refs) == 0.0
    assert cider_d(hyps, refs) == 0.0


def test_single_document_idf_zeroes_cider():
    # log N - log df is 0 for every n-gram present in the only reference set
    assert cider_d([_toks("a b c d")], [[_toks("a b c d")]]) == 0.0


def test_bleu_brevity_penalty():
    ref = _toks("a b c d e f g h")
    hyp = _toks("a b c d e f")
    expected = math.exp(1 - 8 / 6)
    assert bleu4([hyp], [[ref]]) == pytest.approx(expected)


def test_bleu_closest_reference_tie_goes_to_shorter():
    hyp = _toks("a b c d e")
    refs = [_toks("a b c d"), _toks("a b c d e f")]  # both 1 away
    assert bleu4([hyp], [refs]) == pytest.approx(bleu4_bruteforce([hyp], [refs]))
    # effective reference length 4 < 5 means no penalty
    assert bleu4([hyp], [refs]) == pytest.approx(1.0)


def test_bleu_clips_repeated_ngrams():
    hyp = _toks("the the the the the")
    refs = [_toks("the cat is on the mat")]
    assert bleu4([hyp], [refs]) == 0.0
    assert ngrams(hyp, 1)[("the",)] == 5


def test_cider_gaussian_length_penalty():
    refs = [[_toks("a red square moves left")], [_toks("a blue circle appears")]]
    short = cider_d([_toks("a red square moves"), refs[1][0]], refs)
    exact = cider_d([refs[0][0], refs[1][0]], refs)
    assert short < exact
    scorer = CiderD(refs)
    assert scorer.score_item(refs[0][0], refs[0]) == pytest.approx(10.0)


def test_lcs_matches_bruteforce():
    import numpy as np

    rng = np.random.default_rng(0)
    for _ in range(200):
        a = [str(x) for x in rng.integers(0, 3, size=int(rng.integers(0, 8)))]
        b = [str(x) for x in rng.integers(0, 3, size=int(rng.integers(0, 8)))]
        assert lcs_length(a, b) == lcs_bruteforce(a, b)


def test_rouge_takes_best_reference():
    hyp = _toks("a red square")
    refs = [_toks("x y z"), _toks("a red square")]
    assert rouge_l([hyp], [refs]) == pytest.approx(1.0)
    p, r, beta = 2 / 3, 2 / 4, 1.2
    expected = (1 + beta**2) * p * r / (r + beta**2 * p)
    assert rouge_l([_toks("a red cube")], [[_toks("a red square moves")]]) == pytest.approx(expected)


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        cider_d([["a"]], [])
    with pytest.raises(ValueError):
        exact_match_accuracy(["a"], [])


def test_exact_match_normalises():
    assert exact_match_accuracy(["Red.", "moves left"], ["red", "moves right"]) == 0.5


def test_rouge_hand_evaluated_case():
    beta = 1.2
    p, r = 2 / 3, 1.0  # LCS("a b c", "a c") = 2
    expected = (1 + beta**2) * r * p / (r + beta**2 * p)
    assert rouge_l([_toks("a b c")], [[_toks("a c")]]) == pytest.approx(expected, abs=1e-12)


def test_rouge_is_order_sensitive():
    assert rouge_l([_toks("b a")], [[_toks("a b")]]) < 1.0


def test_bleu_unigram_precision_clipped():
    hyp, ref = _toks("a a a a a"), _toks("a b c d e")
    h, r = ngrams(hyp, 1), ngrams(ref, 1)
    clipped = sum(min(c, r.get(g, 0)) for g, c in h.items())
    assert clipped / sum(h.values()) == pytest.approx(1 / 5)
    assert bleu4([hyp], [[ref]]) == 0.0


def test_empty_corpus_scores_zero():
    assert bleu4([], []) == 0.0
    assert rouge_l([], []) == 0.0
    assert cider_d([], []) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_corpus_scores_permutation_invariant_and_in_range(seed):
    import numpy as np

    hyps, refs = random_caption_corpus(seed)
    order = np.random.default_rng(seed).permutation(len(hyps))
    ph, pr = [hyps[i] for i in order], [refs[i] for i in order]
    for metric, hi in ((bleu4, 1.0), (rouge_l, 1.0), (cider_d, 10.0)):
        score = metric(hyps, refs)
        assert 0.0 <= score <= hi + 1e-12
        assert metric(ph, pr) == pytest.approx(score, abs=1e-12)


def test_cider_drops_when_correct_hypothesis_is_padded():
    refs = [[_toks("a red square moves left")], [_toks("a blue circle appears")], [_toks("a green triangle disappears")]]
    hyps = [r[0] for r in refs]
    padded = [hyps[0] + [f"junk{i}" for i in range(10)], *hyps[1:]]
    assert cider_d(padded, refs) < cider_d(hyps, refs)
