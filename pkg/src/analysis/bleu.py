"""
BLEU over token-id sequences.

Sequences are scored as space-joined id strings with sacrebleu's ``none``
tokenizer, so n-grams are n-grams of token ids.
"""

from typing import Sequence

from sacrebleu.metrics import BLEU

from src.errors import DimensionError, EmptyCorpusError

_CORPUS_BLEU = BLEU(tokenize="none", smooth_method="none")
# raw n-gram statistics; smoothing is applied in sentence_bleu
_SENTENCE_STATS = BLEU(tokenize="none", smooth_method="none", effective_order=True)


def to_text(tokens: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in tokens)


def corpus_bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """
    Corpus-level BLEU-4 with brevity penalty, in [0, 100].

    Raises:
        EmptyCorpusError: if there are no hypotheses.
        DimensionError: if the lists differ in length.
    """
    if len(hypotheses) == 0:
        raise EmptyCorpusError("BLEU is undefined on an empty corpus")
    if len(hypotheses) != len(references):
        raise DimensionError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    score = _CORPUS_BLEU.corpus_score(
        [to_text(h) for h in hypotheses],
        [[to_text(r) for r in references]],
    )
    return float(score.score)


def sentence_bleu(hypothesis: Sequence[int], reference: Sequence[int]) -> float:
    """
    Smoothed sentence-level BLEU of one hypothesis against one reference.

    Add-one on every n-gram precision, unigrams included. Orders the
    hypothesis is too short to have are dropped (effective order).
    sacrebleu's own add-k leaves unigrams unsmoothed, so the counts are
    smoothed here and rescored.
    """
    stats = _SENTENCE_STATS.sentence_score(to_text(hypothesis), [to_text(reference)])
    correct = [c + 1 if t > 0 else 0 for c, t in zip(stats.counts, stats.totals)]
    total = [t + 1 if t > 0 else 0 for t in stats.totals]
    score = BLEU.compute_bleu(correct, total, stats.sys_len, stats.ref_len,
                              smooth_method="none", effective_order=True)
    return float(score.score)
