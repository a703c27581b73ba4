"""
Diagnostic experiments and BLEU evaluation.
"""

from src.analysis.bleu import corpus_bleu, sentence_bleu

__all__ = ["corpus_bleu", "sentence_bleu"]
