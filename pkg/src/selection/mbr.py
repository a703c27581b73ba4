"""
Minimum Bayes-risk selection with smoothed sentence BLEU as utility.

Each candidate is scored by its mean utility against every other candidate
taken as a pseudo-reference; the consensus hypothesis wins.
"""

from typing import List, Sequence, Tuple

from src.analysis.bleu import sentence_bleu
from src.entities import Candidate
from src.selection.base import SelectionStrategy


def utility_matrix(sequences: Sequence[Sequence[int]]) -> List[List[float]]:
    """u[i][j] = BLEU of sequence i against sequence j; diagonal left at 0."""
    n = len(sequences)
    matrix = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                matrix[i][j] = sentence_bleu(sequences[i], sequences[j])
    return matrix


def select_from_matrix(matrix: Sequence[Sequence[float]]) -> int:
    """argmax_i mean_{j != i} u[i][j]; lowest index on ties."""
    n = len(matrix)
    if n <= 1:
        return 0
    best, best_score = 0, float("-inf")
    for i, row in enumerate(matrix):
        score = sum(row[j] for j in range(n) if j != i) / (n - 1)
        if score > best_score:
            best, best_score = i, score
    return best


def mbr_select(sequences: Sequence[Sequence[int]]) -> int:
    """
    Index of the consensus candidate.

    Args:
        sequences: Candidate token sequences, at least one.

    Returns:
        int: Selected index (0 for a single candidate).
    """
    if not sequences:
        raise ValueError("mbr_select needs at least one candidate")
    return select_from_matrix(utility_matrix(sequences))


class MBRSelection(SelectionStrategy):
    """Joint MBR over all pooled candidates."""

    def select(self, candidates: Sequence[Candidate]) -> Tuple[int, List[List[float]]]:
        if not candidates:
            raise ValueError("cannot select from zero candidates")
        matrix = utility_matrix([c.tokens for c in candidates])
        return select_from_matrix(matrix), matrix
