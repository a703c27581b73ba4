from typing import List, Sequence, Tuple

from src.entities import Candidate
from src.selection.base import SelectionStrategy


def length_score_select(candidates: Sequence[Candidate]) -> int:
    """First sample of the most probable length; lowest index on ties."""
    if not candidates:
        raise ValueError("cannot select from zero candidates")
    best = 0
    for i, cand in enumerate(candidates):
        if cand.length_log_prob > candidates[best].length_log_prob:
            best = i
    return best


class LengthScoreSelection(SelectionStrategy):
    """
    Picks by predicted length probability alone.

    Deterministic and cheap; ignores agreement between samples.
    """

    def select(self, candidates: Sequence[Candidate]) -> Tuple[int, List[List[float]]]:
        return length_score_select(candidates), []
