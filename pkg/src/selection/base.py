from abc import ABC, abstractmethod
from typing import List, Sequence, Tuple

from src.entities import Candidate


class SelectionStrategy(ABC):
    """
    Abstract base class for candidate selection.

    A strategy chooses one of the decoded hypotheses for a source.
    """

    @abstractmethod
    def select(self, candidates: Sequence[Candidate]) -> Tuple[int, List[List[float]]]:
        """
        Choose a candidate.

        Args:
            candidates (Sequence[Candidate]): Pooled hypotheses, at least one.

        Returns:
            Tuple[int, List[List[float]]]: Selected index and the utility
            matrix it was based on (empty when none is computed).
        """
        pass
