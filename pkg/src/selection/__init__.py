"""
Candidate selection strategies.

Each strategy implements the SelectionStrategy interface and picks one
hypothesis from the pooled length-beam x MBR candidates of a source.
"""

from typing import Dict

from src.config import SelectionKind
from src.selection.base import SelectionStrategy
from src.selection.length_score import LengthScoreSelection, length_score_select
from src.selection.mbr import MBRSelection, mbr_select, utility_matrix

DEFAULT_SELECTORS: Dict[SelectionKind, type] = {
    SelectionKind.MBR: MBRSelection,
    SelectionKind.LENGTH_SCORE: LengthScoreSelection,
}

__all__ = [
    "SelectionStrategy",
    "MBRSelection",
    "LengthScoreSelection",
    "DEFAULT_SELECTORS",
    "mbr_select",
    "length_score_select",
    "utility_matrix",
]
