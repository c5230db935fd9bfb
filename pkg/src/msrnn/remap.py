"""Position-gap remapping for decoding beyond the trained context length.

Neighbor gaps in the retained set are compressed before rotation: a gap g
stays g up to 10 and collapses to ln(ln(g)) above that, so the remapped span
of a k-state cache stays below 10*(k-1) no matter how long the stream runs.
Remapped positions are recomputed from the current retained set every step;
they are real-valued and start at 0 for the oldest retained state.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

GAP_KNEE = 10


def remap_gap(gap: int) -> float:
    """Compressed contribution of one neighbor gap.

    Identity up to the knee (10), ln(ln(gap)) beyond it. Note the map is
    intentionally literal: gaps just past the knee land below 1.
    """
    gap = int(gap)
    if gap < 1:
        raise ValueError(f"gap must be a positive count, got {gap}")
    if gap <= GAP_KNEE:
        return float(gap)
    return math.log(math.log(gap))


def remap_positions(retained: Sequence[int]) -> np.ndarray:
    """Remapped rotation positions for a strictly increasing retained set.

    Element 0 is always 0.0; element j is the cumulative sum of the remapped
    gaps between consecutive retained originals. float64 throughout.
    """
    if len(retained) == 0:
        raise ValueError("retained set is empty")
    out = np.empty(len(retained), dtype=np.float64)
    out[0] = 0.0
    prev = retained[0]
    for j in range(1, len(retained)):
        cur = retained[j]
        if cur <= prev:
            raise ValueError(f"retained positions must strictly increase, got {prev} then {cur}")
        out[j] = out[j - 1] + remap_gap(cur - prev)
        prev = cur
    return out
