import math

import numpy as np

# Response maps are rounded to this many decimals so FFT noise never reorders ties.
SCORE_DECIMALS = 9


def round_half_away(value: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def box_sum(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Sum of every ``height x width`` window of ``a`` (valid placements only)."""
    c = np.pad(a.astype(np.float64), ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    return c[height:, width:] - c[:-height, width:] - c[height:, :-width] + c[:-height, :-width]


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2)))
