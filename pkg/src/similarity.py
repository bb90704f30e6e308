"""Response maps between transformed templates and piano rolls.

Three interchangeable measures are supported (ZNCC, RMSE, BACC). Positions
are always ``(row, col)``, i.e. (P, X): pitch row and time column of the
template's top-left corner. Maps use valid-mode correlation, so placements
needing cells outside the roll are not part of the map.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.signal import convolve2d, correlate

from src.config import DiffuseConfig, Measure
from src.errors import EmptyResponseError
from src.lexicon import Template, TransformParams, apply_transform, template_matrix
from src.midi_ingest import PianoRoll
from src.numeric import SCORE_DECIMALS, box_sum

logger = logging.getLogger(__name__)

MatrixLike = Union[PianoRoll, np.ndarray]

_EPS = 1e-12


def _matrix(roll: MatrixLike) -> np.ndarray:
    return roll.data if isinstance(roll, PianoRoll) else np.asarray(roll, dtype=np.float64)


def _window(matrix: np.ndarray, at: Tuple[int, int], shape: Tuple[int, int]) -> np.ndarray:
    row, col = at
    h, w = shape
    if row < 0 or col < 0 or row + h > matrix.shape[0] or col + w > matrix.shape[1]:
        raise EmptyResponseError(f"window {shape} at {at} is not inside the {matrix.shape} roll")
    return matrix[row:row + h, col:col + w]


@dataclass
class ResponseMap:
    """Measure values for every valid placement of one transformed template."""
    values: np.ndarray
    measure: Measure
    template_id: int
    transform: TransformParams

    @property
    def higher_is_better(self) -> bool:
        return self.measure != Measure.RMSE

    @property
    def scores(self) -> np.ndarray:
        """Values oriented so that higher is better (RMSE becomes 1 - RMSE)."""
        return self.values if self.higher_is_better else 1.0 - self.values

    def best(self) -> Tuple[int, int]:
        """(row, col) of the best placement; ties go to the earliest column, then lowest row."""
        scores = self.scores
        top = scores.max()
        rows, cols = np.nonzero(scores == top)
        order = np.lexsort((rows, cols))
        return int(rows[order[0]]), int(cols[order[0]])


def gaussian_kernel(cfg: DiffuseConfig) -> np.ndarray:
    half = cfg.kernel_size // 2
    axis = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(axis ** 2) / (2 * cfg.sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def diffuse(matrix: MatrixLike, cfg: DiffuseConfig) -> np.ndarray:
    """Blur a roll with the normalized Gaussian kernel (same size output, zero fill)."""
    return convolve2d(_matrix(matrix), gaussian_kernel(cfg), mode="same", boundary="fill")


# ---------------------------------------------------------------------------
# Point measures
# ---------------------------------------------------------------------------

def window_note_count(matrix: MatrixLike, at: Tuple[int, int], shape: Tuple[int, int]) -> int:
    """Maximal horizontal runs of positive cells inside the window."""
    positive = _window(_matrix(matrix), at, shape) > 0
    starts = positive.copy()
    starts[:, 1:] &= ~positive[:, :-1]
    return int(starts.sum())


def zncc(roll: MatrixLike, tpl_matrix: np.ndarray, at: Tuple[int, int]) -> float:
    """Zero-normalized cross-correlation; 0 when either side has no variance."""
    window = _window(_matrix(roll), at, tpl_matrix.shape)
    sw, st = window.std(), tpl_matrix.std()
    if sw < _EPS or st < _EPS:
        return 0.0
    value = np.mean((window - window.mean()) * (tpl_matrix - tpl_matrix.mean())) / (sw * st)
    return float(np.clip(value, -1.0, 1.0))


def rmse(roll: MatrixLike, tpl_matrix: np.ndarray, at: Tuple[int, int]) -> float:
    window = _window(_matrix(roll), at, tpl_matrix.shape)
    return float(np.sqrt(np.mean((window - tpl_matrix) ** 2)))


def bacc_matrix(roll: MatrixLike, tpl_matrix: np.ndarray, n_bases: int, at: Tuple[int, int],
                notes: Optional[MatrixLike] = None) -> float:
    """BACC for an already rendered template; ``notes`` supplies the roll n_M is counted on."""
    matrix = _matrix(roll)
    window = _window(matrix, at, tpl_matrix.shape)
    n_m = window_note_count(matrix if notes is None else notes, at, tpl_matrix.shape)
    if n_bases + n_m == 0:
        return 0.0
    return float(np.sum(window * tpl_matrix) / (n_bases + n_m))


def bacc(roll: MatrixLike, tpl: Template, transform: TransformParams, at: Tuple[int, int]) -> float:
    """Basis-average cross-correlation of a transformed template at ``at``."""
    shaped = apply_transform(tpl, transform)
    return bacc_matrix(roll, template_matrix(shaped), shaped.n_bases, at)


def score_at(data: np.ndarray, notes: np.ndarray, tpl_matrix: np.ndarray, n_bases: int,
             at: Tuple[int, int], measure: Measure) -> Optional[float]:
    """Oriented score (higher is better) at one placement, or None if the window leaves the roll."""
    h, w = tpl_matrix.shape
    row, col = at
    if row < 0 or col < 0 or row + h > data.shape[0] or col + w > data.shape[1]:
        return None
    if measure == Measure.BACC:
        value = bacc_matrix(data, tpl_matrix, n_bases, at, notes)
    elif measure == Measure.ZNCC:
        value = zncc(data, tpl_matrix, at)
    else:
        value = 1.0 - rmse(data, tpl_matrix, at)
    return round(value, SCORE_DECIMALS)


# ---------------------------------------------------------------------------
# Whole maps
# ---------------------------------------------------------------------------

def note_count_map(matrix: MatrixLike, shape: Tuple[int, int]) -> np.ndarray:
    """n_M for every valid window of ``shape``: run starts inside plus runs entering at the left edge."""
    positive = _matrix(matrix) > 0
    h, w = shape
    starts = positive.copy()
    starts[:, 1:] &= ~positive[:, :-1]
    continuing = positive & ~starts
    counts = box_sum(starts, h, w) + box_sum(continuing, h, 1)[:, : positive.shape[1] - w + 1]
    return np.rint(counts)


def overlap_map(matrix: MatrixLike, tpl_matrix: np.ndarray) -> np.ndarray:
    """Number of template cells landing on positive roll cells, per placement."""
    counts = correlate((_matrix(matrix) > 0).astype(np.float64), (tpl_matrix > 0).astype(np.float64), mode="valid")
    return np.rint(counts)


def measure_map(data: np.ndarray, notes: np.ndarray, tpl_matrix: np.ndarray, n_bases: int,
                measure: Measure, note_counts: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw measure values (not oriented) over all valid placements.

    ``note_counts`` is a precomputed ``note_count_map(notes, tpl_matrix.shape)``.
    """
    h, w = tpl_matrix.shape
    if h > data.shape[0] or w > data.shape[1]:
        raise EmptyResponseError(f"template {tpl_matrix.shape} does not fit in roll {data.shape}")
    n = h * w
    if measure == Measure.BACC:
        numerator = correlate(data, tpl_matrix, mode="valid")
        if note_counts is None:
            note_counts = note_count_map(notes, (h, w))
        values = numerator / (n_bases + note_counts)
    elif measure == Measure.ZNCC:
        centered = tpl_matrix - tpl_matrix.mean()
        sigma_t = tpl_matrix.std()
        sums = box_sum(data, h, w)
        var_w = np.maximum(box_sum(data ** 2, h, w) / n - (sums / n) ** 2, 0.0)
        sigma_w = np.sqrt(var_w)
        numerator = correlate(data, centered, mode="valid") / n
        with np.errstate(divide="ignore", invalid="ignore"):
            values = numerator / (sigma_w * sigma_t)
        values[(sigma_w < 1e-9) | (sigma_t < _EPS) | ~np.isfinite(values)] = 0.0
        values = np.clip(values, -1.0, 1.0)
    else:
        cross = correlate(data, tpl_matrix, mode="valid")
        sq = box_sum(data ** 2, h, w) - 2 * cross + np.sum(tpl_matrix ** 2)
        values = np.sqrt(np.maximum(sq, 0.0) / n)
    return np.round(values, SCORE_DECIMALS)


def response_map(roll: MatrixLike, tpl: Template, transform: TransformParams, measure: Measure = Measure.BACC,
                 diffuse_cfg: Optional[DiffuseConfig] = None) -> ResponseMap:
    """Evaluate ``measure`` at every valid placement of the transformed template.

    With ``diffuse_cfg`` the roll (not the template) is blurred first; BACC
    note counts still come from the sharp roll.
    """
    sharp = _matrix(roll)
    shaped = apply_transform(tpl, transform)
    data = diffuse(sharp, diffuse_cfg) if diffuse_cfg is not None else sharp
    values = measure_map(data, sharp, template_matrix(shaped), shaped.n_bases, measure)
    return ResponseMap(values, Measure(measure), tpl.id, transform)
