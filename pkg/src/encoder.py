"""Sparse coding of piano rolls with a template dictionary.

Two strategies share the same acceptance rules:

* greedy: every iteration recomputes all response maps on the residual and
  takes the best candidate that survives refinement and filtering.
* efficient: response maps are computed once on the Gaussian-diffused roll,
  local maxima are harvested in one pass and accepted in score order.

A candidate is accepted when its refined score reaches ``significance_s``,
at least ``uniqueness_u`` of the cells it claims are not yet claimed, and the
reconstruction error strictly drops.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage

from src.config import SCHEMA_VERSION, EncoderConfig, Measure, Strategy
from src.errors import ContractViolation, EmptyDictionaryError, TransformDegenerateError
from src.lexicon import (
    BasisDeltas,
    Template,
    TransformParams,
    apply_transform,
    deform,
    support_cells,
    template_matrix,
    transform_grid,
)
from src.midi_ingest import PianoRoll, dense_to_sparse, note_runs, sparse_to_dense
from src.numeric import SCORE_DECIMALS, rmse
from src.similarity import diffuse, measure_map, note_count_map, overlap_map, score_at

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

RESIDUAL_FLOOR = 10.0 ** -SCORE_DECIMALS


@dataclass(frozen=True)
class Placement:
    """One accepted template occurrence.

    ``transform.X``/``transform.P`` locate the transformed template before
    deltas; ``origin`` is where the delta-adjusted template is actually
    painted. ``cells`` holds the painted support with its normalized values.
    """
    transform: TransformParams
    deltas: BasisDeltas
    coefficient: float
    score: float
    origin: Cell
    cells: Tuple[Tuple[Cell, float], ...]
    claimed_cells: FrozenSet[Cell]
    n_bases: int

    @property
    def template_id(self) -> int:
        return self.transform.t

    @property
    def start(self) -> int:
        return min(c for (_, c), _ in self.cells)

    @property
    def end(self) -> int:
        return max(c for (_, c), _ in self.cells) + 1

    @property
    def n_params(self) -> int:
        return 6 + 3 * self.n_bases + 1

    def to_dict(self) -> Dict:
        t = self.transform
        return {
            "t": t.t, "X": t.X, "P": t.P, "F": t.F, "D": t.D, "A": t.A,
            "deltas": self.deltas.to_list(),
            "coef": self.coefficient,
            "score": self.score,
            "origin": list(self.origin),
            "n_bases": self.n_bases,
            "cells": [[r, c, v] for (r, c), v in self.cells],
            "claimed": sorted([r, c] for r, c in self.claimed_cells),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Placement":
        return cls(
            transform=TransformParams.from_dict(data),
            deltas=BasisDeltas.from_list(data.get("deltas", [])),
            coefficient=float(data["coef"]),
            score=float(data["score"]),
            origin=tuple(data["origin"]),
            cells=tuple(((int(r), int(c)), float(v)) for r, c, v in data["cells"]),
            claimed_cells=frozenset((int(r), int(c)) for r, c in data.get("claimed", [])),
            n_bases=int(data["n_bases"]),
        )


@dataclass
class SparseCode:
    """Placements explaining one batch, plus what is left over."""
    batch: int
    shape: Tuple[int, int]
    placements: List[Placement] = field(default_factory=list)
    residual: Optional[np.ndarray] = None
    rmse: float = 0.0
    note_params: int = 0
    pitch_low: int = 0

    def __post_init__(self):
        if self.residual is None:
            self.residual = np.zeros(self.shape)

    @property
    def code_params(self) -> int:
        return sum(p.n_params for p in self.placements)

    def usage(self) -> Counter:
        return Counter(p.template_id for p in self.placements)

    def to_dict(self) -> Dict:
        return {
            "schema": SCHEMA_VERSION,
            "batch": self.batch,
            "shape": list(self.shape),
            "pitch_low": self.pitch_low,
            "placements": [p.to_dict() for p in self.placements],
            "residual_sparse": dense_to_sparse(self.residual),
            "stats": {"rmse": self.rmse, "code_params": self.code_params, "note_params": self.note_params},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "SparseCode":
        shape = tuple(data["shape"])
        stats = data.get("stats", {})
        return cls(
            batch=int(data["batch"]),
            shape=shape,
            placements=[Placement.from_dict(p) for p in data.get("placements", [])],
            residual=sparse_to_dense(shape, data.get("residual_sparse", [])),
            rmse=float(stats.get("rmse", 0.0)),
            note_params=int(stats.get("note_params", 0)),
            pitch_low=int(data.get("pitch_low", 0)),
        )


@dataclass(frozen=True)
class _Shape:
    """A dictionary template under one (F, D, A) transform, rendered and ready to match."""
    index: int
    params: TransformParams
    shaped: Template
    matrix: np.ndarray

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.argwhere(self.matrix > 0)

    @cached_property
    def size(self) -> int:
        return int(np.count_nonzero(self.matrix > 0))


def _templates(dictionary) -> List[Template]:
    templates = list(getattr(dictionary, "templates", dictionary))
    if not templates:
        raise EmptyDictionaryError("cannot encode with an empty dictionary")
    return templates


def _shapes(templates: Sequence[Template], cfg: EncoderConfig, roll_shape: Tuple[int, int]) -> List[_Shape]:
    grid = transform_grid(cfg.scales, cfg.flips)
    shapes = []
    for tpl in templates:
        if cfg.max_template_width is not None and tpl.width > cfg.max_template_width:
            continue
        seen = set()
        for idx, (f, d, a) in enumerate(grid):
            params = TransformParams(tpl.id, 0, 0, f, d, a)
            try:
                shaped = apply_transform(tpl, params)
            except TransformDegenerateError:
                continue
            if shaped.height > roll_shape[0] or shaped.width > roll_shape[1]:
                continue
            key = tuple(sorted((b.x, b.p, b.d, b.weight) for b in shaped.bases))
            if key in seen:
                continue
            seen.add(key)
            shapes.append(_Shape(idx, params, shaped, template_matrix(shaped)))
    return shapes


def _oriented(values: np.ndarray, measure: Measure) -> np.ndarray:
    return 1.0 - values if measure == Measure.RMSE else values


def _per_shape(fn, shapes: List[_Shape], cfg: EncoderConfig, *args) -> List:
    if cfg.n_jobs == 1 or len(shapes) < 2:
        return [fn(s, *args) for s in shapes]
    return Parallel(n_jobs=cfg.n_jobs, prefer="threads")(delayed(fn)(s, *args) for s in shapes)


def _note_counts(shapes: List[_Shape], notes: np.ndarray, measure: Measure) -> Dict[Tuple[int, int], np.ndarray]:
    """BACC n_M maps, one per distinct template box."""
    if measure != Measure.BACC:
        return {}
    return {dims: note_count_map(notes, dims) for dims in sorted({s.matrix.shape for s in shapes})}


def _score_map(shape: _Shape, data: np.ndarray, notes: np.ndarray, counts: Dict, measure: Measure) -> np.ndarray:
    values = measure_map(data, notes, shape.matrix, shape.shaped.n_bases, measure, counts.get(shape.matrix.shape))
    return _oriented(values, measure)


def _overlap(shape: _Shape, matrix: np.ndarray) -> np.ndarray:
    return overlap_map(matrix, shape.matrix)


def _sort_key(score: float, overpaint: int, row: int, col: int, shape: _Shape):
    """Best score first; equal scores go to the placement painting fewer empty cells, then time, pitch, id."""
    return (-score, overpaint, col, row, shape.params.t, shape.index)


class _EncodeState:
    """Residual, composite and claimed-cell bookkeeping for one batch."""

    def __init__(self, original: np.ndarray, cfg: EncoderConfig):
        self.original = original
        self.cfg = cfg
        self.composite = np.zeros_like(original)
        self.residual = original.copy()
        self.claimed: set = set()
        self.error = rmse(original, self.composite)
        self.placements: List[Placement] = []

    def overpaint(self, matrix: np.ndarray, at: Cell) -> int:
        """Template cells at ``at`` that land on empty cells of the original roll."""
        row, col = at
        h, w = matrix.shape
        return int(np.count_nonzero((matrix > 0) & (self.original[row:row + h, col:col + w] <= 0)))

    def claims(self, cells: Iterable[Cell]) -> FrozenSet[Cell]:
        return frozenset(cell for cell in cells if self.original[cell] > 0)

    def is_fresh(self, claimed: FrozenSet[Cell]) -> bool:
        if not claimed:
            return False
        return len(claimed - self.claimed) / len(claimed) >= self.cfg.uniqueness_u

    def refine(self, shape: _Shape, row: int, col: int) -> Tuple[float, BasisDeltas, Template, Cell]:
        """Single-pass coordinate ascent over (dx, dp, dd) per basis on the sharp residual.

        A move is taken when it raises the score, or keeps the score and paints
        fewer empty cells.
        """
        bounds = self.cfg.delta_bounds
        measure = self.cfg.measure
        base = shape.shaped

        def evaluate(values):
            deformed, (dr, dc) = deform(base, BasisDeltas(tuple(map(tuple, values))), bounds)
            at = (row + dr, col + dc)
            matrix = template_matrix(deformed)
            score = score_at(self.residual, self.residual, matrix, deformed.n_bases, at, measure)
            if score is None:
                return None
            return score, -self.overpaint(matrix, at)

        current = [[0, 0, 0] for _ in base.bases]
        best = evaluate(current) or (-np.inf, 0)
        for i in range(base.n_bases):
            for axis, bound in enumerate((bounds.x, bounds.p, bounds.d)):
                chosen = current[i][axis]
                for step in range(1, bound + 1):
                    for v in (-step, step):
                        trial = [list(t) for t in current]
                        trial[i][axis] = v
                        rank = evaluate(trial)
                        if rank is not None and rank > best:
                            best, chosen = rank, v
                current[i][axis] = chosen
        deltas = BasisDeltas(tuple(map(tuple, current)))
        deformed, (dr, dc) = deform(base, deltas, bounds)
        return best[0], deltas, deformed, (row + dr, col + dc)

    def try_accept(self, shape: _Shape, row: int, col: int) -> Optional[Placement]:
        cfg = self.cfg
        # uniqueness is checked on the unrefined support before the delta search
        if not self.is_fresh(self.claims(map(tuple, (shape.offsets + (row, col)).tolist()))):
            return None
        score, deltas, deformed, origin = self.refine(shape, row, col)
        if score < cfg.significance_s:
            return None
        cells = support_cells(deformed, origin, self.original.shape, normalized=True)
        claimed = self.claims(cells)
        if not self.is_fresh(claimed):
            return None

        weights = np.array([cells[c] for c in claimed])
        observed = np.array([self.original[c] for c in claimed])
        denom = float(weights @ weights)
        if denom <= 0:
            return None
        coefficient = float(weights @ observed) / denom
        composite = self.composite.copy()
        for (r, c), v in cells.items():
            composite[r, c] = max(composite[r, c], coefficient * v)
        error = rmse(self.original, composite)
        if not error < self.error:
            return None

        placement = Placement(
            transform=TransformParams(shape.params.t, col, row, shape.params.F, shape.params.D, shape.params.A),
            deltas=deltas,
            coefficient=round(coefficient, SCORE_DECIMALS),
            score=float(score),
            origin=(int(origin[0]), int(origin[1])),
            cells=tuple(sorted(cells.items())),
            claimed_cells=claimed,
            n_bases=deformed.n_bases,
        )
        self.composite = composite
        residual = np.maximum(self.original - composite, 0.0)
        # float leftovers of the coefficient fit are not notes
        residual[residual < RESIDUAL_FLOOR] = 0.0
        self.residual = residual
        self.claimed |= claimed
        self.error = error
        self.placements.append(placement)
        logger.debug("placed template %d at (%d, %d) F=%d D=%.2f A=%.2f score=%.3f",
                     shape.params.t, row, col, shape.params.F, shape.params.D, shape.params.A, score)
        return placement

    def finish(self, roll: PianoRoll) -> SparseCode:
        return SparseCode(
            batch=roll.batch,
            shape=roll.shape,
            placements=self.placements,
            residual=self.residual,
            rmse=self.error,
            note_params=3 * len(note_runs(self.original)),
            pitch_low=roll.pitch_low,
        )


def _candidates(shapes: List[_Shape], scores: List[np.ndarray], overlaps: List[np.ndarray],
                overpaints: List[np.ndarray], threshold: float) -> List[Tuple]:
    found = []
    for shape, score_map, overlap, overpaint in zip(shapes, scores, overlaps, overpaints):
        rows, cols = np.nonzero((score_map >= threshold) & (overlap > 0))
        for r, c in zip(rows.tolist(), cols.tolist()):
            found.append((_sort_key(float(score_map[r, c]), int(overpaint[r, c]), r, c, shape), shape, r, c))
    found.sort(key=lambda item: item[0])
    return found


def encode_greedy(roll: PianoRoll, dictionary, cfg: EncoderConfig = EncoderConfig()) -> SparseCode:
    """Recompute every response map on the residual and accept the best surviving candidate, repeatedly."""
    templates = _templates(dictionary)
    state = _EncodeState(roll.data, cfg)
    if not np.any(roll.data > 0):
        return state.finish(roll)
    shapes = _shapes(templates, cfg, roll.shape)
    overpaints = [s.size - m for s, m in zip(shapes, _per_shape(_overlap, shapes, cfg, roll.data))]
    while len(state.placements) < cfg.max_placements:
        residual = state.residual
        if not np.any(residual > 0):
            break
        counts = _note_counts(shapes, residual, cfg.measure)
        scores = _per_shape(_score_map, shapes, cfg, residual, residual, counts, cfg.measure)
        overlaps = _per_shape(_overlap, shapes, cfg, residual)
        accepted = None
        for _, shape, r, c in _candidates(shapes, scores, overlaps, overpaints, cfg.significance_s):
            accepted = state.try_accept(shape, r, c)
            if accepted is not None:
                break
        if accepted is None:
            break
    return state.finish(roll)


def _harvest(sharp: np.ndarray, blurred: np.ndarray, overlap: np.ndarray, overpaint: np.ndarray,
             radius: int, threshold: float) -> List[Tuple[float, int, int]]:
    """Local maxima of the blurred map, each snapped to the best sharp score nearby.

    Among equal sharp scores the snap prefers fewer empty cells painted, then
    the earliest column and lowest row.
    """
    peaks = blurred == ndimage.maximum_filter(blurred, size=3, mode="constant", cval=-np.inf)
    peaks &= blurred > 0
    found = set()
    rows, cols = sharp.shape
    for r, c in zip(*np.nonzero(peaks)):
        r0, r1 = max(0, r - radius), min(rows, r + radius + 1)
        c0, c1 = max(0, c - radius), min(cols, c + radius + 1)
        window = np.where(overlap[r0:r1, c0:c1] > 0, sharp[r0:r1, c0:c1], -np.inf)
        top = window.max()
        if not np.isfinite(top) or top < threshold:
            continue
        wr, wc = np.nonzero(window == top)
        order = np.lexsort((wr, wc, overpaint[r0:r1, c0:c1][wr, wc]))
        found.add((float(top), int(r0 + wr[order[0]]), int(c0 + wc[order[0]])))
    return sorted(found)


def encode_efficient(roll: PianoRoll, dictionary, cfg: EncoderConfig = EncoderConfig()) -> SparseCode:
    """One pass of diffused response maps; harvested maxima accepted in score order."""
    templates = _templates(dictionary)
    state = _EncodeState(roll.data, cfg)
    if not np.any(roll.data > 0):
        return state.finish(roll)
    shapes = _shapes(templates, cfg, roll.shape)
    original = roll.data
    counts = _note_counts(shapes, original, cfg.measure)
    blurred_roll = diffuse(original, cfg.diffuse)
    sharp_maps = _per_shape(_score_map, shapes, cfg, original, original, counts, cfg.measure)
    blurred_maps = _per_shape(_score_map, shapes, cfg, blurred_roll, original, counts, cfg.measure)
    overlaps = _per_shape(_overlap, shapes, cfg, original)
    radius = cfg.diffuse.kernel_size // 2

    candidates = []
    for shape, sharp, blurred, overlap in zip(shapes, sharp_maps, blurred_maps, overlaps):
        overpaint = shape.size - overlap
        for score, r, c in _harvest(sharp, blurred, overlap, overpaint, radius, cfg.significance_s):
            candidates.append((_sort_key(score, int(overpaint[r, c]), r, c, shape), shape, r, c))
    candidates.sort(key=lambda item: item[0])
    logger.debug("batch %d: harvested %d candidates from %d shapes", roll.batch, len(candidates), len(shapes))

    for _, shape, r, c in candidates:
        if len(state.placements) >= cfg.max_placements or not np.any(state.residual > 0):
            break
        state.try_accept(shape, r, c)
    return state.finish(roll)


def encode(roll: PianoRoll, dictionary, cfg: EncoderConfig = EncoderConfig()) -> SparseCode:
    if cfg.strategy == Strategy.GREEDY:
        return encode_greedy(roll, dictionary, cfg)
    return encode_efficient(roll, dictionary, cfg)


def reconstruct(code: SparseCode, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Max-composite of the coefficient-scaled renders of every placement."""
    shape = tuple(shape or code.shape)
    out = np.zeros(shape)
    for p in code.placements:
        for (r, c), v in p.cells:
            if 0 <= r < shape[0] and 0 <= c < shape[1]:
                out[r, c] = max(out[r, c], p.coefficient * v)
    return out


def reconstruction_error(original, code: SparseCode) -> float:
    matrix = original.data if isinstance(original, PianoRoll) else np.asarray(original, dtype=np.float64)
    if matrix.shape != tuple(code.shape):
        raise ContractViolation(f"roll shape {matrix.shape} does not match code shape {tuple(code.shape)}")
    return rmse(matrix, reconstruct(code, matrix.shape))


def code_length(codes: Iterable[SparseCode]) -> Dict[str, int]:
    """Parameters spent by the codes versus a plain note list (3 numbers per note)."""
    codes = list(codes)
    return {
        "code_params": sum(c.code_params for c in codes),
        "note_params": sum(c.note_params for c in codes),
        "placements": sum(len(c.placements) for c in codes),
    }
