"""Exponential-family response model for template bases.

A basis' response ``c`` at a placement is the intensity mass under its cells
divided by the larger of its duration and the length of the note runs it
touches, so an exact note scores its intensity and sloppy overlaps score
less. Responses pass through the saturating activation ``h(r) = xi*tanh(r/xi)``
applied to ``r = c**2``. The background distribution q(c) is estimated
empirically from random placements; the normalizer Z(lambda) = E_q[exp(lambda*h)]
is tabulated once on a lambda grid.
"""
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from src.config import SCHEMA_VERSION, StatConfig
from src.errors import ContractViolation, InputError, ReferenceDegenerateError
from src.midi_ingest import PianoRoll

logger = logging.getLogger(__name__)

_HORIZONTAL = np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]])


def h(r, xi: float):
    """Saturating activation ``xi * tanh(r / xi)``; works on scalars and arrays."""
    if xi <= 0:
        raise ContractViolation(f"xi must be positive, got {xi}")
    out = xi * np.tanh(np.asarray(r, dtype=np.float64) / xi)
    return float(out) if np.ndim(out) == 0 else out


class RunIndex:
    """Labels maximal horizontal note runs of a matrix so responses can find run lengths."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.labels, n = ndimage.label(self.matrix > 0, structure=_HORIZONTAL)
        self.lengths = np.bincount(self.labels.ravel(), minlength=n + 1)
        self.lengths[0] = 0

    @classmethod
    def normalized(cls, matrix: np.ndarray) -> "RunIndex":
        """Index of ``matrix`` scaled so its largest intensity is 1."""
        matrix = np.asarray(matrix, dtype=np.float64)
        top = matrix.max() if matrix.size else 0.0
        return cls(matrix / top if top > 0 else matrix)


def basis_response(index: RunIndex, row: int, col: int, d: int) -> float:
    """Response c of a basis covering ``[col, col + d)`` on ``row``."""
    rows, cols = index.matrix.shape
    if d < 1 or not 0 <= row < rows:
        return 0.0
    lo, hi = max(0, col), min(cols, col + d)
    if lo >= hi:
        return 0.0
    mass = float(index.matrix[row, lo:hi].sum())
    if mass <= 0:
        return 0.0
    touched = np.unique(index.labels[row, lo:hi])
    covered = int(index.lengths[touched[touched > 0]].sum())
    return mass / max(d, covered)


@dataclass
class ReferenceModel:
    """Tabulated log Z(lambda) and E[h] under the background, on an evenly spaced lambda grid."""
    xi: float
    lambda_grid: np.ndarray
    log_z: np.ndarray
    mean_h: np.ndarray
    n_samples: int = 0

    @classmethod
    def from_responses(cls, responses: Sequence[float], cfg: StatConfig) -> "ReferenceModel":
        c = np.asarray(responses, dtype=np.float64)
        if c.size == 0:
            raise ReferenceDegenerateError("no background responses to estimate q(c) from")
        hv = h(c ** 2, cfg.xi)
        if not np.any(hv > 0):
            raise ReferenceDegenerateError("background responses are all zero")
        values, counts = np.unique(hv, return_counts=True)
        n_steps = int(round(cfg.lambda_max / cfg.lambda_step))
        grid = np.linspace(0.0, cfg.lambda_max, n_steps + 1)
        # exponent[j, k] = lambda_j * h_k + log(count_k)
        exponent = np.outer(grid, values) + np.log(counts)[None, :]
        log_z = logsumexp(exponent, axis=1) - np.log(c.size)
        weights = np.exp(exponent - logsumexp(exponent, axis=1, keepdims=True))
        mean_h = weights @ values
        log_z[0] = 0.0
        return cls(cfg.xi, grid, log_z, np.maximum.accumulate(mean_h), int(c.size))

    def log_z_at(self, lam: Union[float, np.ndarray]):
        out = np.interp(lam, self.lambda_grid, self.log_z)
        return float(out) if np.ndim(out) == 0 else out

    def z_at(self, lam: float) -> float:
        return float(np.exp(self.log_z_at(lam)))

    @property
    def lambda_max(self) -> float:
        return float(self.lambda_grid[-1])

    def to_dict(self) -> Dict:
        return {
            "schema": SCHEMA_VERSION,
            "xi": self.xi,
            "lambda_max": self.lambda_max,
            "n_grid": int(self.lambda_grid.size),
            "log_z": self.log_z.tolist(),
            "mean_h": self.mean_h.tolist(),
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "ReferenceModel":
        grid = np.linspace(0.0, float(data["lambda_max"]), int(data["n_grid"]))
        log_z = np.asarray(data["log_z"], dtype=np.float64)
        mean_h = np.asarray(data["mean_h"], dtype=np.float64)
        if log_z.shape != grid.shape or mean_h.shape != grid.shape:
            raise InputError("reference tables do not match the lambda grid")
        return cls(float(data["xi"]), grid, log_z, mean_h, int(data.get("n_samples", 0)))


@dataclass
class LambdaEstimate:
    lambdas: np.ndarray
    mean_h: np.ndarray

    def __len__(self):
        return len(self.lambdas)


def _run_lengths(rolls: List[np.ndarray]) -> np.ndarray:
    lengths = []
    for m in rolls:
        idx = RunIndex(m)
        lengths.extend(idx.lengths[1:].tolist())
    return np.asarray(lengths, dtype=np.int64)


def estimate_reference(background_rolls: Sequence[Union[PianoRoll, np.ndarray]], cfg: StatConfig,
                       rng: Optional[np.random.Generator] = None) -> ReferenceModel:
    """Sample basis responses at random placements of the background rolls.

    Rows are drawn from each roll's occupied pitch band and durations from
    the corpus' own run-length distribution.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    matrices = [r.data if isinstance(r, PianoRoll) else np.asarray(r, dtype=np.float64) for r in background_rolls]
    matrices = [m for m in matrices if m.size and m.max() > 0]
    if not matrices:
        raise ReferenceDegenerateError("background rolls are empty or all zero")
    indexes = [RunIndex.normalized(m) for m in matrices]
    durations = _run_lengths(matrices)
    bands = []
    for m in matrices:
        occupied = np.nonzero(m.max(axis=1) > 0)[0]
        bands.append((int(occupied.min()), int(occupied.max()) + 1))

    picks = rng.integers(0, len(indexes), size=cfg.q_samples)
    ds = rng.choice(durations, size=cfg.q_samples)
    samples = np.empty(cfg.q_samples)
    for i, (k, d) in enumerate(zip(picks, ds)):
        index = indexes[k]
        lo, hi = bands[k]
        row = int(rng.integers(lo, hi))
        col = int(rng.integers(0, max(1, index.matrix.shape[1] - int(d) + 1)))
        samples[i] = basis_response(index, row, col, int(d))
    logger.debug("background: %d samples, %.3f nonzero", samples.size, np.mean(samples > 0))
    return ReferenceModel.from_responses(samples, cfg)


def fit_lambda(responses, ref: ReferenceModel, cfg: Optional[StatConfig] = None) -> LambdaEstimate:
    """Moment-match one lambda per basis.

    ``responses`` is either a flat list of c values for one basis or a
    ``(n_bases, n_instances)`` nested sequence.
    """
    c = np.asarray(responses, dtype=np.float64)
    if c.size == 0:
        raise InputError("fit_lambda needs at least one response")
    if c.ndim == 1:
        c = c[None, :]
    xi = cfg.xi if cfg is not None else ref.xi
    h_bar = np.asarray(h(c ** 2, xi)).mean(axis=1)
    lambdas = np.empty_like(h_bar)
    for i, target in enumerate(h_bar):
        if target <= ref.mean_h[0]:
            lambdas[i] = 0.0
        elif target >= ref.mean_h[-1]:
            lambdas[i] = ref.lambda_max
        else:
            lambdas[i] = np.interp(target, ref.mean_h, ref.lambda_grid)
    return LambdaEstimate(lambdas, h_bar)


def log_likelihood_ratio(responses, lambdas: Union[LambdaEstimate, Sequence[float]], ref: ReferenceModel) -> float:
    """Sum over instances and bases of ``lambda_i * h(c**2) - log Z(lambda_i)``.

    ``responses`` is ``(n_instances, n_bases)``; zero instances give 0.
    """
    lam = np.asarray(lambdas.lambdas if isinstance(lambdas, LambdaEstimate) else lambdas, dtype=np.float64)
    c = np.asarray(responses, dtype=np.float64)
    if c.size == 0:
        return 0.0
    if c.ndim == 1:
        c = c[None, :]
    if c.shape[1] != lam.size:
        raise ContractViolation(f"{c.shape[1]} responses per instance for {lam.size} lambdas")
    per_cell = lam[None, :] * h(c ** 2, ref.xi) - ref.log_z_at(lam)[None, :]
    return float(per_cell.sum())
