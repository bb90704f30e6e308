"""Bases, templates (music-words), geometric transforms and rendering.

Coordinates follow the piano roll: ``x`` counts columns (time) from the
template's left edge and ``p`` counts rows (pitch) from its top edge. A
template is always stored with a tight bounding box.
"""
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from src.config import DeltaBounds
from src.errors import ContractViolation, TransformDegenerateError
from src.numeric import round_half_away

logger = logging.getLogger(__name__)

FLIP_NAMES = {0: "original", 1: "horizontal", 2: "vertical", 3: "diagonal"}


class RenderClippedWarning(UserWarning):
    """A placement put every basis outside the target matrix."""


@dataclass(frozen=True)
class Basis:
    """One note primitive: onset x, pitch row p, duration d and weight (lambda)."""
    x: int
    p: int
    d: int
    weight: float = 1.0

    def cells(self) -> Iterable[Tuple[int, int]]:
        for col in range(self.x, self.x + self.d):
            yield self.p, col


@dataclass(frozen=True)
class Template:
    """A music-word: weighted bases inside a tight ``height x width`` box."""
    id: int
    bases: Tuple[Basis, ...]
    height: int
    width: int

    @classmethod
    def build(cls, id: int, bases: Iterable[Basis], dedupe: bool = True) -> "Template":
        """Tight-crop ``bases`` into a template.

        With ``dedupe`` bases sharing an onset cell are merged (longest
        duration, largest weight), which is how templates built from data
        keep one basis per (x, p).
        """
        template, _ = _tighten(id, list(bases), dedupe=dedupe)
        return template

    def with_id(self, id: int) -> "Template":
        return Template(id, self.bases, self.height, self.width)

    @property
    def n_bases(self) -> int:
        return len(self.bases)

    def signature(self) -> Tuple[Tuple[int, int, int], ...]:
        """Shape of the template ignoring weights and id."""
        return tuple(sorted((b.x, b.p, b.d) for b in self.bases))

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "height": self.height,
            "width": self.width,
            "bases": [asdict(b) for b in self.bases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "Template":
        bases = [Basis(int(b["x"]), int(b["p"]), int(b["d"]), float(b.get("weight", 1.0))) for b in data["bases"]]
        template = cls.build(int(data["id"]), bases, dedupe=False)
        if (template.height, template.width) != (data.get("height", template.height), data.get("width", template.width)):
            raise ContractViolation(f"template {data['id']} bounding box does not match its bases")
        return template


@dataclass(frozen=True)
class TransformParams:
    """Global transform of a template: offsets X (time) / P (pitch), flip F, scalings D and A."""
    t: int
    X: int = 0
    P: int = 0
    F: int = 0
    D: float = 1.0
    A: float = 1.0

    def at(self, row: int, col: int) -> "TransformParams":
        return TransformParams(self.t, col, row, self.F, self.D, self.A)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TransformParams":
        return cls(int(data["t"]), int(data["X"]), int(data["P"]), int(data["F"]), float(data["D"]), float(data["A"]))


@dataclass(frozen=True)
class BasisDeltas:
    """Per-basis (dx, dp, dd) fine-tuning, one triple per template basis."""
    values: Tuple[Tuple[int, int, int], ...] = field(default_factory=tuple)

    @classmethod
    def zeros(cls, n: int) -> "BasisDeltas":
        return cls(tuple((0, 0, 0) for _ in range(n)))

    def to_list(self) -> List[List[int]]:
        return [list(v) for v in self.values]

    @classmethod
    def from_list(cls, values) -> "BasisDeltas":
        return cls(tuple(tuple(int(x) for x in v) for v in values))


def _tighten(id: int, bases: List[Basis], dedupe: bool) -> Tuple[Template, Tuple[int, int]]:
    """Shift bases so the box is tight; return the template and the (row, col) shift removed."""
    if not bases:
        raise ContractViolation(f"template {id} needs at least one basis")
    for b in bases:
        if b.d < 1:
            raise ContractViolation(f"basis duration must be >= 1, got {b.d}")
        if not np.isfinite(b.weight) or b.weight < 0:
            raise ContractViolation(f"basis weight must be finite and >= 0, got {b.weight}")
    if dedupe:
        merged: Dict[Tuple[int, int], Basis] = {}
        for b in bases:
            prev = merged.get((b.x, b.p))
            if prev is None:
                merged[(b.x, b.p)] = b
            else:
                merged[(b.x, b.p)] = Basis(b.x, b.p, max(b.d, prev.d), max(b.weight, prev.weight))
        bases = sorted(merged.values(), key=lambda b: (b.x, b.p, b.d))
    row0 = min(b.p for b in bases)
    col0 = min(b.x for b in bases)
    shifted = tuple(Basis(b.x - col0, b.p - row0, b.d, b.weight) for b in bases)
    height = max(b.p for b in shifted) + 1
    width = max(b.x + b.d for b in shifted)
    return Template(id, shifted, height, width), (row0, col0)


def apply_transform(tpl: Template, params: TransformParams) -> Template:
    """Apply A (onset spacing), then D (durations), then flip F.

    X and P are placement offsets and leave the template coordinates alone.
    Horizontal flip maps ``x -> width - (x + d)`` so the rendered cell set is
    mirrored exactly; the diagonal flip is horizontal followed by vertical.
    """
    if params.t != tpl.id:
        raise ContractViolation(f"transform for template {params.t} applied to template {tpl.id}")
    if params.F not in FLIP_NAMES:
        raise ContractViolation(f"unknown flip code {params.F}")
    if params.D <= 0 or params.A <= 0:
        raise ContractViolation(f"scaling factors must be positive, got D={params.D} A={params.A}")
    if params.F == 0 and params.D == 1 and params.A == 1:
        return tpl

    scaled = [
        Basis(round_half_away(b.x * params.A), b.p, max(1, round_half_away(b.d * params.D)), b.weight)
        for b in tpl.bases
    ]
    if len(scaled) > 1 and len({(b.x, b.p) for b in tpl.bases}) > 1 and len({(b.x, b.p) for b in scaled}) == 1:
        raise TransformDegenerateError(f"A={params.A} collapses every basis of template {tpl.id} onto one cell")
    width = max(b.x + b.d for b in scaled)
    height = max(b.p for b in scaled) + 1
    if params.F in (1, 3):
        scaled = [Basis(width - (b.x + b.d), b.p, b.d, b.weight) for b in scaled]
    if params.F in (2, 3):
        scaled = [Basis(b.x, height - 1 - b.p, b.d, b.weight) for b in scaled]
    template, _ = _tighten(tpl.id, scaled, dedupe=False)
    return template


def _check_deltas(tpl: Template, deltas: BasisDeltas, bounds: DeltaBounds):
    if len(deltas.values) != tpl.n_bases:
        raise ContractViolation(f"{len(deltas.values)} deltas for a template with {tpl.n_bases} bases")
    for dx, dp, dd in deltas.values:
        if abs(dx) > bounds.x or abs(dp) > bounds.p or abs(dd) > bounds.d:
            raise ContractViolation(f"delta ({dx}, {dp}, {dd}) outside bounds {bounds}")


def deform(tpl: Template, deltas: BasisDeltas, bounds: DeltaBounds = DeltaBounds()) -> Tuple[Template, Tuple[int, int]]:
    """Apply per-basis deltas; return the tight template and its (row, col) origin shift."""
    _check_deltas(tpl, deltas, bounds)
    moved = [
        Basis(b.x + dx, b.p + dp, max(1, b.d + dd), b.weight)
        for b, (dx, dp, dd) in zip(tpl.bases, deltas.values)
    ]
    return _tighten(tpl.id, moved, dedupe=False)


def apply_deltas(tpl: Template, deltas: BasisDeltas, bounds: DeltaBounds = DeltaBounds()) -> Template:
    return deform(tpl, deltas, bounds)[0]


def _paint(tpl: Template, height: int, width: int, at: Tuple[int, int], normalized: bool) -> np.ndarray:
    out = np.zeros((height, width), dtype=np.float64)
    values = [b.weight for b in tpl.bases]
    if normalized:
        top = max(values)
        values = [w / top for w in values] if top > 0 else [1.0] * len(values)
    row0, col0 = at
    for b, value in zip(tpl.bases, values):
        r = row0 + b.p
        if not 0 <= r < height:
            continue
        c_lo = max(0, col0 + b.x)
        c_hi = min(width, col0 + b.x + b.d)
        if c_lo < c_hi:
            segment = out[r, c_lo:c_hi]
            np.maximum(segment, value, out=segment)
    return out


def render(tpl: Template, height: int, width: int, at: Tuple[int, int] = (0, 0), normalized: bool = False) -> np.ndarray:
    """Paint ``tpl`` with its top-left corner at ``at = (row, col)`` of a ``height x width`` matrix.

    Each basis paints its weight; overlapping bases keep the max. With
    ``normalized`` the weights are divided by the largest one (a template of
    all-zero weights paints ones). A placement that leaves nothing inside the
    matrix returns zeros and emits ``RenderClippedWarning``.
    """
    out = _paint(tpl, height, width, at, normalized)
    row0, col0 = at
    inside = any(
        0 <= row0 + b.p < height and col0 + b.x < width and col0 + b.x + b.d > 0
        for b in tpl.bases
    )
    if not inside:
        warnings.warn(f"template {tpl.id} placed at {at} lies entirely outside {height}x{width}", RenderClippedWarning)
        logger.warning("template %d placed at %s lies entirely outside the target", tpl.id, at)
    return out


def template_matrix(tpl: Template, normalized: bool = True) -> np.ndarray:
    """The template rendered into its own bounding box."""
    return _paint(tpl, tpl.height, tpl.width, (0, 0), normalized)


def support_cells(tpl: Template, origin: Tuple[int, int], shape: Tuple[int, int], normalized: bool = True) -> Dict[Tuple[int, int], float]:
    """Absolute cells painted by ``tpl`` at ``origin``, clipped to ``shape``, with their values."""
    mat = template_matrix(tpl, normalized)
    rows, cols = np.nonzero(mat)
    row0, col0 = origin
    cells = {}
    for r, c in zip(rows, cols):
        rr, cc = row0 + int(r), col0 + int(c)
        if 0 <= rr < shape[0] and 0 <= cc < shape[1]:
            cells[(rr, cc)] = float(mat[r, c])
    return cells


def transform_grid(scales: Sequence[float], flips: Sequence[int]) -> List[Tuple[int, float, float]]:
    """All (F, D, A) combinations, identity first: flips ascending, scales closest to 1 first."""
    ordered = sorted(set(scales), key=lambda s: (abs(s - 1.0), s))
    return [(f, d, a) for f in sorted(set(flips)) for d in ordered for a in ordered]
