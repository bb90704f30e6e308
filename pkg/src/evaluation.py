"""Scoring discovered music-words against annotations, and usage statistics."""
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import adjusted_rand_score, homogeneity_completeness_v_measure

from src.encoder import SparseCode
from src.errors import InputError, InsufficientDataError, UndefinedMetricError
from src.midi_ingest import PianoRoll

logger = logging.getLogger(__name__)

NoteKey = Tuple[int, int]
UNCLAIMED = "none"


@dataclass(frozen=True)
class AnnotatedNote:
    """Pitch is absolute MIDI; onset and duration are batch columns."""
    pitch: int
    onset: int
    duration: int = 1
    instance_id: Optional[str] = None
    class_id: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.instance_id is not None


@dataclass
class Annotation:
    batch: int
    notes: List[AnnotatedNote] = field(default_factory=list)
    boundaries: List[int] = field(default_factory=list)

    def instances(self, pitch_low: int = 0) -> Dict[str, Set[NoteKey]]:
        groups: Dict[str, Set[NoteKey]] = {}
        for n in self.notes:
            if n.labeled:
                groups.setdefault(n.instance_id, set()).add((n.pitch - pitch_low, n.onset))
        return groups

    def to_dict(self) -> Dict:
        return {"batch": self.batch, "notes": [asdict(n) for n in self.notes], "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Annotation":
        notes = []
        for n in data.get("notes", []):
            instance = n.get("instance_id")
            label = n.get("class_id")
            notes.append(AnnotatedNote(
                int(n["pitch"]), int(n["onset"]), int(n.get("duration", 1)),
                None if instance is None else str(instance),
                None if label is None else str(label),
            ))
        return cls(int(data["batch"]), notes, [int(b) for b in data.get("boundaries", [])])


def load_annotations(source: Union[str, Path, Dict, List]) -> Dict[int, Annotation]:
    """Read annotation JSON: one batch object, a list of them, or ``{"batches": [...]}``."""
    data = source
    if isinstance(source, (str, Path)):
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InputError(f"invalid annotation JSON {source}: {e}") from e
    if isinstance(data, dict):
        data = data.get("batches", [data])
    try:
        annotations = [Annotation.from_dict(d) for d in data]
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"malformed annotation: {e}") from e
    return {a.batch: a for a in annotations}


@dataclass
class MetricsRow:
    batch: Union[int, str]
    iou: float
    homogeneity: float
    completeness: float
    v_measure: float
    ari: float
    seg_f1: float
    rmse: float
    seconds_per_epoch: float = 0.0


@dataclass
class FrequencyHistogram:
    ranked: List[Tuple[int, int]]
    top3_fraction: float

    @property
    def counts(self) -> List[int]:
        return [c for _, c in self.ranked]


@dataclass
class PowerLawFit:
    alpha: float
    p_value: float
    intercept: float
    r_value: float
    ranks: List[int]
    frequencies: List[float]


def _claimed_notes(code: SparseCode, roll: PianoRoll) -> List[Set[NoteKey]]:
    """Per placement, the (row, onset) keys of roll notes touching its claimed cells."""
    owner = {}
    for run in roll.notes():
        for col in range(run.start, run.end):
            owner[(run.row, col)] = (run.row, run.start)
    return [{owner[c] for c in p.claimed_cells if c in owner} for p in code.placements]


def instance_iou(predicted: Sequence[Set[Hashable]], truth: Sequence[Set[Hashable]]) -> float:
    """Mean IoU after greedy one-to-one pairing; unmatched instances on either side count as 0."""
    predicted = [set(p) for p in predicted if p]
    truth = [set(t) for t in truth if t]
    if not truth and not predicted:
        raise UndefinedMetricError("no instances to compare")
    pairs = []
    for i, p in enumerate(predicted):
        for j, t in enumerate(truth):
            inter = len(p & t)
            if inter:
                pairs.append((inter / len(p | t), i, j))
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_p, used_t, total = set(), set(), 0.0
    for iou, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        total += iou
    return total / (len(predicted) + len(truth) - len(used_p))


def note_iou(code: SparseCode, ann: Annotation, roll: PianoRoll) -> float:
    truth = list(ann.instances(roll.pitch_low).values())
    if not truth:
        raise UndefinedMetricError(f"batch {ann.batch} has no annotated instances")
    return instance_iou(_claimed_notes(code, roll), truth)


def clustering_scores(true_labels: Sequence, pred_labels: Sequence) -> Tuple[float, float, float, float]:
    """(homogeneity, completeness, v_measure, ari) of two labelings of the same notes."""
    if len(true_labels) != len(pred_labels):
        raise InputError("label vectors differ in length")
    if not len(true_labels):
        raise UndefinedMetricError("no labeled notes")
    truth = [str(x) for x in true_labels]
    pred = [str(x) for x in pred_labels]
    hom, com, v = homogeneity_completeness_v_measure(truth, pred)
    return float(hom), float(com), float(v), float(adjusted_rand_score(truth, pred))


def _note_labels(code: SparseCode, ann: Annotation, roll: PianoRoll) -> Tuple[List[str], List[str]]:
    claims: Dict[NoteKey, str] = {}
    for p, notes in zip(code.placements, _claimed_notes(code, roll)):
        for key in notes:
            claims.setdefault(key, str(p.template_id))
    truth, pred = [], []
    for n in ann.notes:
        if n.class_id is None:
            continue
        truth.append(n.class_id)
        pred.append(claims.get((n.pitch - roll.pitch_low, n.onset), UNCLAIMED))
    return truth, pred


def clustering_metrics(codes: Sequence[SparseCode], annotations: Dict[int, Annotation],
                       rolls: Sequence[PianoRoll]) -> Tuple[float, float, float, float]:
    """Clustering scores over every annotated note; unclaimed notes share the "none" cluster."""
    by_batch = {r.batch: r for r in rolls}
    truth, pred = [], []
    for code in codes:
        if code.batch not in annotations:
            continue
        t, p = _note_labels(code, annotations[code.batch], by_batch[code.batch])
        truth.extend(t)
        pred.extend(p)
    return clustering_scores(truth, pred)


def predicted_boundaries(code: SparseCode) -> List[int]:
    return sorted({p.start for p in code.placements} | {p.end for p in code.placements})


def boundary_f1(predicted: Sequence[int], truth: Sequence[int], tolerance: int = 12) -> float:
    """F1 with one-to-one matching of boundaries no more than ``tolerance`` columns apart."""
    truth = sorted(set(truth))
    predicted = sorted(set(predicted))
    if not truth:
        raise UndefinedMetricError("no annotated boundaries")
    if not predicted:
        return 0.0
    pairs = sorted(
        (abs(p - t), i, j)
        for i, p in enumerate(predicted)
        for j, t in enumerate(truth)
        if abs(p - t) <= tolerance
    )
    used_p, used_t = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
    hits = len(used_p)
    if hits == 0:
        return 0.0
    precision, recall = hits / len(predicted), hits / len(truth)
    return 2 * precision * recall / (precision + recall)


def segmentation_f1(code: SparseCode, boundaries: Sequence[int], tolerance: int = 12) -> float:
    return boundary_f1(predicted_boundaries(code), boundaries, tolerance)


def frequency_histogram(codes: Sequence[SparseCode]) -> FrequencyHistogram:
    counts = Counter()
    for code in codes:
        counts.update(code.usage())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(counts.values())
    top3 = sum(c for _, c in ranked[:3]) / total if total else 0.0
    return FrequencyHistogram(ranked, top3)


def fit_power_law(hist: Union[FrequencyHistogram, Sequence[int]]) -> PowerLawFit:
    """Least squares of log frequency on log rank; ``alpha`` is minus the slope."""
    counts = hist.counts if isinstance(hist, FrequencyHistogram) else list(hist)
    freqs = sorted((float(c) for c in counts if c >= 1), reverse=True)
    if len(freqs) < 5:
        raise InsufficientDataError(f"power-law fit needs at least 5 nonzero ranks, got {len(freqs)}")
    ranks = np.arange(1, len(freqs) + 1)
    fit = stats.linregress(np.log(ranks), np.log(freqs))
    p_value = float(fit.pvalue) if np.isfinite(fit.pvalue) else 1.0
    return PowerLawFit(
        alpha=-float(fit.slope),
        p_value=p_value,
        intercept=float(fit.intercept),
        r_value=float(fit.rvalue),
        ranks=ranks.tolist(),
        frequencies=freqs,
    )


def evaluate_codes(codes: Sequence[SparseCode], annotations: Dict[int, Annotation], rolls: Sequence[PianoRoll],
                   seconds_per_epoch: float = 0.0) -> pd.DataFrame:
    """One MetricsRow per annotated batch plus a trailing ``mean`` row."""
    code_batches = {c.batch for c in codes}
    missing = sorted(set(annotations) - code_batches)
    extra = sorted(b for b in code_batches - set(annotations))
    if missing:
        raise InputError(f"annotated batches without codes: {missing}")
    if extra:
        logger.warning("batches without annotations are skipped: %s", extra)
    by_batch = {r.batch: r for r in rolls}
    rows = []
    for code in sorted(codes, key=lambda c: c.batch):
        ann = annotations.get(code.batch)
        if ann is None:
            continue
        roll = by_batch[code.batch]
        truth, pred = _note_labels(code, ann, roll)
        hom, com, v, ari = clustering_scores(truth, pred) if truth else (np.nan,) * 4
        try:
            iou = note_iou(code, ann, roll)
        except UndefinedMetricError:
            iou = np.nan
        seg = segmentation_f1(code, ann.boundaries) if ann.boundaries else np.nan
        rows.append(MetricsRow(code.batch, iou, hom, com, v, ari, seg, code.rmse, seconds_per_epoch))
    frame = pd.DataFrame([asdict(r) for r in rows])
    if not frame.empty:
        means = frame.drop(columns="batch").mean(numeric_only=True).to_dict()
        frame = pd.concat([frame, pd.DataFrame([{"batch": "mean", **means}])], ignore_index=True)
    return frame


def roll_from_code(code: SparseCode) -> PianoRoll:
    """Binary roll of the notes a code was computed on: claimed cells plus the residual."""
    data = (np.asarray(code.residual) > 0).astype(np.float64)
    for p in code.placements:
        for r, c in p.claimed_cells:
            data[r, c] = 1.0
    return PianoRoll(data, ticks_per_beat=1, pitch_low=code.pitch_low, batch=code.batch)
