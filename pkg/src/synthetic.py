"""Planted corpora for tests and demos.

Everything is generated at the target resolution (one tick = one roll
column) and then pushed through the same ``build_rolls`` path real MIDI
takes, so rolls, annotations and MIDI bytes always agree.
"""
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import mido
import numpy as np

from src.config import BatchSpec
from src.evaluation import AnnotatedNote, Annotation
from src.lexicon import Basis, Template, TransformParams, apply_transform
from src.midi_ingest import NoteEvent, PianoRoll, build_rolls

logger = logging.getLogger(__name__)

# unit intensity in the roll, so exact matches score their full cell mass
VELOCITY = 127


@dataclass
class SyntheticCorpus:
    templates: List[Template]
    events: List[NoteEvent]
    annotations: Dict[int, Annotation]
    spec: BatchSpec
    rolls: List[PianoRoll] = field(default_factory=list)

    def __post_init__(self):
        if not self.rolls:
            self.rolls = build_rolls(self.events, self.spec, source_tpb=self.spec.target_ticks_per_beat)

    def to_midi(self, ticks_per_beat: int = 480) -> bytes:
        """SMF bytes at ``ticks_per_beat`` (must be a multiple of the target resolution)."""
        factor = ticks_per_beat // self.spec.target_ticks_per_beat
        scaled = [NoteEvent(e.pitch, e.onset * factor, e.duration * factor, e.velocity, e.channel) for e in self.events]
        return write_midi(scaled, ticks_per_beat)


def write_midi(events: Sequence[NoteEvent], ticks_per_beat: int = 480) -> bytes:
    """Single-track SMF with note_off written before note_on at equal ticks."""
    midi = mido.MidiFile(ticks_per_beat=ticks_per_beat)
    track = mido.MidiTrack()
    midi.tracks.append(track)
    track.append(mido.MetaMessage("set_tempo", tempo=500000, time=0))
    timeline = []
    for e in events:
        timeline.append((e.onset, 1, "note_on", e))
        timeline.append((e.end, 0, "note_off", e))
    timeline.sort(key=lambda item: (item[0], item[1], item[3].pitch))
    now = 0
    for tick, _, kind, e in timeline:
        track.append(mido.Message(kind, note=e.pitch, velocity=e.velocity if kind == "note_on" else 0,
                                  channel=e.channel, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def random_template(id: int, rng: np.random.Generator, n_bases: Tuple[int, int] = (3, 6),
                    box: Tuple[int, int] = (10, 20), max_duration: int = 4) -> Template:
    """Random bases in a ``box`` (rows, cols); notes sharing a row never touch."""
    n = int(rng.integers(n_bases[0], n_bases[1] + 1))
    while True:
        bases: List[Basis] = []
        for _ in range(200):
            if len(bases) == n:
                break
            d = int(rng.integers(1, max_duration + 1))
            b = Basis(int(rng.integers(0, box[1] - d + 1)), int(rng.integers(0, box[0])), d)
            if all(o.p != b.p or b.x > o.x + o.d or o.x > b.x + b.d for o in bases):
                bases.append(b)
        tpl = Template.build(id, bases)
        if tpl.n_bases == n and len({b.x for b in tpl.bases}) > 1:
            return tpl


def _layout(spec: BatchSpec, items: Sequence[Tuple[Template, int]], rng: np.random.Generator, gap: int,
            spurious: float, tag: str = "") -> Tuple[List[NoteEvent], Dict[int, Annotation]]:
    cols, rows = spec.batch_columns, spec.pitch_rows
    low = spec.pitch_range[0]
    events: List[NoteEvent] = []
    annotations: Dict[int, Annotation] = {}
    cursor = 0
    for k, (shaped, class_id) in enumerate(items):
        start = cursor + int(rng.integers(0, 2))
        if start % cols + shaped.width + gap > cols:
            start = (start // cols + 1) * cols
        row = int(rng.integers(0, rows - shaped.height + 1))
        batch = start // cols
        ann = annotations.setdefault(batch, Annotation(batch))
        ann.boundaries.extend([start - batch * cols, start - batch * cols + shaped.width])
        for b in shaped.bases:
            onset = start + b.x
            events.append(NoteEvent(low + row + b.p, onset, b.d, VELOCITY))
            ann.notes.append(AnnotatedNote(low + row + b.p, onset - batch * cols, b.d, f"{tag}{class_id}-{k}", str(class_id)))
        cursor = start + shaped.width + gap
        if spurious and rng.random() < spurious * shaped.n_bases:
            onset = start + shaped.width + gap // 2
            if onset // cols == batch:
                events.append(NoteEvent(low + int(rng.integers(0, rows)), onset, 1, VELOCITY))
                ann.notes.append(AnnotatedNote(events[-1].pitch, onset - batch * cols, 1))
    for ann in annotations.values():
        ann.boundaries = sorted(set(ann.boundaries))
    return events, annotations


def planted_corpus(n_templates: int = 3, instances: int = 10, n_bases: Tuple[int, int] = (3, 6),
                   flips: Sequence[int] = (0, 1), spurious: float = 0.0, seed: int = 0,
                   spec: Optional[BatchSpec] = None, gap: int = 6) -> SyntheticCorpus:
    """``instances`` copies of each of ``n_templates`` random templates at random pitch, optionally flipped.

    With ``spurious`` > 0 roughly that fraction of extra single notes
    (relative to planted notes) is dropped into the gaps, unlabeled.
    """
    rng = np.random.default_rng(seed)
    spec = spec or BatchSpec(pitch_range=(40, 80))
    templates = [random_template(t, rng, n_bases) for t in range(n_templates)]
    items = []
    for t, tpl in enumerate(templates):
        for _ in range(instances):
            flip = int(rng.choice(list(flips)))
            items.append((apply_transform(tpl, TransformParams(t, F=flip)), t))
    order = rng.permutation(len(items))
    events, annotations = _layout(spec, [items[i] for i in order], rng, gap, spurious)
    logger.info("planted corpus: %d templates, %d notes", n_templates, len(events))
    return SyntheticCorpus(templates, events, annotations, spec)


def zipf_counts(n_templates: int = 20, draws: int = 100_000, alpha: float = 1.0, seed: int = 0) -> np.ndarray:
    """Usage counts of ``n_templates`` ranks drawn with probability proportional to rank**-alpha."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, n_templates + 1, dtype=np.float64)
    p = ranks ** -alpha
    return np.bincount(rng.choice(n_templates, size=draws, p=p / p.sum()), minlength=n_templates)


def _tile(bases: Sequence[Tuple[int, int]], id: int, d: int = 2) -> Template:
    return Template.build(id, [Basis(x, p, d) for x, p in bases])


def two_voice_batch(spec: Optional[BatchSpec] = None) -> SyntheticCorpus:
    """Two three-note templates whose instances share one note."""
    spec = spec or BatchSpec(batch_length_ticks=3200, pitch_range=(40, 80))
    first = _tile([(0, 0), (4, 4), (8, 8)], 0)
    second = _tile([(0, 3), (4, 0), (8, 6)], 1)
    low = spec.pitch_range[0]
    placed = [(first, 10, 4, "0"), (second, 15, 12, "1")]
    events, notes = {}, []
    boundaries = sorted({edge for tpl, _, col, _ in placed for edge in (col, col + tpl.width)})
    for tpl, row, col, label in placed:
        for b in tpl.bases:
            key = (low + row + b.p, col + b.x)
            events[key] = NoteEvent(key[0], key[1], b.d, VELOCITY)
            notes.append(AnnotatedNote(key[0], key[1], b.d, f"{label}-0", label))
    return SyntheticCorpus([first, second], sorted(events.values(), key=lambda e: (e.onset, e.pitch)),
                           {0: Annotation(0, notes, boundaries)}, spec)


def phrase_corpus(repeats: int = 2, spec: Optional[BatchSpec] = None) -> SyntheticCorpus:
    """A phrase made of two motifs, repeated; templates are [phrase, motif A, motif B]."""
    spec = spec or BatchSpec(batch_length_ticks=9600, pitch_range=(40, 80))
    motif_a = [(0, 0), (4, 3), (8, 6)]
    motif_b = [(0, 5), (5, 1), (10, 4)]
    phrase = _tile(motif_a + [(x + 20, p) for x, p in motif_b], 0)
    templates = [phrase, _tile(motif_a, 1), _tile(motif_b, 2)]
    low = spec.pitch_range[0]
    events, notes = [], []
    for k in range(repeats):
        row, col = 8 + 4 * k, 10 + 60 * k
        for b in phrase.bases:
            label = "1" if b.x < 20 else "2"
            events.append(NoteEvent(low + row + b.p, col + b.x, b.d, VELOCITY))
            notes.append(AnnotatedNote(low + row + b.p, col + b.x, b.d, f"{label}-{k}", label))
    return SyntheticCorpus(templates, events, {0: Annotation(0, notes)}, spec)
