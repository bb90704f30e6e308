"""Standard MIDI File ingestion: note events, quantization and piano-roll batches."""
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import mido
import numpy as np

from src.config import SCHEMA_VERSION, BatchSpec
from src.errors import ContractViolation, InputError, MidiParseError
from src.numeric import round_half_away

logger = logging.getLogger(__name__)

PERCUSSION_CHANNEL = 9


@dataclass(frozen=True)
class NoteEvent:
    """One sounding note, timed in ticks."""
    pitch: int
    onset: int
    duration: int
    velocity: int
    channel: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ContractViolation(f"pitch out of range: {self.pitch}")
        if not 0 <= self.velocity <= 127:
            raise ContractViolation(f"velocity out of range: {self.velocity}")
        if not 0 <= self.channel <= 15:
            raise ContractViolation(f"channel out of range: {self.channel}")
        if self.onset < 0:
            raise ContractViolation(f"negative onset: {self.onset}")
        if self.duration < 1:
            raise ContractViolation(f"duration must be >= 1, got {self.duration}")

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass
class MidiScore:
    """Result of reading an SMF: resolution, notes and how many note-ons never closed."""
    ticks_per_beat: int
    notes: List[NoteEvent]
    dangling: int = 0


class NoteRun(NamedTuple):
    """A maximal horizontal run of positive cells on one piano-roll row."""
    row: int
    start: int
    length: int
    intensity: float

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class PianoRoll:
    """Dense pitch x time intensity matrix for one batch.

    Row ``r`` holds MIDI pitch ``pitch_low + r``; column ``c`` covers source
    ticks ``origin_tick + c * time_step_ticks`` onwards.
    """
    data: np.ndarray
    ticks_per_beat: int
    time_step_ticks: int = 1
    origin_tick: int = 0
    pitch_low: int = 0
    batch: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractViolation("piano roll must be a 2-D matrix")
        if np.any(self.data < 0):
            raise ContractViolation("piano roll intensities must be non-negative")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def notes(self) -> List[NoteRun]:
        return note_runs(self.data)

    def with_data(self, data: np.ndarray) -> "PianoRoll":
        return PianoRoll(data, self.ticks_per_beat, self.time_step_ticks, self.origin_tick, self.pitch_low, self.batch)

    def to_dict(self) -> Dict:
        rows, cols = np.nonzero(self.data)
        cells = [[int(r), int(c), float(self.data[r, c])] for r, c in zip(rows, cols)]
        return {
            "schema": SCHEMA_VERSION,
            "batch": self.batch,
            "ticks_per_beat": self.ticks_per_beat,
            "time_step_ticks": self.time_step_ticks,
            "origin_tick": self.origin_tick,
            "pitch_low": self.pitch_low,
            "shape": [self.rows, self.cols],
            "cells": cells,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "PianoRoll":
        matrix = sparse_to_dense(data["shape"], data.get("cells", []))
        return cls(
            matrix,
            ticks_per_beat=data["ticks_per_beat"],
            time_step_ticks=data.get("time_step_ticks", 1),
            origin_tick=data.get("origin_tick", 0),
            pitch_low=data.get("pitch_low", 0),
            batch=data.get("batch", 0),
        )


def sparse_to_dense(shape, cells) -> np.ndarray:
    matrix = np.zeros(tuple(shape), dtype=np.float64)
    for r, c, v in cells:
        matrix[int(r), int(c)] = float(v)
    return matrix


def dense_to_sparse(matrix: np.ndarray) -> List[List[float]]:
    rows, cols = np.nonzero(matrix)
    return [[int(r), int(c), float(matrix[r, c])] for r, c in zip(rows, cols)]


def note_runs(matrix: np.ndarray) -> List[NoteRun]:
    """Maximal runs of positive cells per row, in row-major order."""
    positive = np.asarray(matrix) > 0
    if not positive.any():
        return []
    edges = np.diff(np.pad(positive, ((0, 0), (1, 1))).astype(np.int8), axis=1)
    starts = np.argwhere(edges == 1)
    ends = np.argwhere(edges == -1)
    runs = []
    for (row, start), (_, end) in zip(starts, ends):
        runs.append(NoteRun(int(row), int(start), int(end - start), float(matrix[row, start:end].mean())))
    return runs


# ---------------------------------------------------------------------------
# SMF parsing
# ---------------------------------------------------------------------------

def _scan_chunks(data: bytes) -> Tuple[int, List[int]]:
    """Validate the chunk structure and return (format, MTrk offsets)."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header chunk", 0)
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or 8 + header_len > len(data):
        raise MidiParseError(f"bad MThd length {header_len}", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    offsets = []
    offset = 8 + header_len
    while offset < len(data):
        if offset + 8 > len(data):
            raise MidiParseError("truncated chunk header", offset)
        chunk_id = data[offset:offset + 4]
        length = struct.unpack(">I", data[offset + 4:offset + 8])[0]
        if offset + 8 + length > len(data):
            raise MidiParseError(f"chunk {chunk_id!r} overruns file by {offset + 8 + length - len(data)} bytes", offset)
        if chunk_id == b"MTrk":
            offsets.append(offset)
        offset += 8 + length
    if len(offsets) < ntracks:
        raise MidiParseError(f"header announces {ntracks} tracks, found {len(offsets)}", offset)
    return fmt, offsets


def _locate_bad_track(data: bytes, offsets: List[int]) -> int:
    header = data[:14]
    for offset in offsets:
        length = struct.unpack(">I", data[offset + 4:offset + 8])[0]
        single = header[:10] + struct.pack(">H", 1) + header[12:14] + data[offset:offset + 8 + length]
        try:
            mido.MidiFile(file=io.BytesIO(single))
        except Exception:
            return offset
    return 0


def read_midi(data: bytes, drop_percussion: bool = True) -> MidiScore:
    """Parse raw SMF bytes into note events.

    Note-on/off pairs are matched per (channel, pitch) inside each track; a
    second note-on on a sounding key truncates the earlier note. Note-ons
    still open at the end of their track are closed there and counted in
    ``MidiScore.dangling``.
    """
    _, offsets = _scan_chunks(data)
    try:
        midi = mido.MidiFile(file=io.BytesIO(data))
    except Exception as e:
        raise MidiParseError(f"malformed track data: {e}", _locate_bad_track(data, offsets)) from e

    notes: List[NoteEvent] = []
    dangling = 0
    for track in midi.tracks:
        tick = 0
        pending: Dict[Tuple[int, int], Tuple[int, int]] = {}
        for msg in track:
            tick += msg.time
            if msg.is_meta or msg.type not in ("note_on", "note_off"):
                continue
            if drop_percussion and msg.channel == PERCUSSION_CHANNEL:
                continue
            key = (msg.channel, msg.note)
            if msg.type == "note_on" and msg.velocity > 0:
                if key in pending:
                    start, velocity = pending.pop(key)
                    if tick > start:
                        notes.append(NoteEvent(msg.note, start, tick - start, velocity, msg.channel))
                pending[key] = (tick, msg.velocity)
            elif key in pending:
                start, velocity = pending.pop(key)
                notes.append(NoteEvent(msg.note, start, max(1, tick - start), velocity, msg.channel))
        for (channel, pitch), (start, velocity) in sorted(pending.items()):
            dangling += 1
            notes.append(NoteEvent(pitch, start, max(1, tick - start), velocity, channel))

    if dangling:
        logger.warning("closed %d dangling note-on(s) at track end", dangling)
    notes.sort(key=lambda n: (n.onset, n.pitch, n.channel))
    logger.debug("parsed %d notes from %d track(s), tpb=%d", len(notes), len(midi.tracks), midi.ticks_per_beat)
    return MidiScore(ticks_per_beat=midi.ticks_per_beat, notes=notes, dangling=dangling)


def parse_midi(data: bytes) -> List[NoteEvent]:
    return read_midi(data).notes


def quantize(events: List[NoteEvent], source_tpb: int, spec: BatchSpec) -> List[NoteEvent]:
    """Resample onsets and durations from ``source_tpb`` to the batch resolution in ``spec``."""
    target = spec.target_ticks_per_beat
    if source_tpb < target:
        raise InputError(f"source resolution {source_tpb} is below the target {target}")
    ratio = target / source_tpb
    return [
        NoteEvent(
            e.pitch,
            round_half_away(e.onset * ratio),
            max(1, round_half_away(e.duration * ratio)),
            e.velocity,
            e.channel,
        )
        for e in events
    ]


def build_rolls(events: List[NoteEvent], spec: BatchSpec, source_tpb: Optional[int] = None) -> List[PianoRoll]:
    """Cut quantized events into consecutive fixed-width piano-roll batches.

    Cells hold velocity/127; where notes overlap the louder one wins. Notes
    crossing a batch boundary are split there. Returns an empty list when
    there are no events in the pitch range.
    """
    target = spec.target_ticks_per_beat
    source_tpb = source_tpb or target
    time_step = max(1, round_half_away(source_tpb / target))
    low, high = spec.pitch_range
    cols = spec.batch_columns
    kept = [e for e in events if low <= e.pitch < high]
    if len(kept) < len(events):
        logger.debug("dropped %d notes outside pitch range %s", len(events) - len(kept), spec.pitch_range)
    if not kept:
        return []
    n_batches = math.ceil(max(e.end for e in kept) / cols)
    matrices = [np.zeros((high - low, cols)) for _ in range(n_batches)]
    for e in kept:
        value = e.velocity / 127.0
        row = e.pitch - low
        start = e.onset
        while start < e.end:
            b = start // cols
            stop = min(e.end, (b + 1) * cols)
            segment = matrices[b][row, start - b * cols:stop - b * cols]
            np.maximum(segment, value, out=segment)
            start = stop
    return [
        PianoRoll(m, ticks_per_beat=source_tpb, time_step_ticks=time_step,
                  origin_tick=b * cols * time_step, pitch_low=low, batch=b)
        for b, m in enumerate(matrices)
    ]


def rolls_from_midi(data: bytes, spec: BatchSpec) -> List[PianoRoll]:
    """parse -> quantize -> build in one call."""
    score = read_midi(data, drop_percussion=spec.drop_percussion)
    events = quantize(score.notes, score.ticks_per_beat, spec)
    return build_rolls(events, spec, source_tpb=score.ticks_per_beat)


def roll_onsets(roll: PianoRoll) -> List[Tuple[int, int]]:
    """(pitch, onset tick) of every note run, mapped back to source ticks."""
    return [
        (run.row + roll.pitch_low, roll.origin_tick + run.start * roll.time_step_ticks)
        for run in roll.notes()
    ]
