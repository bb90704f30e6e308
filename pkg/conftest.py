import io

import mido
import numpy as np
import pytest

from src.config import BatchSpec, EncoderConfig, StatConfig
from src.lexicon import Basis, Template, render
from src.midi_ingest import PianoRoll
from src.statmodel import ReferenceModel


def midi_bytes(tracks, ticks_per_beat=480):
    """SMF bytes from a list of tracks, each a list of mido messages with delta times."""
    midi = mido.MidiFile(ticks_per_beat=ticks_per_beat)
    for messages in tracks:
        track = mido.MidiTrack()
        track.extend(messages)
        track.append(mido.MetaMessage("end_of_track", time=0))
        midi.tracks.append(track)
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def tile(bases, id=0, d=2):
    """Template from (x, p) pairs, every note ``d`` columns long."""
    return Template.build(id, [Basis(x, p, d) for x, p in bases])


def paint(shape, placements, value=1.0):
    """Roll holding ``value`` wherever one of the (template, (row, col)) placements paints."""
    data = np.zeros(shape)
    for tpl, at in placements:
        data = np.maximum(data, render(tpl, shape[0], shape[1], at, normalized=True) * value)
    return PianoRoll(data, ticks_per_beat=12)


@pytest.fixture
def small_spec():
    # 80 columns x 40 rows
    return BatchSpec(batch_length_ticks=3200, pitch_range=(40, 80))


@pytest.fixture
def tile_cfg():
    return EncoderConfig(scales=(1.0,), flips=(0,))


@pytest.fixture
def diagonal():
    return tile([(0, 0), (4, 4), (8, 8)])


@pytest.fixture
def uniform_reference():
    rng = np.random.default_rng(7)
    return ReferenceModel.from_responses(rng.uniform(0.0, 1.0, 10_000), StatConfig())


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs on planted corpora")
