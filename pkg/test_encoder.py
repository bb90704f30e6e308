import numpy as np
import pytest

from conftest import paint, tile
from src.config import EncoderConfig, Measure, Strategy
from src.encoder import (
    Placement,
    SparseCode,
    _EncodeState,
    code_length,
    encode,
    encode_efficient,
    encode_greedy,
    reconstruct,
    reconstruction_error,
)
from src.errors import ContractViolation, EmptyDictionaryError
from src.learner import Dictionary
from src.lexicon import BasisDeltas, TransformParams
from src.midi_ingest import PianoRoll
from src.synthetic import two_voice_batch

TILE_SPOTS = [(5, 2), (12, 25), (20, 50)]


@pytest.fixture
def three_tiles(diagonal):
    return paint((40, 80), [(diagonal, at) for at in TILE_SPOTS])


def _spots(code):
    return sorted((p.template_id, p.transform.P, p.transform.X) for p in code.placements)


def _placement(t, cells, coefficient=1.0):
    cells = tuple(sorted(cells.items()))
    return Placement(TransformParams(t), BasisDeltas(), coefficient, 1.0, (0, 0), cells,
                     frozenset(c for c, _ in cells), 1)


def test_greedy_tiles(three_tiles, diagonal, tile_cfg):
    code = encode_greedy(three_tiles, [diagonal], tile_cfg)
    assert _spots(code) == [(0, r, c) for r, c in TILE_SPOTS]
    assert not code.residual.any()
    assert all(p.score == pytest.approx(1.0) for p in code.placements)
    assert all(p.coefficient == pytest.approx(1.0) for p in code.placements)
    assert code.rmse == 0.0


def test_efficient_agrees_with_greedy(three_tiles, diagonal, tile_cfg):
    greedy = encode_greedy(three_tiles, [diagonal], tile_cfg)
    efficient = encode_efficient(three_tiles, [diagonal], tile_cfg)
    assert _spots(efficient) == _spots(greedy)
    assert not efficient.residual.any()


@pytest.mark.parametrize("measure", [Measure.ZNCC, Measure.RMSE])
def test_greedy_tiles_other_measures(three_tiles, diagonal, measure):
    cfg = EncoderConfig(scales=(1.0,), flips=(0,), measure=measure, strategy=Strategy.GREEDY)
    code = encode(three_tiles, [diagonal], cfg)
    assert _spots(code) == [(0, r, c) for r, c in TILE_SPOTS]
    assert reconstruction_error(three_tiles, code) == pytest.approx(0.0, abs=1e-9)


def test_spurious_note_stays_in_residual(diagonal, tile_cfg):
    roll = paint((40, 80), [(diagonal, (5, 2))])
    roll.data[30, 60] = 1.0
    for strategy in Strategy:
        code = encode(roll, [diagonal], tile_cfg.model_copy(update={"strategy": strategy}))
        assert len(code.placements) == 1
        assert code.residual[30, 60] == 1.0
        assert code.residual.sum() == 1.0


@pytest.mark.parametrize("strategy", list(Strategy))
def test_shared_note(tile_cfg, strategy):
    corpus = two_voice_batch()
    roll = corpus.rolls[0]
    cfg = tile_cfg.model_copy(update={"strategy": strategy})
    code = encode(roll, corpus.templates, cfg)
    assert sorted(p.template_id for p in code.placements) == [0, 1]
    first, second = code.placements
    shared = first.claimed_cells & second.claimed_cells
    assert shared == {(18, 12), (18, 13)}
    assert len(second.claimed_cells - first.claimed_cells) / len(second.claimed_cells) >= cfg.uniqueness_u
    assert np.allclose(code.residual, 0.0, atol=1e-9)
    assert code.rmse == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_default_grid_still_finds_tiles(three_tiles, diagonal, strategy):
    code = encode(three_tiles, Dictionary.from_templates([diagonal]), EncoderConfig(strategy=strategy))
    assert reconstruction_error(three_tiles, code) == pytest.approx(0.0, abs=1e-9)
    assert len(code.placements) == 3
    assert np.array_equal(reconstruct(code), three_tiles.data)


def test_claimed_candidates_skip_refinement(three_tiles, diagonal, tile_cfg, monkeypatch):
    three_tiles.data[30, 60] = 1.0
    calls = []
    refine = _EncodeState.refine

    def counting(self, shape, row, col):
        calls.append((row, col))
        return refine(self, shape, row, col)

    monkeypatch.setattr(_EncodeState, "refine", counting)
    code = encode_efficient(three_tiles, [diagonal], tile_cfg)
    assert _spots(code) == [(0, r, c) for r, c in TILE_SPOTS]
    assert code.residual.sum() == 1.0
    assert len(calls) == 3


def test_all_zero_roll(diagonal, tile_cfg):
    roll = PianoRoll(np.zeros((20, 30)), ticks_per_beat=12)
    for strategy in Strategy:
        code = encode(roll, [diagonal], tile_cfg.model_copy(update={"strategy": strategy}))
        assert code.placements == []
        assert not code.residual.any()


def test_empty_dictionary(three_tiles, tile_cfg):
    with pytest.raises(EmptyDictionaryError):
        encode(three_tiles, [], tile_cfg)


def test_width_cap_excludes_templates(three_tiles, diagonal, tile_cfg):
    code = encode(three_tiles, [diagonal], tile_cfg.model_copy(update={"max_template_width": 8}))
    assert code.placements == []


def test_max_placements(three_tiles, diagonal, tile_cfg):
    code = encode(three_tiles, [diagonal], tile_cfg.model_copy(update={"max_placements": 2}))
    assert len(code.placements) == 2


def test_worker_count_does_not_change_output(three_tiles, diagonal):
    other = tile([(0, 2), (3, 0)], id=1)
    base = EncoderConfig(scales=(1.0, 0.8), flips=(0, 1))
    serial = encode(three_tiles, [diagonal, other], base)
    threaded = encode(three_tiles, [diagonal, other], base.model_copy(update={"n_jobs": 4}))
    assert serial.to_json() == threaded.to_json()


def test_reencode_reconstruction(three_tiles, diagonal, tile_cfg):
    code = encode(three_tiles, [diagonal], tile_cfg)
    rebuilt = PianoRoll(reconstruct(code), ticks_per_beat=12)
    again = encode(rebuilt, [diagonal], tile_cfg)
    assert reconstruction_error(rebuilt, again) <= reconstruction_error(three_tiles, code) + 1e-12


def test_reconstruct_examples():
    empty = SparseCode(batch=0, shape=(4, 6))
    assert not reconstruct(empty).any()

    a = _placement(0, {(1, 1): 1.0, (1, 2): 0.5}, coefficient=0.8)
    b = _placement(1, {(1, 2): 1.0, (2, 4): 1.0}, coefficient=0.6)
    single = SparseCode(batch=0, shape=(4, 6), placements=[a])
    out = reconstruct(single)
    assert out[1, 1] == pytest.approx(0.8)
    assert out[1, 2] == pytest.approx(0.4)
    assert out.sum() == pytest.approx(1.2)

    both = reconstruct(SparseCode(batch=0, shape=(4, 6), placements=[a, b]))
    assert both[1, 2] == pytest.approx(0.6)
    assert both[2, 4] == pytest.approx(0.6)


def test_reconstruction_error_examples():
    roll = np.full((3, 4), 0.3)
    assert reconstruction_error(roll, SparseCode(batch=0, shape=(3, 4))) == pytest.approx(0.3)

    one = np.zeros((5, 5))
    one[2, 2] = 1.0
    assert reconstruction_error(one, SparseCode(batch=0, shape=(5, 5))) == pytest.approx(0.2)

    exact = SparseCode(batch=0, shape=(5, 5), placements=[_placement(0, {(2, 2): 1.0})])
    assert reconstruction_error(one, exact) == 0.0

    with pytest.raises(ContractViolation):
        reconstruction_error(np.zeros((2, 2)), exact)


def test_code_length(three_tiles, diagonal, tile_cfg):
    code = encode(three_tiles, [diagonal], tile_cfg)
    assert code.placements[0].n_params == 6 + 3 * 3 + 1
    assert code_length([code]) == {"code_params": 48, "note_params": 27, "placements": 3}


def test_code_json(three_tiles, diagonal, tile_cfg):
    code = encode(three_tiles, [diagonal], tile_cfg)
    data = code.to_dict()
    assert data["schema"] == "mw/1"
    assert {"t", "X", "P", "F", "D", "A", "deltas", "coef", "score"} <= set(data["placements"][0])
    assert data["stats"] == {"rmse": 0.0, "code_params": 48, "note_params": 27}
    assert SparseCode.from_dict(data).to_dict() == data
