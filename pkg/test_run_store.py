import json

import pytest

from conftest import paint
from src.config import RunConfig
from src.encoder import encode
from src.errors import InputError
from src.learner import Dictionary, EpochRecord, TrainReport
from src.plotting import render_code_svg, render_dictionary
from src.run_store import RunStore, read_json


@pytest.fixture
def encoded(diagonal, tile_cfg):
    roll = paint((40, 80), [(diagonal, (5, 2)), (diagonal, (20, 40))])
    dictionary = Dictionary.from_templates([diagonal])
    code = encode(roll, dictionary, tile_cfg)
    dictionary.recount([code])
    return dictionary, code


def test_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MW_RUNS_DIR", str(tmp_path / "elsewhere"))
    assert RunStore().root == tmp_path / "elsewhere"
    assert RunStore(str(tmp_path)).root == tmp_path


def test_generated_run_dir(tmp_path):
    path = RunStore(str(tmp_path)).run_dir(seed=7)
    assert path.is_dir()
    assert path.parent == tmp_path
    assert path.name.startswith("run-") and path.name.endswith("-seed7")


def test_codes_round_trip(tmp_path, encoded):
    _, code = encoded
    store = RunStore(str(tmp_path))
    store.save_codes(tmp_path, [code])
    loaded = store.load_codes(tmp_path)
    assert [c.to_dict() for c in loaded] == [code.to_dict()]
    single = store.write_json(tmp_path / "one.json", code.to_dict())
    assert store.load_codes(single)[0].to_dict() == code.to_dict()


def test_training_run_artifacts(tmp_path, encoded):
    dictionary, code = encoded
    report = TrainReport(seed=0, rows=[EpochRecord(1, 0.0, 1, 3, 32, 18, 4.0, 0.5)])
    config = RunConfig()
    store = RunStore(str(tmp_path))
    artifacts = store.save_training_run(tmp_path / "run", config, dictionary, [code], report)
    assert set(artifacts) == {"config", "dictionary", "codes", "report", "templates"}
    assert (tmp_path / "run" / "templates" / "template_000.svg").exists()
    assert store.load_dictionary(tmp_path / "run").to_dict() == dictionary.to_dict()
    assert store.load_config(tmp_path / "run") == config
    assert json.loads((tmp_path / "run" / "config.json").read_text())["schema"] == "mw/1"
    assert (tmp_path / "run" / "report.csv").read_text().startswith("epoch,rmse,dict_size")


def test_read_errors(tmp_path):
    with pytest.raises(InputError):
        read_json(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(InputError):
        read_json(broken)
    malformed = tmp_path / "codes.json"
    malformed.write_text(json.dumps({"codes": [{"shape": [1, 1]}]}), encoding="utf-8")
    with pytest.raises(InputError):
        RunStore(str(tmp_path)).load_codes(malformed)
    with pytest.raises(InputError):
        Dictionary.from_dict({"epoch": 1})


def test_svg_renders(tmp_path, encoded):
    dictionary, code = encoded
    svg = render_code_svg(code, tmp_path / "code.svg").read_text()
    assert 'id="note-0"' in svg
    assert 'id="placement-1"' in svg
    paths = render_dictionary(dictionary, tmp_path / "templates", top=5)
    assert [p.name for p in paths] == ["template_000.svg"]
    assert 'id="basis-2"' in paths[0].read_text()
