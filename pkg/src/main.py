"""Command-line entry point: ``python -m src.main <command>``."""
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import coloredlogs
import numpy as np
import pandas as pd
import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from src.config import Measure, RunConfig, ScaleSchedule, Strategy, TrainConfig, load_run_config
from src.encoder import code_length, encode
from src.errors import InputError, InvariantViolation
from src.evaluation import evaluate_codes, frequency_histogram, load_annotations, roll_from_code
from src.hierarchy import parse_hierarchy
from src.learner import Dictionary, train
from src.midi_ingest import PianoRoll, rolls_from_midi
from src.plotting import render_code_svg, render_dictionary
from src.run_store import RunStore, read_json
from src.synthetic import phrase_corpus, planted_corpus, two_voice_batch

load_dotenv()

logger = logging.getLogger("src")
console = Console()
app = typer.Typer(add_completion=False, help="Unsupervised music-word discovery on MIDI piano rolls.")


@contextmanager
def _exit_codes():
    """Map package errors to exit codes: 1 for bad input, 2 for broken invariants."""
    try:
        yield
    except (InputError, OSError) as e:
        logger.error("%s", e)
        raise typer.Exit(code=1)
    except InvariantViolation as e:
        logger.error("internal invariant violated: %s", e)
        raise typer.Exit(code=2)


@app.callback()
def main(log_level: str = typer.Option(os.getenv("MW_LOG_LEVEL", "INFO"), "--log-level", help="Logging level")):
    coloredlogs.install(level=log_level.upper(), logger=logger, fmt="%(asctime)s %(name)s %(levelname)s %(message)s")


def _config(config: Optional[Path], **overrides) -> RunConfig:
    cfg = load_run_config(config)
    return cfg.with_overrides(**overrides)


def _read_corpus(paths: List[Path], cfg: RunConfig) -> List[PianoRoll]:
    """Parse every file; batches are renumbered consecutively across files."""
    rolls: List[PianoRoll] = []
    for path in paths:
        try:
            file_rolls = rolls_from_midi(Path(path).read_bytes(), cfg.batch)
        except InputError as e:
            raise InputError(f"{path}: {e}") from e
        for roll in file_rolls:
            roll.batch = len(rolls)
            rolls.append(roll)
        logger.info("%s: %d batch(es)", path, len(file_rolls))
    if not rolls:
        raise InputError("no notes found in the given MIDI files")
    return rolls


def _print_stats(codes, title: str):
    lengths = code_length(codes)
    table = Table(title=title)
    for column in ("batch", "placements", "rmse", "code params", "note params"):
        table.add_column(column)
    for c in codes:
        table.add_row(str(c.batch), str(len(c.placements)), f"{c.rmse:.4f}", str(c.code_params), str(c.note_params))
    table.add_row("total", str(lengths["placements"]), "", str(lengths["code_params"]), str(lengths["note_params"]))
    console.print(table)


@app.command()
def synth(
    out: Path = typer.Option(Path("synthetic"), "--out", help="Output directory"),
    kind: str = typer.Option("planted", help="planted | two-voice | phrase"),
    templates: int = typer.Option(3, help="Planted templates"),
    instances: int = typer.Option(10, help="Instances per template"),
    spurious: float = typer.Option(0.0, help="Fraction of extra single notes"),
    seed: int = typer.Option(0, "--seed"),
):
    """Write a synthetic corpus: corpus.mid, annotations.json and the planted dictionary."""
    with _exit_codes():
        if kind == "planted":
            corpus = planted_corpus(templates, instances, spurious=spurious, seed=seed)
        elif kind == "two-voice":
            corpus = two_voice_batch()
        elif kind == "phrase":
            corpus = phrase_corpus()
        else:
            raise InputError(f"unknown corpus kind {kind!r}")
        out.mkdir(parents=True, exist_ok=True)
        (out / "corpus.mid").write_bytes(corpus.to_midi())
        RunStore.write_json(out / "annotations.json", {"batches": [a.to_dict() for a in corpus.annotations.values()]})
        RunStore.write_json(out / "planted.json", Dictionary.from_templates(corpus.templates).to_dict())
        console.print(f"wrote {len(corpus.events)} notes in {len(corpus.rolls)} batch(es) to {out}")


@app.command()
def learn(
    midi: List[Path] = typer.Argument(..., help="MIDI files"),
    config: Optional[Path] = typer.Option(None, "--config", help="YAML/JSON RunConfig"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    measure: Optional[Measure] = typer.Option(None, "--measure"),
    strategy: Optional[Strategy] = typer.Option(None, "--strategy"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    n_jobs: Optional[int] = typer.Option(None, "--n-jobs"),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory"),
):
    """Train a dictionary and write a run directory."""
    with _exit_codes():
        cfg = _config(config, **{
            "train.seed": seed,
            "train.encoder.measure": measure.value if measure else None,
            "train.encoder.strategy": strategy.value if strategy else None,
            "train.epochs": epochs,
            "train.encoder.n_jobs": n_jobs,
        })
        cfg = cfg.with_overrides(midi_paths=[str(p) for p in midi])
        rolls = _read_corpus(midi, cfg)
        dictionary, codes, report = train(rolls, cfg.train)
        store = RunStore(cfg.out_dir)
        run_dir = store.run_dir(str(out) if out else None, cfg.seed)
        store.save_training_run(run_dir, cfg, dictionary, codes, report)
        _print_stats(codes, f"{len(dictionary)} templates after {cfg.train.epochs} epoch(s)")
        console.print(f"run directory: {run_dir}")


@app.command("encode")
def encode_cmd(
    midi: Path = typer.Argument(..., help="MIDI file to encode"),
    dictionary: Path = typer.Argument(..., help="dictionary.json or a run directory"),
    config: Optional[Path] = typer.Option(None, "--config"),
    measure: Optional[Measure] = typer.Option(None, "--measure"),
    strategy: Optional[Strategy] = typer.Option(None, "--strategy"),
    out: Path = typer.Option(Path("encoded"), "--out"),
):
    """Encode unseen music with a frozen dictionary."""
    with _exit_codes():
        cfg = _config(config, **{
            "train.encoder.measure": measure.value if measure else None,
            "train.encoder.strategy": strategy.value if strategy else None,
        })
        store = RunStore(cfg.out_dir)
        words = store.load_dictionary(dictionary)
        rolls = rolls_from_midi(midi.read_bytes(), cfg.batch) or [
            PianoRoll(np.zeros((cfg.batch.pitch_rows, cfg.batch.batch_columns)), ticks_per_beat=cfg.batch.target_ticks_per_beat,
                      pitch_low=cfg.batch.pitch_range[0])
        ]
        codes = [encode(roll, words, cfg.train.encoder) for roll in rolls]
        out.mkdir(parents=True, exist_ok=True)
        store.save_codes(out, codes)
        hist = frequency_histogram(codes)
        store.write_json(out / "stats.json", {**code_length(codes), "rmse": [c.rmse for c in codes],
                                              "histogram": hist.ranked, "top3_fraction": hist.top3_fraction})
        _print_stats(codes, f"{midi.name}: {len(rolls)} batch(es)")


@app.command("parse")
def parse_cmd(
    midi: Path = typer.Argument(...),
    dictionary: Path = typer.Argument(...),
    scales: str = typer.Option("20,40,80,160", "--scales", help="Comma separated width caps, finest first"),
    relearn_per_scale: bool = typer.Option(False, "--relearn-per-scale", help="Train a dictionary per scale"),
    config: Optional[Path] = typer.Option(None, "--config"),
    out: Path = typer.Option(Path("parsed"), "--out"),
):
    """Multi-scale parse trees of a piece."""
    with _exit_codes():
        schedule = ScaleSchedule.parse(scales)
        cfg = _config(config)
        store = RunStore(cfg.out_dir)
        rolls = rolls_from_midi(midi.read_bytes(), cfg.batch)
        words = store.load_dictionary(dictionary)
        if relearn_per_scale:
            words = []
            for width in schedule.widths:
                scale_cfg = TrainConfig.model_validate({
                    **cfg.train.model_dump(),
                    "init_size": (cfg.train.init_size[0], width),
                    "encoder": {**cfg.train.encoder.model_dump(), "max_template_width": width},
                })
                words.append(train(rolls, scale_cfg)[0])
        trees = [parse_hierarchy(roll, words, schedule, cfg.train.encoder) for roll in rolls]
        store.write_json(out / "hierarchy.json", {"trees": [t.to_dict() for t in trees]})
        for tree in trees:
            sizes = ", ".join(f"L{layer.layer}: {len(layer.nodes)}" for layer in tree.layers)
            console.print(f"batch {tree.batch}: {sizes}")


@app.command("eval")
def eval_cmd(
    run_dir: Path = typer.Argument(..., help="Run or encode output directory"),
    annotations: Path = typer.Argument(..., help="Annotation JSON"),
    out: Optional[Path] = typer.Option(None, "--out", help="Metrics CSV (default <run_dir>/metrics.csv)"),
):
    """Score codes against annotations."""
    with _exit_codes():
        store = RunStore()
        codes = store.load_codes(run_dir)
        anns = load_annotations(annotations)
        rolls = [roll_from_code(c) for c in codes]
        seconds = 0.0
        report = run_dir / "report.csv"
        if report.exists():
            seconds = float(pd.read_csv(report)["seconds"].mean())
        frame = evaluate_codes(codes, anns, rolls, seconds)
        target = out or run_dir / "metrics.csv"
        frame.to_csv(target, index=False)
        console.print(frame.to_string(index=False))


@app.command()
def render(
    source: Path = typer.Argument(..., help="Code JSON, dictionary JSON or run directory"),
    out: Path = typer.Option(Path("renders"), "--out"),
    top: int = typer.Option(20, help="Templates to render from a dictionary"),
):
    """Render codes or templates to SVG."""
    with _exit_codes():
        store = RunStore()
        paths = []
        if source.is_dir():
            paths += render_dictionary(store.load_dictionary(source), out, top)
            paths += [render_code_svg(c, out / f"batch_{c.batch:03d}.svg") for c in store.load_codes(source)]
        else:
            data = read_json(source)
            if isinstance(data, dict) and "templates" in data:
                paths += render_dictionary(Dictionary.from_dict(data), out, top)
            else:
                paths += [render_code_svg(c, out / f"batch_{c.batch:03d}.svg") for c in store.load_codes(source)]
        console.print(f"wrote {len(paths)} SVG file(s) to {out}")


if __name__ == "__main__":
    app()
