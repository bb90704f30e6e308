import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from src.config import SCHEMA_VERSION, RunConfig, load_run_config
from src.encoder import SparseCode
from src.errors import InputError
from src.learner import Dictionary, TrainReport
from src.plotting import render_dictionary

logger = logging.getLogger(__name__)


def read_json(path: Path):
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON in {path}: {e}") from e


class RunStore:
    """Writes and reads run directories (config, dictionary, codes, report, renders)."""

    def __init__(self, root: Optional[str] = None):
        """Use ``root`` or the MW_RUNS_DIR environment variable (default ``runs``) as the parent directory."""
        self.root = Path(root or os.getenv("MW_RUNS_DIR") or "runs")

    def run_dir(self, out: Optional[str] = None, seed: int = 0) -> Path:
        """
        Resolve (and create) the directory for a new run.

        Args:
            out: Explicit directory; when omitted a timestamped one is made under ``root``
            seed: Seed recorded in the generated directory name

        Returns:
            Path of the run directory
        """
        path = Path(out) if out else self.root / f"run-{datetime.now():%Y%m%d-%H%M%S}-seed{seed}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def write_json(path: Path, payload) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path

    def save_codes(self, run_dir: Path, codes: Sequence[SparseCode], name: str = "codes.json") -> Path:
        payload = {"schema": SCHEMA_VERSION, "codes": [c.to_dict() for c in codes]}
        return self.write_json(Path(run_dir) / name, payload)

    def save_training_run(self, run_dir: Path, config: RunConfig, dictionary: Dictionary,
                          codes: Sequence[SparseCode], report: TrainReport, top: int = 20) -> Dict[str, Path]:
        """Write every artifact of a training run and return their paths by kind."""
        run_dir = Path(run_dir)
        artifacts = {
            "config": self.write_json(run_dir / "config.json", {"schema": SCHEMA_VERSION, **config.model_dump(mode="json")}),
            "dictionary": self.write_json(run_dir / "dictionary.json", dictionary.to_dict()),
            "codes": self.save_codes(run_dir, codes),
            "report": run_dir / "report.csv",
        }
        report.to_csv(artifacts["report"])
        renders = render_dictionary(dictionary, run_dir / "templates", top=top)
        artifacts["templates"] = run_dir / "templates"
        logger.info("run saved to %s (%d template renders)", run_dir, len(renders))
        return artifacts

    def load_dictionary(self, path) -> Dictionary:
        path = Path(path)
        if path.is_dir():
            path = path / "dictionary.json"
        return Dictionary.from_dict(read_json(path))

    def load_codes(self, path) -> List[SparseCode]:
        path = Path(path)
        if path.is_dir():
            path = path / "codes.json"
        data = read_json(path)
        entries = data.get("codes", [data]) if isinstance(data, dict) else data
        try:
            return [SparseCode.from_dict(c) for c in entries]
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"malformed code JSON {path}: {e}") from e

    def load_config(self, run_dir) -> RunConfig:
        return load_run_config(Path(run_dir) / "config.json", use_env=False)
