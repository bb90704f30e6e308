"""SVG rendering of codes and templates with matplotlib."""
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from src.encoder import SparseCode  # noqa: E402
from src.lexicon import Template, template_matrix  # noqa: E402
from src.midi_ingest import note_runs  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "music-words"
matplotlib.rcParams["svg.fonttype"] = "none"

_CELL_INCHES = 0.08


def template_color(template_id: int):
    return plt.get_cmap("tab20")(template_id % 20)


def _notes_mask(code: SparseCode) -> np.ndarray:
    """Positive cells of the encoded roll: everything claimed plus whatever is left in the residual."""
    mask = np.asarray(code.residual) > 0
    mask = mask.copy()
    for p in code.placements:
        for r, c in p.claimed_cells:
            mask[r, c] = True
    return mask


def _row_span(rows: Iterable[int], total: int) -> Tuple[int, int]:
    rows = list(rows)
    if not rows:
        return 0, total
    return max(0, min(rows) - 2), min(total, max(rows) + 3)


def _figure(width_cells: int, height_cells: int):
    w = min(40.0, max(3.0, width_cells * _CELL_INCHES))
    h = min(20.0, max(2.0, height_cells * _CELL_INCHES * 2))
    return plt.subplots(figsize=(w, h))


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_code_svg(code: SparseCode, path: Union[str, Path], title: Optional[str] = None) -> Path:
    """Piano roll with notes as filled cells and every placement outlined in its template color."""
    mask = _notes_mask(code)
    runs = note_runs(mask.astype(np.float64))
    rows, cols = code.shape
    lo, hi = _row_span([r.row for r in runs] + [c[0] for p in code.placements for c, _ in p.cells], rows)

    fig, ax = _figure(cols, hi - lo)
    ax.set_xlim(0, cols)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("time (columns)")
    ax.set_ylabel("pitch row")
    ax.grid(True, linewidth=0.3, alpha=0.5)
    for i, run in enumerate(runs):
        ax.add_patch(Rectangle((run.start, run.row), run.length, 1, facecolor="0.25", edgecolor="none", gid=f"note-{i}"))
    for k, p in enumerate(code.placements):
        cells = [c for c, _ in p.cells]
        r0, r1 = min(r for r, _ in cells), max(r for r, _ in cells) + 1
        color = template_color(p.template_id)
        ax.add_patch(Rectangle((p.start, r0), p.end - p.start, r1 - r0, fill=False, edgecolor=color,
                               linewidth=1.2, gid=f"placement-{k}"))
        ax.text(p.start, r1 + 0.2, f"T{p.template_id}", color=color, fontsize=6)
    ax.set_title(title or f"batch {code.batch}: {len(code.placements)} placements")
    logger.debug("rendered batch %d with %d notes", code.batch, len(runs))
    return _save(fig, path)


def render_template_svg(tpl: Template, path: Union[str, Path], usage: Optional[int] = None) -> Path:
    matrix = template_matrix(tpl, normalized=True)
    fig, ax = _figure(tpl.width + 2, tpl.height + 2)
    ax.set_xlim(-1, tpl.width + 1)
    ax.set_ylim(-1, tpl.height + 1)
    ax.grid(True, linewidth=0.3, alpha=0.5)
    color = template_color(tpl.id)
    for i, b in enumerate(tpl.bases):
        alpha = float(matrix[b.p, b.x]) if matrix[b.p, b.x] > 0 else 0.15
        ax.add_patch(Rectangle((b.x, b.p), b.d, 1, facecolor=color, alpha=max(alpha, 0.15), edgecolor="black",
                               linewidth=0.5, gid=f"basis-{i}"))
    suffix = "" if usage is None else f" (used {usage}x)"
    ax.set_title(f"T{tpl.id}: {tpl.n_bases} bases{suffix}")
    return _save(fig, path)


def render_dictionary(dictionary, out_dir: Union[str, Path], top: int = 20) -> List[Path]:
    """One SVG per template for the ``top`` most used templates."""
    usage = getattr(dictionary, "usage", {})
    ranked = sorted(dictionary.templates, key=lambda t: (-usage.get(t.id, 0), t.id))[:top]
    return [render_template_svg(t, Path(out_dir) / f"template_{t.id:03d}.svg", usage.get(t.id)) for t in ranked]
