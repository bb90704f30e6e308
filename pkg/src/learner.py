"""Dictionary learning: patch extraction, template relearning, growth and the training loop."""
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import ndimage
from tqdm import tqdm

from src.config import SCHEMA_VERSION, DeltaBounds, TrainConfig
from src.encoder import SparseCode, encode
from src.errors import ContractViolation, InitError, InputError
from src.lexicon import Basis, Template, TransformParams, apply_transform
from src.midi_ingest import PianoRoll, note_runs
from src.numeric import round_half_away
from src.statmodel import ReferenceModel, RunIndex, basis_response, estimate_reference, fit_lambda, h, log_likelihood_ratio

logger = logging.getLogger(__name__)

_DILATION = np.ones((5, 5), dtype=bool)


@dataclass
class Dictionary:
    """Ordered templates with dense ids, plus per-template bookkeeping keyed by id."""
    templates: List[Template] = field(default_factory=list)
    usage: Dict[int, int] = field(default_factory=dict)
    idle: Dict[int, int] = field(default_factory=dict)
    provenance: Dict[int, str] = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        ids = [t.id for t in self.templates]
        if ids != list(range(len(ids))):
            raise ContractViolation(f"dictionary ids must be dense 0..N-1, got {ids}")

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def get(self, id: int) -> Template:
        return self.templates[id]

    @property
    def basis_total(self) -> int:
        return sum(t.n_bases for t in self.templates)

    @classmethod
    def from_templates(cls, templates: Iterable[Template], usage=None, idle=None, provenance=None,
                       epoch: int = 0) -> "Dictionary":
        """Renumber ``templates`` densely in the given order, carrying bookkeeping by old id."""
        usage, idle, provenance = usage or {}, idle or {}, provenance or {}
        out = cls(epoch=epoch)
        for new_id, tpl in enumerate(templates):
            out.templates.append(tpl.with_id(new_id))
            out.usage[new_id] = usage.get(tpl.id, 0)
            out.idle[new_id] = idle.get(tpl.id, 0)
            out.provenance[new_id] = provenance.get(tpl.id, "init")
        return out

    def recount(self, codes: Iterable[SparseCode]) -> "Dictionary":
        counts = Counter()
        for code in codes:
            counts.update(code.usage())
        self.usage = {t.id: counts.get(t.id, 0) for t in self.templates}
        return self

    def to_dict(self) -> Dict:
        entries = []
        for t in self.templates:
            entry = t.to_dict()
            entry.update(usage=self.usage.get(t.id, 0), idle=self.idle.get(t.id, 0),
                         provenance=self.provenance.get(t.id, "init"))
            entries.append(entry)
        return {"schema": SCHEMA_VERSION, "epoch": self.epoch, "templates": entries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: Dict) -> "Dictionary":
        if "templates" not in data:
            raise InputError("dictionary JSON has no 'templates' list")
        entries = sorted(data["templates"], key=lambda e: e["id"])
        templates = [Template.from_dict(e) for e in entries]
        out = cls(templates=templates, epoch=int(data.get("epoch", 0)))
        for e in entries:
            out.usage[e["id"]] = int(e.get("usage", 0))
            out.idle[e["id"]] = int(e.get("idle", 0))
            out.provenance[e["id"]] = e.get("provenance", "init")
        return out


@dataclass
class Patch:
    """A roll window mapped back into a template's canonical coordinates.

    ``data`` extends the template box by ``margin`` rows/cols on every side
    so deformed bases can still be found.
    """
    template_id: int
    data: np.ndarray
    margin: Tuple[int, int]
    batch: int = 0

    def core(self, height: int, width: int) -> np.ndarray:
        mr, mc = self.margin
        return self.data[mr:mr + height, mc:mc + width]


@dataclass
class EpochRecord:
    epoch: int
    rmse: float
    dict_size: int
    basis_total: int
    code_params: int
    note_params: int
    objective: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    seed: int
    rows: List[EpochRecord] = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> Dict:
        rows = [asdict(r) for r in self.rows]
        if not include_timing:
            for r in rows:
                r.pop("seconds")
        return {"schema": SCHEMA_VERSION, "seed": self.seed, "epochs": rows}

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "rmse", "dict_size", "basis_total", "code_params", "note_params", "objective", "seconds"]
        return pd.DataFrame([asdict(r) for r in self.rows], columns=columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _bases_from_window(window: np.ndarray) -> List[Basis]:
    return [Basis(run.start, run.row, run.length, run.intensity) for run in note_runs(window)]


def init_random_crop(rolls: Sequence[PianoRoll], cfg: TrainConfig, rng: np.random.Generator) -> Dictionary:
    """Seed the dictionary with ``n_init`` crops that hold at least two notes each."""
    positives = [np.argwhere(r.data > 0) for r in rolls]
    weights = np.array([len(p) for p in positives], dtype=np.float64)
    if weights.sum() == 0:
        raise InitError("corpus has no notes to crop templates from")
    weights /= weights.sum()

    templates: List[Template] = []
    seen = set()
    for _ in range(cfg.init_draws):
        if len(templates) == cfg.n_init:
            break
        k = int(rng.choice(len(rolls), p=weights))
        roll = rolls[k]
        h_win, w_win = min(cfg.init_size[0], roll.rows), min(cfg.init_size[1], roll.cols)
        r, c = positives[k][rng.integers(len(positives[k]))]
        row0 = int(np.clip(r - rng.integers(h_win), 0, roll.rows - h_win))
        col0 = int(np.clip(c - rng.integers(w_win), 0, roll.cols - w_win))
        bases = _bases_from_window(roll.data[row0:row0 + h_win, col0:col0 + w_win])
        if len(bases) < 2:
            continue
        tpl = Template.build(len(templates), bases)
        if tpl.n_bases < 2 or tpl.signature() in seen:
            continue
        seen.add(tpl.signature())
        templates.append(tpl)

    if not templates:
        raise InitError(f"no window with at least two notes found in {cfg.init_draws} draws")
    if len(templates) < cfg.n_init:
        logger.warning("only %d of %d initial templates found", len(templates), cfg.n_init)
    logger.info("initialized dictionary with %d templates", len(templates))
    return Dictionary.from_templates(templates)


def _canonical(run_row: int, run_start: int, run_length: int, params: TransformParams, shaped: Template) -> Tuple[int, int, int]:
    """Undo placement, flip and scalings for one note run; returns (p, x, d) in template coordinates."""
    p = run_row - params.P
    x = run_start - params.X
    d = run_length
    if params.F in (1, 3):
        x = shaped.width - (x + d)
    if params.F in (2, 3):
        p = shaped.height - 1 - p
    x = round_half_away(x / params.A)
    d = max(1, round_half_away(d / params.D))
    return p, x, d


def extract_patch(roll: np.ndarray, tpl: Template, params: TransformParams, margin: Tuple[int, int] = (2, 2),
                  batch: int = 0) -> Patch:
    shaped = apply_transform(tpl, params)
    mr, mc = margin
    r0, r1 = params.P - mr, params.P + shaped.height + mr
    c0, c1 = params.X - mc, params.X + shaped.width + mc
    window = roll[max(0, r0):max(0, r1), max(0, c0):max(0, c1)]
    patch = np.zeros((tpl.height + 2 * mr, tpl.width + 2 * mc))
    for run in note_runs(window):
        p, x, d = _canonical(run.row + max(0, r0), run.start + max(0, c0), run.length, params, shaped)
        row = p + mr
        if not 0 <= row < patch.shape[0]:
            continue
        lo, hi = max(0, x + mc), min(patch.shape[1], x + mc + d)
        if lo < hi:
            segment = patch[row, lo:hi]
            np.maximum(segment, run.intensity, out=segment)
    return Patch(tpl.id, patch, (mr, mc), batch)


def extract_patches(codes: Sequence[SparseCode], rolls: Sequence[PianoRoll], dictionary: Dictionary,
                    margin: Tuple[int, int] = (2, 2)) -> Dict[int, List[Patch]]:
    """Cut every placement's window plus ``margin`` (rows, cols) and map it into its template's canonical frame."""
    by_batch = {r.batch: r for r in rolls}
    groups: Dict[int, List[Patch]] = {t.id: [] for t in dictionary.templates}
    for code in codes:
        roll = by_batch.get(code.batch)
        if roll is None:
            raise InputError(f"no roll for batch {code.batch}")
        for p in code.placements:
            if p.template_id not in groups:
                raise ContractViolation(f"placement references unknown template {p.template_id}")
            tpl = dictionary.get(p.template_id)
            groups[p.template_id].append(extract_patch(roll.data, tpl, p.transform, margin, code.batch))
    return groups


# ---------------------------------------------------------------------------
# Relearning
# ---------------------------------------------------------------------------

class _PatchState:
    """Normalized patch plus the cells already explained by selected bases."""

    def __init__(self, patch: Patch):
        self.margin = patch.margin
        self.index = RunIndex.normalized(patch.data)

    def best_response(self, basis: Tuple[int, int, int], bounds: DeltaBounds) -> Tuple[float, int, Tuple[int, int, int]]:
        """Coordinate ascent over (dx, dp, dd); returns (c, total deformation, placed (p, x, d))."""
        p, x, d = basis
        mr, mc = self.margin
        current = [0, 0, 0]

        def response(delta):
            return basis_response(self.index, p + delta[1] + mr, x + delta[0] + mc, max(1, d + delta[2]))

        best = response(current)
        for axis, bound in enumerate((bounds.x, bounds.p, bounds.d)):
            chosen = 0
            for step in range(1, bound + 1):
                for v in (-step, step):
                    trial = list(current)
                    trial[axis] = v
                    value = response(trial)
                    if value > best:
                        best, chosen = value, v
            current[axis] = chosen
        placed = (p + current[1], x + current[0], max(1, d + current[2]))
        return best, sum(abs(v) for v in current), placed

    def inhibit(self, placed: Tuple[int, int, int]):
        p, x, d = placed
        mr, mc = self.margin
        row = p + mr
        if 0 <= row < self.index.matrix.shape[0]:
            lo, hi = max(0, x + mc), min(self.index.matrix.shape[1], x + mc + d)
            self.index.matrix[row, lo:hi] = 0.0
            self.index.labels[row, lo:hi] = 0


@dataclass
class Relearned:
    template: Optional[Template]
    log_likelihood: float = float("-inf")
    stale: bool = False


def _candidates(patches: Sequence[Patch]) -> List[Tuple[int, int, int]]:
    found = set()
    for patch in patches:
        mr, mc = patch.margin
        for run in note_runs(patch.data):
            found.add((run.row - mr, run.start - mc, run.length))
    return sorted(found)


def _inside(candidate: Tuple[int, int, int], tpl: Template) -> bool:
    p, x, _ = candidate
    return 0 <= p < tpl.height and 0 <= x < tpl.width


def _relearn(patches: Sequence[Patch], old: Template, ref: ReferenceModel, cfg: TrainConfig) -> Relearned:
    if not patches:
        logger.debug("template %d has no patches; kept as stale", old.id)
        return Relearned(old, stale=True)
    bounds = cfg.encoder.delta_bounds
    xi = cfg.stat.xi
    states = [_PatchState(p) for p in patches]
    pool = _candidates(patches)
    selected: List[Tuple[int, int, int]] = []
    responses: List[List[float]] = []

    while pool:
        best = None
        for candidate in pool:
            results = [s.best_response(candidate, bounds) for s in states]
            activations = np.array([r[0] for r in results])
            # outside the old box a basis must be shared by enough instances
            if not _inside(candidate, old) and np.mean(activations > 0) < cfg.grow_support:
                continue
            score = float(np.sum(h(activations ** 2, xi)))
            deformation = sum(r[1] for r in results)
            key = (-score, deformation, candidate)
            if best is None or key < best[0]:
                best = (key, candidate, results)
        if best is None:
            break
        (neg_score, _, _), candidate, results = best
        if -neg_score - cfg.gamma <= 0:
            break
        selected.append(candidate)
        responses.append([r[0] for r in results])
        for state, (c, _, placed) in zip(states, results):
            if c > 0:
                state.inhibit(placed)
        pool.remove(candidate)

    if len(selected) < cfg.min_bases:
        logger.debug("template %d collapsed to %d bases", old.id, len(selected))
        return Relearned(None)
    estimate = fit_lambda(responses, ref, cfg.stat)
    bases = [Basis(x, p, d, float(lam)) for (p, x, d), lam in zip(selected, estimate.lambdas)]
    template = Template.build(old.id, bases)
    llr = log_likelihood_ratio(np.asarray(responses).T, estimate, ref)
    return Relearned(template, llr)


def relearn_template(patches: Sequence[Patch], old: Template, ref: ReferenceModel, cfg: TrainConfig) -> Optional[Template]:
    """Rebuild a template basis by basis from its aligned patches.

    Candidate bases are the note runs seen in the patches, including their
    context margin. Each round picks the candidate whose summed activation
    over patches (with per-patch deltas) is largest, stops once that sum no
    longer beats ``gamma``, and inhibits the matched cells. A candidate
    outside the old template box also needs a response in at least
    ``grow_support`` of the patches. Weights are the fitted lambdas. Returns
    the old template when there are no patches and None when fewer than
    ``min_bases`` bases survive.
    """
    return _relearn(patches, old, ref, cfg).template


def _relearn_many(jobs: Sequence[Tuple[Sequence[Patch], Template]], ref: ReferenceModel,
                  cfg: TrainConfig) -> List[Relearned]:
    if cfg.encoder.n_jobs == 1 or len(jobs) < 2:
        return [_relearn(p, t, ref, cfg) for p, t in jobs]
    return Parallel(n_jobs=cfg.encoder.n_jobs, prefer="threads")(delayed(_relearn)(p, t, ref, cfg) for p, t in jobs)


class EpochUpdate:
    """Relearning state carried from batch to batch within one epoch.

    Template ids do not change until the epoch barrier. Patches queue up per
    template and are cleared whenever the template is rebuilt. A template
    that collapses keeps its shape and its queue.
    """

    def __init__(self, dictionary: Dictionary, ref: ReferenceModel, cfg: TrainConfig):
        self.dictionary = dictionary
        self.ref = ref
        self.cfg = cfg
        self.pending: Dict[int, List[Patch]] = {t.id: [] for t in dictionary.templates}
        self.llr: Dict[int, float] = {}
        self.relearned: set = set()

    def add(self, code: SparseCode, roll: PianoRoll) -> None:
        for tid, patches in extract_patches([code], [roll], self.dictionary, self.cfg.context).items():
            self.pending[tid].extend(patches)

    def relearn(self) -> None:
        ids = [tid for tid, patches in self.pending.items() if patches]
        if not ids:
            return
        d = self.dictionary
        results = _relearn_many([(self.pending[tid], d.get(tid)) for tid in ids], self.ref, self.cfg)
        templates = list(d.templates)
        provenance = dict(d.provenance)
        for tid, result in zip(ids, results):
            if result.template is None:
                continue
            templates[tid] = result.template
            provenance[tid] = f"relearn@{d.epoch}"
            self.llr[tid] = result.log_likelihood
            self.relearned.add(tid)
            self.pending[tid] = []
        self.dictionary = Dictionary(templates, dict(d.usage), dict(d.idle), provenance, d.epoch)

    @property
    def collapsed(self) -> List[int]:
        """Templates that were placed this epoch but never rebuilt into ``min_bases`` bases."""
        return [tid for tid, patches in self.pending.items() if patches and tid not in self.relearned]


# ---------------------------------------------------------------------------
# Growth
# ---------------------------------------------------------------------------

def shape_key(tpl: Template, flips: Iterable[int] = (0,)) -> Tuple[Tuple[int, int, int], ...]:
    """Signature shared by templates that are equal up to one of ``flips``."""
    return min(apply_transform(tpl, TransformParams(tpl.id, F=f)).signature() for f in {0, *flips})


def _residual_templates(code: SparseCode, cfg: TrainConfig, rng: np.random.Generator) -> List[Template]:
    residual = code.residual.copy()
    for p in code.placements:
        for cell in p.claimed_cells:
            residual[cell] = 0.0
    labels, n = ndimage.label(ndimage.binary_dilation(residual > 0, structure=_DILATION))
    out = []
    for k, box in enumerate(ndimage.find_objects(labels), start=1):
        masked = np.where(labels[box] == k, residual[box], 0.0)
        h_box, w_box = masked.shape
        h_win, w_win = min(cfg.init_size[0], h_box), min(cfg.init_size[1], w_box)
        r0 = int(rng.integers(h_box - h_win + 1))
        c0 = int(rng.integers(w_box - w_win + 1))
        bases = _bases_from_window(masked[r0:r0 + h_win, c0:c0 + w_win])
        if len(bases) >= 2:
            out.append(Template.build(0, bases))
    return out


def grow_dictionary(dictionary: Dictionary, codes: Sequence[SparseCode], rolls: Sequence[PianoRoll],
                    cfg: TrainConfig, rng: np.random.Generator, drop: Iterable[int] = (),
                    priority: Optional[Dict[int, float]] = None, grow: bool = True) -> Dictionary:
    """Drop idle or collapsed templates, add templates from unclaimed residual clusters and renumber.

    Survivors are ordered by ``priority`` (highest first, ties by id);
    templates equal up to a configured flip are merged into the first of
    them. With ``grow`` off nothing is added.
    """
    dictionary.recount(codes)
    drop = set(drop)
    flips = cfg.encoder.flips
    idle = {}
    for t in dictionary.templates:
        idle[t.id] = 0 if dictionary.usage.get(t.id, 0) else dictionary.idle.get(t.id, 0) + 1
    survivors = [t for t in dictionary.templates if t.id not in drop and idle[t.id] < cfg.idle_grace]
    dropped = len(dictionary) - len(survivors)
    if priority:
        survivors.sort(key=lambda t: (-priority.get(t.id, float("-inf")), t.id))

    kept: List[Template] = []
    usage = dict(dictionary.usage)
    keys = {}
    for t in survivors:
        key = shape_key(t, flips)
        if key in keys:
            usage[keys[key]] = usage.get(keys[key], 0) + usage.get(t.id, 0)
            continue
        keys[key] = t.id
        kept.append(t)

    provenance = dict(dictionary.provenance)
    added = 0
    cap = cfg.grow_cap if grow else 0
    next_id = max((t.id for t in dictionary.templates), default=-1) + 1
    for code in codes:
        if added >= cap:
            break
        for candidate in _residual_templates(code, cfg, rng):
            if added >= cap:
                break
            key = shape_key(candidate, flips)
            if key in keys:
                continue
            tpl = candidate.with_id(next_id)
            keys[key] = tpl.id
            provenance[tpl.id] = f"grow@{dictionary.epoch}"
            idle[tpl.id] = 0
            kept.append(tpl)
            next_id += 1
            added += 1

    logger.info("dictionary: dropped %d, merged %d, added %d", dropped, len(survivors) - (len(kept) - added), added)
    return Dictionary.from_templates(kept, usage, idle, provenance, epoch=dictionary.epoch)


def prune_unused(dictionary: Dictionary, codes: Sequence[SparseCode]) -> Tuple[Dictionary, List[SparseCode]]:
    """Drop templates no code places and renumber the placements that remain."""
    dictionary.recount(codes)
    used = [t for t in dictionary.templates if dictionary.usage.get(t.id, 0)]
    if len(used) == len(dictionary):
        return dictionary, list(codes)
    new_id = {t.id: k for k, t in enumerate(used)}
    pruned = Dictionary.from_templates(used, dictionary.usage, dictionary.idle, dictionary.provenance,
                                       epoch=dictionary.epoch)
    renumbered = []
    for code in codes:
        placements = [replace(p, transform=replace(p.transform, t=new_id[p.template_id])) for p in code.placements]
        renumbered.append(replace(code, placements=placements))
    logger.info("pruned %d unused template(s)", len(dictionary) - len(pruned))
    return pruned, renumbered


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def objective(codes: Sequence[SparseCode], dictionary: Dictionary, gamma: float) -> float:
    """Summed reconstruction RMSE + gamma * total basis count + one unit per template."""
    return float(sum(c.rmse for c in codes) + gamma * dictionary.basis_total + len(dictionary))


def train(corpus: Sequence[PianoRoll], cfg: TrainConfig = TrainConfig(),
          reference: Optional[ReferenceModel] = None) -> Tuple[Dictionary, List[SparseCode], TrainReport]:
    """Alternate encoding and dictionary updates for ``cfg.epochs`` epochs.

    Batches are encoded one at a time. With ``cfg.incremental`` the templates
    placed in a batch are relearned before the next batch is encoded;
    otherwise relearning waits for the end of the epoch. Dropping and growth
    happen between epochs. The last epoch encodes with a frozen dictionary,
    after which templates it never placed are pruned.
    """
    if not corpus:
        raise InputError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    dictionary = init_random_crop(corpus, cfg, rng)
    report = TrainReport(seed=cfg.seed)
    codes: List[SparseCode] = []
    if cfg.epochs == 0:
        return dictionary, codes, report
    ref = reference if reference is not None else estimate_reference(corpus, cfg.stat, rng)

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        final = epoch == cfg.epochs
        dictionary.epoch = epoch
        update = EpochUpdate(dictionary, ref, cfg)
        codes = []
        for roll in tqdm(corpus, desc=f"epoch {epoch}", unit="batch", disable=not cfg.progress):
            code = encode(roll, update.dictionary, cfg.encoder)
            codes.append(code)
            if final:
                continue
            update.add(code, roll)
            if cfg.incremental:
                update.relearn()

        if final:
            dictionary, codes = prune_unused(dictionary, codes)
        else:
            if not cfg.incremental:
                update.relearn()
            dictionary = update.dictionary.recount(codes)
        report.rows.append(_record(epoch, codes, dictionary, cfg, time.perf_counter() - started))

        if not final:
            dictionary = grow_dictionary(dictionary, codes, corpus, cfg, rng, drop=update.collapsed,
                                         priority=update.llr, grow=epoch + 1 < cfg.epochs)
            if not len(dictionary):
                logger.warning("dictionary emptied after epoch %d; re-initializing", epoch)
                dictionary = init_random_crop(corpus, cfg, rng)
    return dictionary, codes, report


def _record(epoch: int, codes: Sequence[SparseCode], dictionary: Dictionary, cfg: TrainConfig,
            seconds: float) -> EpochRecord:
    record = EpochRecord(
        epoch=epoch,
        rmse=float(np.mean([c.rmse for c in codes])),
        dict_size=len(dictionary),
        basis_total=dictionary.basis_total,
        code_params=int(sum(c.code_params for c in codes)),
        note_params=int(sum(c.note_params for c in codes)),
        objective=objective(codes, dictionary, cfg.gamma),
        seconds=seconds,
    )
    logger.info("epoch %d: rmse=%.4f dict=%d bases=%d objective=%.3f (%.1fs)", epoch, record.rmse,
                record.dict_size, record.basis_total, record.objective, record.seconds)
    return record
