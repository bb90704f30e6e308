"""Multi-scale parsing: encode at growing width caps and nest finer placements in coarser ones."""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Union

from src.config import SCHEMA_VERSION, EncoderConfig, ScaleSchedule
from src.encoder import Placement, SparseCode, encode
from src.errors import ConfigError
from src.midi_ingest import PianoRoll

logger = logging.getLogger(__name__)

CONTAINMENT = 0.8


@dataclass
class ParseNode:
    label: str
    layer: int
    template_id: int
    instance: int
    start: int
    end: int
    placement: Placement
    children: List[str] = field(default_factory=list)

    @property
    def span(self) -> int:
        return self.end - self.start

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "layer": self.layer,
            "template": self.template_id,
            "instance": self.instance,
            "start": self.start,
            "end": self.end,
            "X": self.placement.transform.X,
            "P": self.placement.transform.P,
            "score": self.placement.score,
            "children": list(self.children),
        }


@dataclass
class ParseLayer:
    layer: int
    max_width: int
    code: SparseCode
    nodes: List[ParseNode]


@dataclass
class ParseTree:
    batch: int
    layers: List[ParseLayer]

    def node(self, label: str) -> ParseNode:
        for layer in self.layers:
            for n in layer.nodes:
                if n.label == label:
                    return n
        raise KeyError(label)

    def to_dict(self) -> Dict:
        return {
            "schema": SCHEMA_VERSION,
            "batch": self.batch,
            "schedule": [layer.max_width for layer in self.layers],
            "layers": [
                {"layer": layer.layer, "max_width": layer.max_width, "nodes": [n.to_dict() for n in layer.nodes]}
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _nodes(code: SparseCode, layer: int) -> List[ParseNode]:
    ordered = sorted(code.placements, key=lambda p: (p.start, p.template_id, p.origin))
    counters: Dict[int, int] = {}
    nodes = []
    for p in ordered:
        instance = counters.get(p.template_id, 0)
        counters[p.template_id] = instance + 1
        nodes.append(ParseNode(f"T-{layer}-{p.template_id}-{instance}", layer, p.template_id, instance,
                               p.start, p.end, p))
    return nodes


def link_layers(parents: List[ParseNode], children: List[ParseNode], threshold: float = CONTAINMENT) -> None:
    """Attach each child to the parent covering the largest share (at least ``threshold``) of its span."""
    for child in children:
        best, best_overlap = None, 0
        for parent in parents:
            overlap = min(child.end, parent.end) - max(child.start, parent.start)
            if overlap >= threshold * child.span and overlap > best_overlap:
                best, best_overlap = parent, overlap
        if best is not None:
            best.children.append(child.label)


def parse_hierarchy(roll: PianoRoll, dictionary: Union[object, Sequence[object]], schedule: ScaleSchedule,
                    cfg: EncoderConfig = EncoderConfig()) -> ParseTree:
    """Encode ``roll`` once per width cap (finest first) and nest the layers.

    ``dictionary`` is either one dictionary filtered by width at every scale
    or one dictionary per scale.
    """
    if not schedule.widths:
        raise ConfigError("scale schedule is empty")
    per_scale = isinstance(dictionary, (list, tuple)) and all(hasattr(d, "templates") for d in dictionary)
    if per_scale and len(dictionary) != len(schedule.widths):
        raise ConfigError(f"{len(dictionary)} dictionaries for {len(schedule.widths)} scales")

    layers: List[ParseLayer] = []
    for i, width in enumerate(schedule.widths):
        layer_dict = dictionary[i] if per_scale else dictionary
        scale_cfg = cfg.model_copy(update={"max_template_width": width})
        code = encode(roll, layer_dict, scale_cfg)
        nodes = _nodes(code, i + 1)
        if layers:
            link_layers(nodes, layers[-1].nodes)
        layers.append(ParseLayer(i + 1, width, code, nodes))
        logger.info("scale %d (width <= %d): %d placements", i + 1, width, len(code.placements))
    return ParseTree(roll.batch, layers)
