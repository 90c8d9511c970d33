"""Plaintext calibration: sample synthetic batches, run the float graph, record ranges."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from .graph_ir import GraphIR, ModelSpec, NodeKind, build_training_graph, evaluate


class CalibrationError(RuntimeError):
    pass


@dataclass
class EdgeStats:
    min: float
    max: float
    count: int

    @property
    def abs_max(self) -> float:
        return max(abs(self.min), abs(self.max))

    def merge(self, other: "EdgeStats") -> "EdgeStats":
        return EdgeStats(min(self.min, other.min), max(self.max, other.max), self.count + other.count)

    @classmethod
    def of(cls, values) -> "EdgeStats":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.min()), float(v.max()), int(v.size))


@dataclass
class CalibrationStats:
    edges: Dict[str, EdgeStats] = field(default_factory=dict)

    def __getitem__(self, edge: str) -> EdgeStats:
        return self.edges[edge]

    def __contains__(self, edge: str) -> bool:
        return edge in self.edges

    def update(self, edge: str, values) -> None:
        new = EdgeStats.of(values)
        old = self.edges.get(edge)
        self.edges[edge] = new if old is None else old.merge(new)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = dict(self.edges)
        for k, v in other.edges.items():
            out[k] = out[k].merge(v) if k in out else v
        return CalibrationStats(out)

    def to_json(self) -> str:
        doc = {k: {"min": v.min, "max": v.max, "abs_max": v.abs_max, "count": v.count} for k, v in sorted(self.edges.items())}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationStats":
        doc = json.loads(text)
        return cls({k: EdgeStats(float(v["min"]), float(v["max"]), int(v["count"])) for k, v in doc.items()})


@dataclass
class CalibrationConfig:
    batches: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batches < 1:
            raise ValueError("calibration needs at least one batch")


def _sample_inputs(g: GraphIR, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    out = {}
    for name in g.inputs:
        shape = g.shapes[name]
        if g.nodes[name].attrs.get("role") == "label":
            out[name] = rng.binomial(1, 0.5, size=shape).astype(np.float64)
        else:
            out[name] = rng.uniform(-1.0, 1.0, size=shape)
    return out


def iter_calibration_batches(g: GraphIR, cfg: CalibrationConfig) -> Iterable[Dict[str, np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.batches):
        yield _sample_inputs(g, rng)


def sample_calibration_data(cfg: CalibrationConfig, spec: ModelSpec) -> Dict[str, np.ndarray]:
    """All calibration batches for ``spec``, stacked along a new leading axis."""
    g = build_training_graph(spec)
    batches = list(iter_calibration_batches(g, cfg))
    return {k: np.stack([b[k] for b in batches]) for k in batches[0]}


def batch_stats(g: GraphIR, inputs: Dict[str, np.ndarray]) -> CalibrationStats:
    stats = CalibrationStats()
    vals = evaluate(g, inputs, keep_all=True)
    for nid, v in vals.items():
        if g.nodes[nid].kind == NodeKind.CONSTANT:
            continue
        if not np.all(np.isfinite(v)):
            raise CalibrationError(f"non-finite value on edge {nid!r} during calibration")
        stats.update(nid, v)
    return stats


def collect_stats(g: GraphIR, cfg: CalibrationConfig) -> CalibrationStats:
    """Run ``g`` in floating point on every calibration batch and merge per-edge ranges."""
    total = CalibrationStats()
    for inputs in iter_calibration_batches(g, cfg):
        total = total.merge(batch_stats(g, inputs))
    return total


def merge_all(parts: List[CalibrationStats]) -> CalibrationStats:
    total = CalibrationStats()
    for p in parts:
        total = total.merge(p)
    return total
