"""Medication-diagnosis attention graphs and their DOT export.

Edge weights accumulate first-layer ``MD`` attention (medication queries,
diagnosis keys) over every pair of months in which the two tokens are
active, then are divided by the patient's largest edge so that the fixed
cut-points 0.3 and 0.6 apply on a [0, 1] scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import PatientRecord
from .encoder import AttentionRecord

WEAK_BELOW = 0.3
STRONG_FROM = 0.6
EDGE_STYLE = {"strong": "solid", "moderate": "dashed", "weak": "dotted"}


def strength_class(w: float) -> str:
    if w < WEAK_BELOW:
        return "weak"
    if w < STRONG_FROM:
        return "moderate"
    return "strong"


@dataclass
class Edge:
    med: str
    diag: str
    weight: float  # normalized to [0, 1]
    raw: float
    strength: str


@dataclass
class AttentionGraph:
    patient_id: str
    label: int
    med_nodes: list[str]
    diag_nodes: list[str]
    edges: list[Edge] = field(default_factory=list)


def accumulate(att: np.ndarray, meds: np.ndarray, diags: np.ndarray) -> np.ndarray:
    """M x D matrix: sum of att[ti, tj] over months where med m is active at ti and diag d at tj."""
    return meds.T @ att @ diags


def aggregate_attention(
    trace: Sequence[AttentionRecord],
    p: PatientRecord,
    layer: int = 0,
    pair: str = "MD",
    med_names: Sequence[str] | None = None,
    diag_names: Sequence[str] | None = None,
) -> AttentionGraph:
    recs = [r for r in trace if r.layer == layer and r.pair == pair]
    if not recs:
        raise ValueError(f"trace has no layer-{layer} {pair} attention record")
    att = np.asarray(recs[0].att)
    if att.shape != (p.T, p.T):
        raise ValueError(f"attention is {att.shape}, patient {p.id} has T={p.T}")
    med_names = list(med_names) if med_names is not None else [str(i) for i in range(p.meds.shape[1])]
    diag_names = list(diag_names) if diag_names is not None else [str(i) for i in range(p.diags.shape[1])]

    raw = accumulate(att, p.meds, p.diags)
    top = raw.max() if raw.size else 0.0
    med_idx = np.flatnonzero(p.meds.any(axis=0))
    diag_idx = np.flatnonzero(p.diags.any(axis=0))
    edges = []
    for m in med_idx:
        for d in diag_idx:
            if raw[m, d] <= 0:
                continue
            w = float(raw[m, d] / top)
            edges.append(Edge(med_names[m], diag_names[d], w, float(raw[m, d]), strength_class(w)))
    edges.sort(key=lambda e: (e.med, e.diag))
    return AttentionGraph(
        p.id,
        p.label,
        sorted(med_names[i] for i in med_idx),
        sorted(diag_names[i] for i in diag_idx),
        edges,
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two flattened streams; the shorter one is padded with empty months."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"streams have different widths {a.shape[1]} and {b.shape[1]}")
    T = max(len(a), len(b))
    pa = np.zeros((T, a.shape[1]))
    pb = np.zeros((T, b.shape[1]))
    pa[: len(a)] = a
    pb[: len(b)] = b
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(pa.ravel() @ pb.ravel() / (na * nb), -1.0, 1.0))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graphs: Sequence[AttentionGraph], name: str = "attention") -> str:
    """Undirected DOT: box nodes for medications, ellipses for diagnoses.

    Edge style encodes strength (solid/dashed/dotted = strong/moderate/weak)
    and colour the patient's label (red positive, black negative).
    """
    if not graphs:
        raise ValueError("nothing to export")
    meds = sorted({m for g in graphs for m in g.med_nodes})
    diags = sorted({d for g in graphs for d in g.diag_nodes})
    lines = [f"graph {_quote(name)} {{", "  rankdir=LR;"]
    for m in meds:
        lines.append(f"  {_quote('M:' + m)} [shape=box, label={_quote(m)}];")
    for d in diags:
        lines.append(f"  {_quote('D:' + d)} [shape=ellipse, label={_quote(d)}];")
    for g in sorted(graphs, key=lambda g: g.patient_id):
        color = "red" if g.label == 1 else "black"
        for e in g.edges:
            attrs = (
                f"style={EDGE_STYLE[e.strength]}, color={color}, "
                f"label={_quote(f'{e.weight:.2f}')}, tooltip={_quote(g.patient_id)}"
            )
            lines.append(f"  {_quote('M:' + e.med)} -- {_quote('D:' + e.diag)} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graphs_to_json(graphs: Sequence[AttentionGraph]) -> str:
    from .data import FORMAT

    return json.dumps({"format": FORMAT, "graphs": [asdict(g) for g in graphs]}, indent=1, sort_keys=True) + "\n"
