import numpy as np
import pydot
import pytest
from hypothesis import given, strategies as st

from mupod.data import PatientRecord, demo_vector
from mupod.encoder import AttentionRecord
from mupod.explain import (
    AttentionGraph,
    Edge,
    accumulate,
    aggregate_attention,
    cosine_similarity,
    export_dot,
    strength_class,
)


def _patient(meds, diags, label=1, pid="x"):
    meds, diags = np.asarray(meds, float), np.asarray(diags, float)
    return PatientRecord(pid, label, meds, diags, demo_vector(50, "F"), np.arange(len(meds)))


def _trace(att):
    return [AttentionRecord(0, "MD", np.asarray(att, float), np.zeros((len(att), 2)))]


def parses(dot: str) -> bool:
    graphs = pydot.graph_from_dot_data(dot)
    return bool(graphs)


def test_thresholds_inclusive_lower_bounds():
    assert strength_class(0.0) == "weak"
    assert strength_class(0.2999999) == "weak"
    assert strength_class(0.3) == "moderate"
    assert strength_class(0.45) == "moderate"
    assert strength_class(0.5999999) == "moderate"
    assert strength_class(0.6) == "strong"
    assert strength_class(1.0) == "strong"


def test_single_pair_is_strong():
    p = _patient([[1, 0], [0, 0]], [[0, 0], [0, 1]])
    g = aggregate_attention(_trace([[0.3, 0.7], [0.5, 0.5]]), p)
    assert len(g.edges) == 1
    e = g.edges[0]
    assert (e.med, e.diag, e.weight, e.strength) == ("0", "1", 1.0, "strong")


def test_hand_summed_three_step():
    att = np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2]])
    meds = [[1, 0], [1, 1], [0, 1]]
    diags = [[1, 0], [0, 0], [1, 1]]
    raw = accumulate(att, np.array(meds, float), np.array(diags, float))
    # med 0 active at t0,t1; med 1 at t1,t2; diag 0 at t0,t2; diag 1 at t2
    assert raw[0, 0] == pytest.approx(0.2 + 0.3 + 0.1 + 0.8)
    assert raw[0, 1] == pytest.approx(0.3 + 0.8)
    assert raw[1, 0] == pytest.approx(0.1 + 0.8 + 0.6 + 0.2)
    assert raw[1, 1] == pytest.approx(0.8 + 0.2)
    g = aggregate_attention(_trace(att), _patient(meds, diags))
    top = raw.max()
    assert {(e.med, e.diag): e.weight for e in g.edges} == pytest.approx(
        {(str(m), str(d)): raw[m, d] / top for m in range(2) for d in range(2)}
    )


@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 3), st.floats(0.0, 1.0))
def test_monotone_in_attention(seed, i, j, bump):
    rng = np.random.default_rng(seed)
    meds = (rng.random((4, 3)) < 0.5).astype(float)
    diags = (rng.random((4, 3)) < 0.5).astype(float)
    att = rng.random((4, 4))
    more = att.copy()
    more[i, j] += bump
    assert np.all(accumulate(more, meds, diags) >= accumulate(att, meds, diags) - 1e-15)


def test_empty_trace_rejected():
    with pytest.raises(ValueError):
        aggregate_attention([], _patient([[1]], [[1]]))


def test_cosine_examples():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    assert cosine_similarity(np.zeros((2, 2)), a) == 0.0
    b = np.array([[0.5, 2.0], [1.0, 1.0], [3.0, 0.0]])
    padded = np.vstack([a, np.zeros((1, 2))])
    direct = padded.ravel() @ b.ravel() / (np.linalg.norm(padded) * np.linalg.norm(b))
    assert cosine_similarity(a, b) == pytest.approx(direct, abs=1e-12)


def test_dot_nodes_only_is_valid():
    dot = export_dot([AttentionGraph("p", 0, ["OXY"], ["F11"], [])])
    assert parses(dot)
    assert "--" not in dot


def test_dot_styles_and_colors():
    pos = AttentionGraph("a", 1, ["OXY"], ["F11"], [Edge("OXY", "F11", 1.0, 1.0, "strong")])
    neg = AttentionGraph("b", 0, ["IBU"], ["M54"], [Edge("IBU", "M54", 0.1, 0.1, "weak")])
    dot = export_dot([neg, pos])
    lines = dot.splitlines()
    strong = next(l for l in lines if '"M:OXY" -- "D:F11"' in l)
    weak = next(l for l in lines if '"M:IBU" -- "D:M54"' in l)
    assert "style=solid" in strong and "color=red" in strong
    assert "style=dotted" in weak and "color=black" in weak
    assert '"M:OXY" [shape=box' in dot and '"D:F11" [shape=ellipse' in dot
    assert parses(dot)
    assert export_dot([pos, neg]) == dot  # sorted emission


def test_awkward_names_still_parse():
    g = AttentionGraph("q", 1, ['A"B', "x\\y"], ["d 1"], [Edge('A"B', "d 1", 0.5, 0.5, "moderate")])
    assert parses(export_dot([g]))


def test_grammar_checker_rejects_broken_dot():
    assert not parses('graph g { "a" -- "b" [style=solid; }')
