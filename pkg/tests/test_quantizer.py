import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fhetrain.calibration import CalibrationConfig, EdgeStats, collect_stats
from fhetrain.graph_ir import GraphIR, ModelSpec, NodeKind, build_training_graph, evaluate
from fhetrain.quantizer import (
    FusionError,
    LutDomainError,
    LutTable,
    QParams,
    QuantizationError,
    SaturationCounter,
    decompose_scale,
    dequantize,
    fuse_float_chains,
    insert_quantizers,
    make_qparams,
    quantize,
    signed_width,
)
from oracles import chain_value, random_codes


@pytest.mark.parametrize("abs_max,n,scale", [(1.0, 4, 1 / 7), (7.0, 4, 1.0), (1.0, 2, 1.0)])
def test_make_qparams(abs_max, n, scale):
    q = make_qparams(EdgeStats(-abs_max, abs_max / 2, 1), n)
    assert math.isclose(q.scale, scale) and q.zero_point == 0 and q.qmax == 2 ** (n - 1) - 1


def test_degenerate_tensor():
    q = make_qparams(EdgeStats(0.0, 0.0, 4), 4)
    assert q.scale == 1.0 and q.degenerate


def test_quantize_examples():
    q = QParams(1 / 7, 4)
    c = SaturationCounter()
    assert quantize(0.0, q, c) == 0
    assert quantize(1.0, q, c) == 7
    assert quantize(2.0, q, c) == 7
    assert quantize(-2.0, q, c) == -7
    assert (c.clipped, c.total) == (2, 4)


def test_round_half_even():
    q = QParams(1.0, 4)
    np.testing.assert_array_equal(quantize([0.5, 1.5, 2.5, -0.5, -1.5], q), [0, 2, 2, 0, -2])


@given(st.floats(1e-3, 100), st.integers(2, 8), st.floats(-1, 1))
def test_round_trip_error(abs_max, n, frac):
    q = make_qparams(EdgeStats(-abs_max, abs_max, 1), n)
    x = frac * abs_max
    assert abs(dequantize(quantize(x, q), q) - x) <= q.scale / 2 * (1 + 1e-9)


def test_invalid_qparams():
    with pytest.raises(QuantizationError):
        QParams(0.0, 4)
    with pytest.raises(QuantizationError):
        QParams(1.0, 1)


@pytest.mark.parametrize("M,n_r,M0", [(0.09375, 3, 0.75), (0.5, 0, 0.5), (0.7, 0, 0.7)])
def test_decompose_examples(M, n_r, M0):
    d = decompose_scale(M)
    assert (d.n_r, d.M0) == (n_r, M0)


def test_decompose_large_and_invalid():
    d = decompose_scale(3.0)
    assert d.n_r == 0 and d.M0 == 3.0 and d.no_rounding
    for bad in (0.0, -1.0):
        with pytest.raises(QuantizationError):
            decompose_scale(bad)


@given(st.floats(1e-12, 0.9999999, allow_subnormal=False))
def test_decompose_inverse(M):
    d = decompose_scale(M)
    assert 0.5 <= d.M0 < 1
    assert math.isclose(d.M0 * 2.0 ** -d.n_r, M, rel_tol=2**-52)


@given(st.integers(-(2**20), 2**20), st.integers(-(2**20), 2**20))
def test_signed_width_covers_range(a, b):
    lo, hi = min(a, b), max(a, b)
    w = signed_width(lo, hi)
    assert -(2 ** (w - 1)) <= lo and hi <= 2 ** (w - 1) - 1
    # symmetric sizing: the magnitude does not fit one bit narrower
    if w > 1:
        assert max(abs(lo), abs(hi)) > 2 ** (w - 2) - 1


# tables


def test_table_invariants():
    t = LutTable.from_function("sq", 3, 6, lambda x: x * x)
    assert t.entries.size == 8 and t.lo == -4 and t.hi == 3
    assert t.lookup(-4) == 16
    with pytest.raises(LutDomainError):
        t.lookup(4)
    with pytest.raises(QuantizationError):
        LutTable("bad", 2, 2, [0, 1, 2, 3])
    with pytest.raises(QuantizationError):
        LutTable("short", 3, 4, [0, 1])
    assert LutTable.from_dict(t.to_dict()).entries.tolist() == t.entries.tolist()


def test_sigmoid_chain_at_zero():
    steps = [{"op": "dequantize", "scale": 1 / 7}, {"op": "sigmoid"}, {"op": "quantize", "scale": 1 / 15, "bits": 4}]
    t = LutTable.from_chain("s", 4, steps)
    assert t.lookup(0) == chain_value(steps, 0) == 7
    assert all(t.lookup(c) == chain_value(steps, int(c)) for c in t.domain())


def test_identity_chain():
    steps = [{"op": "dequantize", "scale": 0.25}, {"op": "quantize", "scale": 0.25, "bits": 4}]
    t = LutTable.from_chain("id", 4, steps)
    # symmetric grid: -8 saturates to -7
    np.testing.assert_array_equal(t.entries, np.clip(t.domain(), -7, 7))


def test_division_chain():
    steps = [{"op": "dequantize", "scale": 0.5}, {"op": "div", "value": 8.0}, {"op": "quantize", "scale": 0.5, "bits": 5}]
    t = LutTable.from_chain("div", 5, steps)
    assert t.lookup(8) == 1


# graph passes

MODELS = [
    ("logistic", 30, (), "sigmoid", 8),
    ("logistic", 3, (), "sigmoid", 2),
    ("mlp", 30, (30,), "relu", 8),
    ("mlp", 6, (4,), "sigmoid", 3),
    ("mlp", 4, (3, 2), "relu", 2),
]


@pytest.mark.parametrize("model", MODELS)
@pytest.mark.parametrize("rounding", ["truncate", "nearest"])
def test_tables_equal_their_chains(compiled, model, rounding):
    ig = compiled(*model, rounding=rounding).int_graph
    assert ig.tables
    for t in ig.tables.values():
        got = [chain_value(t.provenance, int(c)) for c in t.domain()]
        assert got == t.entries.tolist(), t.table_id


@pytest.mark.parametrize("model", MODELS)
def test_fused_graph_equals_unfused(compiled, model):
    m = compiled(*model)
    rng = np.random.default_rng(0)
    for _ in range(50):
        feed = random_codes(m.circuit.inputs, rng)
        a, b = evaluate(m.quantized_graph, feed), evaluate(m.int_graph, feed)
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_integer_graph_shape(compiled):
    m = compiled()
    kinds = m.int_graph.kinds()
    assert NodeKind.LUT in kinds
    assert not kinds & {NodeKind.SIGMOID, NodeKind.DIV, NodeKind.QUANTIZE, NodeKind.DEQUANTIZE}
    assert {NodeKind.MATMUL, NodeKind.ADD, NodeKind.SUB, NodeKind.REDUCE_SUM} <= kinds
    # integer ranges recorded on every arithmetic node
    for n in m.int_graph.nodes.values():
        if n.kind in (NodeKind.MATMUL, NodeKind.ADD, NodeKind.SUB, NodeKind.LUT):
            lo, hi = n.attrs["range"]
            assert lo <= hi


def test_tied_quantizers_share_scale(compiled):
    qp = compiled().qparams
    assert qp["weight_0"].scale == pytest.approx(qp["weight_0"].scale)
    m = compiled()
    out = m.circuit.output_scales
    assert out["weight_0_out"]["scale"] == pytest.approx(out["weight_0_out"]["param_scale"])


def test_quantized_step_tracks_float_step(compiled):
    m = compiled()
    rng = np.random.default_rng(1)
    X, y = rng.uniform(-1, 1, (8, 30)), rng.integers(0, 2, (8, 1)).astype(float)
    w, b = rng.uniform(-1, 1, (30, 1)), rng.uniform(-1, 1, 1)
    qp = m.qparams
    feed = {"X": quantize(X, qp["X"]), "Y": quantize(y, qp["Y"]), "weight_0": quantize(w, qp["weight_0"]), "bias_0": quantize(b, qp["bias_0"])}
    out = evaluate(m.int_graph, feed)
    ref = evaluate(m.float_graph, {"X": X, "Y": y, "weight_0": w, "bias_0": b})
    dq = out["weight_0_out"] * m.circuit.output_scales["weight_0_out"]["scale"]
    assert np.corrcoef(dq.ravel(), ref["weight_0_out"].ravel())[0, 1] > 0.9


def test_binary_float_chain_is_rejected():
    g = GraphIR()
    g.add_node("a", NodeKind.INPUT, shape=[2], scale=1.0, bits=4, range=[-7, 7])
    g.add_node("b", NodeKind.INPUT, shape=[2], scale=1.0, bits=4, range=[-7, 7])
    g.add_node("da", NodeKind.DEQUANTIZE, ["a"], scale=1.0)
    g.add_node("db", NodeKind.DEQUANTIZE, ["b"], scale=1.0)
    g.add_node("s", NodeKind.ADD, ["da", "db"])
    g.add_node("q", NodeKind.QUANTIZE, ["s"], scale=1.0, bits=4, range=[-7, 7])
    g.add_node("o", NodeKind.OUTPUT, ["q"])
    with pytest.raises(FusionError):
        fuse_float_chains(g)


def test_missing_stats_is_an_error():
    g = build_training_graph(ModelSpec("logistic", 2, batch=1))
    stats = collect_stats(g, CalibrationConfig(2))
    stats.edges.pop("X")
    with pytest.raises(QuantizationError):
        insert_quantizers(g, stats)


def test_unknown_rounding_mode():
    g = build_training_graph(ModelSpec("logistic", 2, batch=1))
    with pytest.raises(QuantizationError):
        insert_quantizers(g, collect_stats(g, CalibrationConfig(2)), rounding="stochastic")


@given(st.integers(2, 8))
def test_bit_width_setting(n):
    g = build_training_graph(ModelSpec("logistic", 3, batch=2))
    from fhetrain.quantizer import quantize_graph, input_qparams

    ig = quantize_graph(g, collect_stats(g, CalibrationConfig(4)), n)
    assert all(q.bit_width == n for q in input_qparams(ig).values())
