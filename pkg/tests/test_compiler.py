import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fhetrain.compiler import (
    Add,
    CompileError,
    Partition,
    Ref,
    acc_width,
    assign_bitwidths,
    expr_eval,
    fsq_table,
    partition_graph,
)
from fhetrain.graph_ir import GraphIR, NodeKind, evaluate
from fhetrain.quantizer import LutTable
from fhetrain.tfhe_sim import Simulator, run_circuit
from oracles import quarter_square_product, random_codes


def test_fsq_table():
    t = fsq_table(5)
    assert t.lookup(5) == 6 and t.lookup(-5) == 6 and t.lookup(1) == 0 and t.lookup(-16) == 64


@pytest.mark.parametrize("a,b,want", [(3, 2, 6), (-3, 2, -6)])
def test_quarter_square_examples(a, b, want):
    t = fsq_table(5)
    assert t.lookup(a + b) - t.lookup(a - b) == want == quarter_square_product(a, b)


def test_quarter_square_exhaustive_5bit():
    t = fsq_table(6)
    a, b = np.meshgrid(np.arange(-16, 16), np.arange(-16, 16))
    np.testing.assert_array_equal(t.lookup(a + b) - t.lookup(a - b), a * b)


def _graph_2x2(bits=4):
    g = GraphIR()
    q = 2 ** (bits - 1) - 1
    g.add_node("A", NodeKind.INPUT, shape=[2, 2], range=[-q, q], scale=1.0, bits=bits)
    g.add_node("B", NodeKind.INPUT, shape=[2, 2], range=[-q, q], scale=1.0, bits=bits)
    g.add_node("C", NodeKind.MATMUL, ["A", "B"])
    g.add_node("out", NodeKind.OUTPUT, ["C"])
    return g


@given(st.lists(st.integers(-7, 7), min_size=8, max_size=8))
def test_matmul_lowering_2x2(vals):
    A, B = np.array(vals[:4]).reshape(2, 2), np.array(vals[4:]).reshape(2, 2)
    c = partition_graph(_graph_2x2())
    out, _ = run_circuit(c, {"A": A, "B": B})
    np.testing.assert_array_equal(out["out"], A @ B)
    # 2 PBS per scalar product, k products per cell
    assert c.total_pbs() == 2 * 2 * 2 * 2


def test_logistic_pbs_count_formula(compiled):
    d, B = 30, 8
    c = compiled("logistic", d, batch=B).circuit
    formula = 2 * d * B + B + 2 * d * B + d + 1
    assert c.total_pbs() == formula == 999
    rng = np.random.default_rng(0)
    _, cost = run_circuit(c, random_codes(c.inputs, rng))
    assert cost.table_pbs == formula
    assert cost.rounding_pbs == c.rounding_pbs()


def test_single_lut_partition():
    g = GraphIR()
    g.add_node("x", NodeKind.INPUT, shape=[3], range=[-7, 7], scale=1.0, bits=4)
    g.tables["neg"] = LutTable.from_function("neg", 4, 5, lambda v: -v)
    g.add_node("l", NodeKind.LUT, ["x"], table_id="neg")
    g.add_node("o", NodeKind.OUTPUT, ["l"])
    c = partition_graph(g)
    assert len(c.partitions) == 1
    p = c.partitions[0]
    assert p.arith_ops == [] and p.expr == Ref("x") and p.pbs.table_id == "neg"


def test_add_into_lut_is_one_partition():
    g = GraphIR()
    for n in "ab":
        g.add_node(n, NodeKind.INPUT, shape=[2], range=[-3, 3], scale=1.0, bits=3)
    g.tables["id"] = LutTable.from_function("id", 4, 4, lambda v: v)
    g.add_node("s", NodeKind.ADD, ["a", "b"])
    g.add_node("l", NodeKind.LUT, ["s"], table_id="id")
    g.add_node("o", NodeKind.OUTPUT, ["l"])
    c = partition_graph(g)
    assert len(c.partitions) == 1
    assert c.partitions[0].expr == Add(Ref("a"), Ref("b"))
    assert c.partitions[0].arith_ops == ["Add"]


def test_parameter_sets_match_distinct_widths(compiled):
    for model in [("logistic", 30), ("mlp", 30, (30,), "relu"), ("mlp", 10, (15,), "relu")]:
        c = compiled(*model).circuit
        widths = {p.pbs_width for p in c.partitions if p.pbs is not None}
        assert len(c.param_sets) == len(widths) >= 2
        assert sorted(c.param_sets) == sorted(widths)


def test_assign_bitwidths_examples():
    # one product of 2-bit values [-1, 1] through the quarter-square path
    p = Partition("p", "x", Ref("a"), (1,), None, 0, (-1, 1))
    assert assign_bitwidths(p)[0] == 2
    p = Partition("p", "x", Ref("a"), (1,), None, 0, (-200, 1000))
    assert assign_bitwidths(p)[0] == 11
    with pytest.raises(CompileError, match="smaller batch"):
        assign_bitwidths(Partition("p", "x", Ref("a"), (1,), None, 0, (0, 2**30)))


def test_single_element_sum_keeps_width():
    assert acc_width(-7, 7) == 4


@given(st.integers(-(2**20), 2**20), st.integers(0, 2**20))
def test_acc_width_bound(lo, span):
    hi = lo + span
    w = acc_width(lo, hi)
    assert max(abs(lo), abs(hi)) <= 2 ** (w - 1) - 1


def test_accumulator_cap_is_enforced(compiled):
    # the default cap compiles; a tight one trips on the gradient accumulators
    g = compiled().int_graph
    assert partition_graph(g).max_w_acc() <= 24
    with pytest.raises(CompileError, match="accumulator needs"):
        partition_graph(g, max_acc_bits=8)


def test_pbs_width_limit(compiled):
    with pytest.raises(CompileError):
        partition_graph(compiled().int_graph, max_pbs_bits=4)


def test_dangling_float_node():
    g = GraphIR()
    g.add_node("x", NodeKind.INPUT, shape=[2], range=[-7, 7], scale=1.0, bits=4)
    g.add_node("s", NodeKind.SIGMOID, ["x"])
    g.add_node("o", NodeKind.OUTPUT, ["s"])
    with pytest.raises(CompileError):
        partition_graph(g)


def test_compile_is_deterministic(compiled):
    g = compiled().int_graph
    assert partition_graph(g).dump() == partition_graph(g).dump()


def test_partitions_respect_dependencies(compiled):
    c = compiled("mlp", 6, (4,), "relu", 3).circuit
    seen = set(c.inputs)
    from fhetrain.compiler import expr_refs

    for p in c.partitions:
        assert set(expr_refs(p.expr)) <= seen
        seen.add(p.id)
    assert set(c.outputs.values()) <= seen


def _exhaustive(compiled, kind, d, hidden, batch, bits):
    m = compiled(kind, d, hidden, "relu" if hidden else "sigmoid", batch, bits)
    c = m.circuit
    names = list(c.inputs)
    axes = []
    for n in names:
        lo, hi = c.inputs[n]["range"]
        size = int(np.prod(c.inputs[n]["shape"]))
        axes.append([np.array(v).reshape(c.inputs[n]["shape"]) for v in itertools.product(range(lo, hi + 1), repeat=size)])
    sim = Simulator()
    count = 0
    for combo in itertools.product(*axes):
        feed = dict(zip(names, combo))
        got, _ = sim.run(c, feed)
        want = evaluate(m.int_graph, feed)
        assert all(np.array_equal(got[k], want[k]) for k in want), feed
        count += 1
    assert sim.stats.overflows == 0
    return count


@pytest.mark.parametrize("d,bits", [(1, 3), (2, 2), (3, 2)])
def test_exhaustive_small_logistic(compiled, d, bits):
    assert _exhaustive(compiled, "logistic", d, (), 1, bits) > 100


def test_exhaustive_small_mlp(compiled):
    assert _exhaustive(compiled, "mlp", 1, (1,), 1, 2) > 100


@pytest.mark.parametrize(
    "model", [("logistic", 30, (), "sigmoid", 8), ("mlp", 30, (30,), "relu", 8), ("mlp", 10, (15,), "sigmoid", 8)]
)
def test_no_overflow_on_random_inputs(compiled, model):
    c = compiled(*model).circuit
    sim = Simulator()
    rng = np.random.default_rng(7)
    for _ in range(100):
        sim.run(c, random_codes(c.inputs, rng))
    assert sim.stats.overflows == 0 and sim.stats.max_acc_ratio <= 1.0


def test_expr_eval_matches_numpy():
    env = {"a": np.array([1, 2]), "b": np.array([3, -4])}
    np.testing.assert_array_equal(expr_eval(Add(Ref("a"), Ref("b")), env), [4, -2])


def test_circuit_dump_lists_partitions(compiled):
    doc = compiled().circuit.to_document()
    assert doc["total_pbs"] == 999
    assert len(doc["partitions"]) == len(compiled().circuit.partitions)
    assert {"w_acc", "pbs_width", "param_set", "multi_sum"} <= set(doc["partitions"][0])
