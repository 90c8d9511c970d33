"""Partition an integer graph into multi-sum + PBS circuits.

A partition is a tensor of independent scalar sub-circuits with the same shape:
a levelled expression over ciphertexts (additions, subtractions, plaintext
integer multiplications, sums, index remaps) followed by one programmable
bootstrap. Ciphertext products are lowered with the quarter-square identity::

    a * b = floor((a + b)**2 / 4) - floor((a - b)**2 / 4)

which costs two PBS per scalar product. The floors cancel because ``a + b`` and
``a - b`` always have the same parity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .graph_ir import GraphError, GraphIR, NodeKind, topo_order
from .quantizer import LutTable, shifted_range, signed_width

MAX_ACC_BITS = 24
MAX_PBS_BITS = 16


class CompileError(GraphError):
    pass


# levelled expressions ---------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Add:
    a: "Expr"
    b: "Expr"


@dataclass(frozen=True)
class Sub:
    a: "Expr"
    b: "Expr"


@dataclass(frozen=True)
class Scale:
    """Multiplication by a plaintext integer."""

    k: int
    a: "Expr"


@dataclass(frozen=True)
class Sum:
    a: "Expr"
    axis: int


@dataclass(frozen=True)
class Transpose:
    a: "Expr"


@dataclass(frozen=True)
class Expand:
    a: "Expr"
    axis: int


Expr = Union[Ref, Add, Sub, Scale, Sum, Transpose, Expand]


def expr_eval(e: Expr, env: Dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(e, Ref):
        return env[e.name]
    if isinstance(e, Add):
        return expr_eval(e.a, env) + expr_eval(e.b, env)
    if isinstance(e, Sub):
        return expr_eval(e.a, env) - expr_eval(e.b, env)
    if isinstance(e, Scale):
        return e.k * expr_eval(e.a, env)
    if isinstance(e, Sum):
        # fixed left-to-right reduction order
        return np.add.reduce(expr_eval(e.a, env), axis=e.axis)
    if isinstance(e, Transpose):
        return expr_eval(e.a, env).T
    if isinstance(e, Expand):
        return np.expand_dims(expr_eval(e.a, env), e.axis)
    raise TypeError(e)


def expr_shape(e: Expr, shapes: Dict[str, Tuple[int, ...]]) -> Tuple[int, ...]:
    if isinstance(e, Ref):
        return tuple(shapes[e.name])
    if isinstance(e, (Add, Sub)):
        return tuple(np.broadcast_shapes(expr_shape(e.a, shapes), expr_shape(e.b, shapes)))
    if isinstance(e, Scale):
        return expr_shape(e.a, shapes)
    if isinstance(e, Sum):
        s = list(expr_shape(e.a, shapes))
        del s[e.axis]
        return tuple(s) or ()
    if isinstance(e, Transpose):
        return tuple(reversed(expr_shape(e.a, shapes)))
    if isinstance(e, Expand):
        s = list(expr_shape(e.a, shapes))
        s.insert(e.axis, 1)
        return tuple(s)
    raise TypeError(e)


def expr_range(e: Expr, ranges: Dict[str, Tuple[int, int]], shapes) -> Tuple[int, int]:
    """Worst-case integer interval of every element of ``e``."""
    if isinstance(e, Ref):
        return ranges[e.name]
    if isinstance(e, Add):
        (a0, a1), (b0, b1) = expr_range(e.a, ranges, shapes), expr_range(e.b, ranges, shapes)
        return a0 + b0, a1 + b1
    if isinstance(e, Sub):
        (a0, a1), (b0, b1) = expr_range(e.a, ranges, shapes), expr_range(e.b, ranges, shapes)
        return a0 - b1, a1 - b0
    if isinstance(e, Scale):
        a0, a1 = expr_range(e.a, ranges, shapes)
        return min(e.k * a0, e.k * a1), max(e.k * a0, e.k * a1)
    if isinstance(e, Sum):
        m = expr_shape(e.a, shapes)[e.axis]
        a0, a1 = expr_range(e.a, ranges, shapes)
        return m * a0, m * a1
    return expr_range(e.a, ranges, shapes)


def expr_ops(e: Expr, shapes) -> List[str]:
    """Arithmetic (levelled) operations in ``e``, outermost first."""
    if isinstance(e, Ref):
        return []
    if isinstance(e, (Add, Sub)):
        return [type(e).__name__] + expr_ops(e.a, shapes) + expr_ops(e.b, shapes)
    if isinstance(e, (Scale, Sum)):
        return [type(e).__name__] + expr_ops(e.a, shapes)
    return expr_ops(e.a, shapes)


def expr_levelled_count(e: Expr, shapes) -> int:
    """Scalar levelled ciphertext operations needed to evaluate ``e`` once."""
    if isinstance(e, Ref):
        return 0
    n_out = int(np.prod(expr_shape(e, shapes), dtype=np.int64))
    if isinstance(e, (Add, Sub)):
        return n_out + expr_levelled_count(e.a, shapes) + expr_levelled_count(e.b, shapes)
    if isinstance(e, Scale):
        return n_out + expr_levelled_count(e.a, shapes)
    if isinstance(e, Sum):
        m = expr_shape(e.a, shapes)[e.axis]
        return n_out * (m - 1) + expr_levelled_count(e.a, shapes)
    return expr_levelled_count(e.a, shapes)


def expr_refs(e: Expr) -> List[str]:
    if isinstance(e, Ref):
        return [e.name]
    if isinstance(e, (Add, Sub)):
        return expr_refs(e.a) + expr_refs(e.b)
    return expr_refs(e.a)


def expr_to_text(e: Expr) -> str:
    if isinstance(e, Ref):
        return e.name
    if isinstance(e, Add):
        return f"({expr_to_text(e.a)} + {expr_to_text(e.b)})"
    if isinstance(e, Sub):
        return f"({expr_to_text(e.a)} - {expr_to_text(e.b)})"
    if isinstance(e, Scale):
        return f"{e.k}*{expr_to_text(e.a)}"
    if isinstance(e, Sum):
        return f"sum[{e.axis}]{expr_to_text(e.a)}"
    if isinstance(e, Transpose):
        return f"T({expr_to_text(e.a)})"
    return f"expand[{e.axis}]({expr_to_text(e.a)})"


# circuits ---------------------------------------------------------------------------


@dataclass
class PbsSpec:
    table_id: str
    n_r: int = 0
    rounding: str = "truncate"


@dataclass
class Partition:
    id: str
    label: str
    expr: Expr
    shape: Tuple[int, ...]
    pbs: Optional[PbsSpec]
    w_acc: int
    acc_range: Tuple[int, int]
    pbs_width: Optional[int] = None
    param_set: Optional[int] = None
    out_range: Tuple[int, int] = (0, 0)
    arith_ops: List[str] = field(default_factory=list)
    levelled_ops: int = 0

    @property
    def elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def n_r(self) -> int:
        return self.pbs.n_r if self.pbs else 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "shape": list(self.shape),
            "elements": self.elements,
            "multi_sum": expr_to_text(self.expr),
            "arith_ops": len(self.arith_ops),
            "levelled_ops": self.levelled_ops,
            "acc_range": list(self.acc_range),
            "w_acc": self.w_acc,
            "n_r": self.n_r,
            "rounding": self.pbs.rounding if self.pbs else None,
            "pbs_table": self.pbs.table_id if self.pbs else None,
            "pbs_width": self.pbs_width,
            "param_set": self.param_set,
            "pbs_count": self.elements if self.pbs else 0,
            "rounding_pbs_count": self.elements * self.n_r,
        }


@dataclass
class CompiledCircuit:
    partitions: List[Partition]
    tables: Dict[str, LutTable]
    param_sets: Dict[int, int]
    inputs: Dict[str, dict]
    outputs: Dict[str, str]
    output_scales: Dict[str, dict]
    bits: int

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        s = {k: tuple(v["shape"]) for k, v in self.inputs.items()}
        s.update({p.id: p.shape for p in self.partitions})
        return s

    def ranges(self) -> Dict[str, Tuple[int, int]]:
        r = {k: tuple(v["range"]) for k, v in self.inputs.items()}
        r.update({p.id: p.out_range for p in self.partitions})
        return r

    def pbs_counts(self) -> Dict[int, int]:
        """Static table-PBS count per input width (rounding bit extractions excluded)."""
        out: Dict[int, int] = {}
        for p in self.partitions:
            if p.pbs is not None:
                out[p.pbs_width] = out.get(p.pbs_width, 0) + p.elements
        return dict(sorted(out.items()))

    def total_pbs(self) -> int:
        return sum(self.pbs_counts().values())

    def rounding_pbs(self) -> int:
        return sum(p.elements * p.n_r for p in self.partitions)

    def max_w_acc(self) -> int:
        return max(p.w_acc for p in self.partitions)

    def to_document(self) -> dict:
        return {
            "format": "fhetrain-circuit",
            "version": 1,
            "bits": self.bits,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "output_scales": self.output_scales,
            "param_sets": [{"id": i, "pbs_input_width": w} for w, i in sorted(self.param_sets.items())],
            "pbs_counts": {str(k): v for k, v in self.pbs_counts().items()},
            "rounding_pbs": self.rounding_pbs(),
            "total_pbs": self.total_pbs(),
            "partitions": [p.to_dict() for p in self.partitions],
            "tables": {k: {"input_bits": t.input_bits, "output_bits": t.output_bits} for k, t in self.tables.items()},
        }

    def dump(self) -> str:
        return json.dumps(self.to_document(), indent=1)


def fsq_table(width: int) -> LutTable:
    """floor(x**2 / 4) over every signed ``width``-bit code."""
    top = 2 ** (width - 1)
    out_bits = signed_width(0, top * top // 4)
    return LutTable.from_function(f"fsq_{width}", width, out_bits, lambda x: (x * x) // 4, label="floor(x^2/4)")


def acc_width(lo: int, hi: int) -> int:
    """Sign bit plus magnitude bits for the worst-case accumulator."""
    m = max(abs(lo), abs(hi))
    return math.ceil(math.log2(m + 1)) + 1


class _Compiler:
    def __init__(self, g: GraphIR, max_acc_bits: int, max_pbs_bits: int):
        self.g = g
        self.max_acc_bits = max_acc_bits
        self.max_pbs_bits = max_pbs_bits
        self.partitions: List[Partition] = []
        self.tables: Dict[str, LutTable] = dict(g.tables)
        self.shapes: Dict[str, Tuple[int, ...]] = {}
        self.ranges: Dict[str, Tuple[int, int]] = {}
        self.bits = 0

    def _partition(self, label: str, expr: Expr, pbs: Optional[PbsSpec]) -> Ref:
        pid = f"p{len(self.partitions):04d}"
        shape = expr_shape(expr, self.shapes)
        lo, hi = expr_range(expr, self.ranges, self.shapes)
        part = Partition(pid, label, expr, shape, pbs, 0, (lo, hi))
        if pbs is not None:
            table = self.tables[pbs.table_id]
            c0, c1 = shifted_range(lo, hi, pbs.n_r, pbs.rounding)
            if c0 < table.lo or c1 > table.hi:
                raise CompileError(
                    f"{label}: shifted accumulator [{c0}, {c1}] exceeds the {table.input_bits}-bit domain of {pbs.table_id}"
                )
            if table.input_bits > self.max_pbs_bits:
                raise CompileError(f"{label}: {table.input_bits}-bit PBS exceeds the {self.max_pbs_bits}-bit limit")
            reach = table.entries[c0 - table.lo : c1 - table.lo + 1]
            part.out_range = (int(reach.min()), int(reach.max()))
            part.pbs_width = table.input_bits
        else:
            part.out_range = (lo, hi)
        part.w_acc, part.param_set = assign_bitwidths(part, max_acc_bits=self.max_acc_bits)
        part.arith_ops = expr_ops(expr, self.shapes)
        part.levelled_ops = expr_levelled_count(expr, self.shapes)
        self.partitions.append(part)
        self.shapes[pid] = shape
        self.ranges[pid] = part.out_range
        return Ref(pid)

    def lower_product(self, label: str, a: Expr, b: Expr, matmul: bool) -> Expr:
        return lower_matmul(self, label, a, b, matmul)

    def run(self) -> CompiledCircuit:
        g = self.g
        vals: Dict[str, Expr] = {}
        consts: Dict[str, int] = {}
        inputs = {}
        outputs = {}
        out_scales = {}
        for nid in topo_order(g):
            node = g.nodes[nid]
            k = node.kind
            ops = g.operands(nid)
            a = node.attrs
            if k == NodeKind.INPUT:
                lo, hi = a["range"]
                self.shapes[nid] = tuple(g.shapes[nid])
                self.ranges[nid] = (int(lo), int(hi))
                inputs[nid] = {
                    "shape": list(g.shapes[nid]),
                    "range": [int(lo), int(hi)],
                    "width": signed_width(lo, hi),
                    "scale": a.get("scale"),
                    "role": a.get("role"),
                }
                self.bits = max(self.bits, int(a.get("bits", 0)))
                vals[nid] = Ref(nid)
            elif k == NodeKind.CONSTANT:
                v = a["value"]
                if float(v) != int(v):
                    raise CompileError(f"{nid}: non-integer constant {v} in an integer graph")
                consts[nid] = int(v)
            elif k in (NodeKind.ADD, NodeKind.SUB):
                x, y = (vals[o] for o in ops)
                vals[nid] = Add(x, y) if k == NodeKind.ADD else Sub(x, y)
            elif k == NodeKind.MUL:
                cs = [o for o in ops if o in consts]
                if len(cs) == 1:
                    other = next(o for o in ops if o not in consts)
                    vals[nid] = Scale(consts[cs[0]], vals[other])
                elif not cs:
                    vals[nid] = self.lower_product(nid, vals[ops[0]], vals[ops[1]], matmul=False)
                else:
                    raise CompileError(f"{nid}: product of two constants")
            elif k == NodeKind.MATMUL:
                vals[nid] = self.lower_product(nid, vals[ops[0]], vals[ops[1]], matmul=True)
            elif k == NodeKind.REDUCE_SUM:
                vals[nid] = Sum(vals[ops[0]], int(a.get("axis", 0)))
                if expr_shape(vals[nid], self.shapes) != tuple(g.shapes[nid]):
                    raise CompileError(f"{nid}: ReduceSum shape mismatch")
            elif k == NodeKind.TRANSPOSE:
                vals[nid] = Transpose(vals[ops[0]])
            elif k == NodeKind.LUT:
                pbs = PbsSpec(a["table_id"], int(a.get("n_r", 0)), a.get("rounding", "truncate"))
                vals[nid] = self._partition(nid, vals[ops[0]], pbs)
            elif k == NodeKind.OUTPUT:
                e = vals[ops[0]]
                if not isinstance(e, Ref):
                    e = self._partition(nid, e, None)
                outputs[nid] = e.name
                out_scales[nid] = {key: a[key] for key in ("scale", "param_scale", "bits") if key in a}
            else:
                raise CompileError(f"{nid}: dangling float node {k.value} in integer graph")
        widths = sorted({p.pbs_width for p in self.partitions if p.pbs is not None})
        param_sets = {w: i for i, w in enumerate(widths)}
        for p in self.partitions:
            if p.pbs is not None:
                p.param_set = param_sets[p.pbs_width]
        return CompiledCircuit(self.partitions, self.tables, param_sets, inputs, outputs, out_scales, self.bits)


def lower_matmul(comp: _Compiler, label: str, a: Expr, b: Expr, matmul: bool = True) -> Expr:
    """Quarter-square lowering of ``a @ b`` (or ``a * b`` elementwise).

    Emits two PBS partitions evaluating ``floor(s**2/4)`` on ``a + b`` and
    ``a - b`` for every scalar product, and returns the levelled expression that
    adds them up.
    """
    if matmul:
        sa, sb = expr_shape(a, comp.shapes), expr_shape(b, comp.shapes)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise CompileError(f"{label}: bad MatMul shapes {sa} x {sb}")
        a, b = Expand(a, 2), Expand(b, 0)
    (a0, a1), (b0, b1) = expr_range(a, comp.ranges, comp.shapes), expr_range(b, comp.ranges, comp.shapes)
    width = max(signed_width(a0 + b0, a1 + b1), signed_width(a0 - b1, a1 - b0))
    if width > comp.max_pbs_bits:
        raise CompileError(f"{label}: operand sums need {width}-bit PBS, limit is {comp.max_pbs_bits}")
    table = fsq_table(width)
    comp.tables.setdefault(table.table_id, table)
    plus = comp._partition(f"{label}/fsq+", Add(a, b), PbsSpec(table.table_id))
    minus = comp._partition(f"{label}/fsq-", Sub(a, b), PbsSpec(table.table_id))
    diff = Sub(plus, minus)
    return Sum(diff, 1) if matmul else diff


def assign_bitwidths(part: Partition, max_acc_bits: int = MAX_ACC_BITS) -> Tuple[int, Optional[int]]:
    """Accumulator width from the worst-case multi-sum interval; parameter sets are numbered later."""
    lo, hi = part.acc_range
    if part.pbs is not None and part.pbs.n_r and part.pbs.rounding == "nearest":
        hi += 1 << (part.pbs.n_r - 1)
    w = acc_width(lo, hi)
    if w > max_acc_bits:
        raise CompileError(
            f"{part.label}: accumulator needs {w} bits (cap {max_acc_bits}); use fewer bits or a smaller batch"
        )
    return w, None


def partition_graph(g: GraphIR, max_acc_bits: int = MAX_ACC_BITS, max_pbs_bits: int = MAX_PBS_BITS) -> CompiledCircuit:
    """Compile a fused integer graph into ordered multi-sum + PBS partitions."""
    return _Compiler(g, max_acc_bits, max_pbs_bits).run()
