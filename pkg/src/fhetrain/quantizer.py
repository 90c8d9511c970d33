"""Symmetric n-bit quantization of a float training graph and LUT fusion.

Two passes turn the float graph into the integer graph that gets compiled:

``insert_quantizers``
    Builds a quantized graph. Arithmetic that TFHE can do on ciphertexts
    (MatMul, Add, Sub, ReduceSum, ciphertext products) stays on integer codes;
    everything else (activations, division by the batch size, the learning-rate
    product, requantization) becomes an explicit
    ``Dequantize -> float ops -> Quantize`` chain hanging off an integer
    accumulator.

``fuse_float_chains``
    Replaces every such chain by one ``Lut`` node whose table holds the chain's
    result for each possible input code.

Accumulators entering a chain have their low bits removed first (``n_r`` from
``decompose_scale``), so tables stay small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .calibration import CalibrationStats, EdgeStats
from .graph_ir import (
    GraphError,
    GraphIR,
    NodeKind,
    activation,
    remove_lsbs,
    topo_order,
    validate,
)

DEFAULT_BITS = 4
ROUNDING_MODES = ("truncate", "nearest")


class QuantizationError(GraphError):
    pass


class FusionError(QuantizationError):
    pass


class LutDomainError(RuntimeError):
    """A code outside a table's domain reached a lookup."""


# quantizers -------------------------------------------------------------------------


@dataclass(frozen=True)
class QParams:
    scale: float
    bit_width: int
    zero_point: int = 0
    signed: bool = True
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"scale must be positive, got {self.scale}")
        if self.bit_width < 2:
            raise QuantizationError("bit width must be >= 2")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit_width - 1) - 1

    @property
    def qmin(self) -> int:
        return -self.qmax

    def to_attrs(self) -> dict:
        return {"scale": self.scale, "bits": self.bit_width}

    @classmethod
    def from_attrs(cls, attrs) -> "QParams":
        return cls(float(attrs["scale"]), int(attrs["bits"]))


@dataclass
class SaturationCounter:
    total: int = 0
    clipped: int = 0

    def record(self, clipped_mask) -> None:
        mask = np.asarray(clipped_mask)
        self.total += int(mask.size)
        self.clipped += int(mask.sum())

    @property
    def rate(self) -> float:
        return self.clipped / self.total if self.total else 0.0


def make_qparams(stats: EdgeStats, n: int = DEFAULT_BITS) -> QParams:
    """Symmetric signed quantizer covering ``[-abs_max, abs_max]`` with ``2**(n-1)-1`` steps per side."""
    if n < 2:
        raise QuantizationError("bit width must be >= 2")
    abs_max = stats.abs_max if isinstance(stats, EdgeStats) else float(stats)
    if abs_max == 0:
        return QParams(1.0, n, degenerate=True)
    return QParams(abs_max / (2 ** (n - 1) - 1), n)


def quantize(x, q: QParams, counter: Optional[SaturationCounter] = None) -> np.ndarray:
    """Round half to even, then clip to the symmetric range."""
    v = np.rint(np.asarray(x, dtype=np.float64) / q.scale)
    if counter is not None:
        counter.record((v > q.qmax) | (v < q.qmin))
    return np.clip(v, q.qmin, q.qmax).astype(np.int64)


def dequantize(codes, q: QParams) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * q.scale


@dataclass(frozen=True)
class ScaleDecomposition:
    M: float
    M0: float
    n_r: int

    @property
    def no_rounding(self) -> bool:
        return self.M >= 1.0


def decompose_scale(M: float) -> ScaleDecomposition:
    """Split ``M`` into ``M0 * 2**-n_r`` with ``M0`` in [0.5, 1); ``M >= 1`` keeps ``n_r = 0``."""
    if not M > 0:
        raise QuantizationError(f"requantization scale must be positive, got {M}")
    if M >= 1.0:
        return ScaleDecomposition(M, M, 0)
    m0, exp = math.frexp(M)
    return ScaleDecomposition(M, m0, -exp)


def signed_width(lo: int, hi: int) -> int:
    """Bits for a signed integer holding every value in ``[lo, hi]``, sign bit included."""
    m = max(abs(int(lo)), abs(int(hi)))
    return max(1, math.ceil(math.log2(m + 1)) + 1) if m else 1


def shifted_range(lo: int, hi: int, n_r: int, rounding: str) -> Tuple[int, int]:
    a, b = remove_lsbs(np.array([lo, hi]), n_r, rounding)
    return int(a), int(b)


# float chains and tables ------------------------------------------------------------

_ACT_OPS = {
    "sigmoid": (NodeKind.SIGMOID, False),
    "sigmoid_grad": (NodeKind.SIGMOID, True),
    "relu": (NodeKind.RELU, False),
    "relu_grad": (NodeKind.RELU, True),
}


def evaluate_chain(steps: List[dict], codes) -> np.ndarray:
    """Apply a chain of float steps (dequantize ... quantize) to integer codes."""
    v = np.asarray(codes)
    for st in steps:
        op = st["op"]
        if op == "dequantize":
            v = (v.astype(np.float64) + st.get("offset", 0.0)) * st["scale"]
        elif op in _ACT_OPS:
            kind, grad = _ACT_OPS[op]
            v = activation(kind, v, grad)
        elif op == "div":
            v = v / st["value"]
        elif op == "mul":
            v = v * st["value"]
        elif op == "quantize":
            v = quantize(v, QParams(st["scale"], st["bits"]))
        else:
            raise FusionError(f"unknown chain step {op!r}")
    return np.asarray(v)


@dataclass
class LutTable:
    """Integer lookup table over every signed code of ``input_bits``."""

    table_id: str
    input_bits: int
    output_bits: int
    entries: np.ndarray
    provenance: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64)
        if self.entries.shape != (2 ** self.input_bits,):
            raise QuantizationError(
                f"table {self.table_id}: {self.entries.size} entries for {self.input_bits}-bit input"
            )
        lim = 2 ** (self.output_bits - 1)
        if self.entries.size and (self.entries.min() < -lim or self.entries.max() >= lim):
            raise QuantizationError(f"table {self.table_id}: entry outside {self.output_bits}-bit range")

    @property
    def lo(self) -> int:
        return -(2 ** (self.input_bits - 1))

    @property
    def hi(self) -> int:
        return 2 ** (self.input_bits - 1) - 1

    def domain(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1, dtype=np.int64)

    def lookup(self, codes) -> np.ndarray:
        c = np.asarray(codes, dtype=np.int64)
        if c.size and (c.min() < self.lo or c.max() > self.hi):
            raise LutDomainError(
                f"table {self.table_id}: code range [{c.min()}, {c.max()}] outside [{self.lo}, {self.hi}]"
            )
        return self.entries[c - self.lo]

    @property
    def output_range(self) -> Tuple[int, int]:
        return int(self.entries.min()), int(self.entries.max())

    @classmethod
    def from_chain(cls, table_id: str, input_bits: int, steps: List[dict]) -> "LutTable":
        out_bits = next(st["bits"] for st in reversed(steps) if st["op"] == "quantize")
        domain = np.arange(-(2 ** (input_bits - 1)), 2 ** (input_bits - 1), dtype=np.int64)
        return cls(table_id, input_bits, out_bits, evaluate_chain(steps, domain), list(steps))

    @classmethod
    def from_function(cls, table_id: str, input_bits: int, output_bits: int, fn, label: str = "") -> "LutTable":
        domain = np.arange(-(2 ** (input_bits - 1)), 2 ** (input_bits - 1), dtype=np.int64)
        prov = [{"op": label}] if label else []
        return cls(table_id, input_bits, output_bits, np.asarray(fn(domain), dtype=np.int64), prov)

    def to_dict(self) -> dict:
        return {
            "table_id": self.table_id,
            "input_bits": self.input_bits,
            "output_bits": self.output_bits,
            "entries": self.entries.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc) -> "LutTable":
        return cls(doc["table_id"], int(doc["input_bits"]), int(doc["output_bits"]), doc["entries"], list(doc.get("provenance", [])))


# quantizer insertion ----------------------------------------------------------------


@dataclass
class _Src:
    """Graph input not yet quantized."""

    edge: str


@dataclass
class _Int:
    node: str
    scale: float
    qp: Optional[QParams]
    edge: str


@dataclass
class _Pending:
    source: _Int
    steps: Tuple[tuple, ...]
    edge: str


def _is_const(g: GraphIR, nid: str) -> bool:
    return g.nodes[nid].kind == NodeKind.CONSTANT


def _structural_arith(g: GraphIR) -> Dict[str, bool]:
    out: Dict[str, bool] = {}
    for nid in topo_order(g):
        k = g.nodes[nid].kind
        ops = g.operands(nid)
        if k in (NodeKind.MATMUL, NodeKind.REDUCE_SUM, NodeKind.ADD, NodeKind.SUB):
            out[nid] = True
        elif k == NodeKind.MUL:
            out[nid] = not any(_is_const(g, o) for o in ops)
        elif k == NodeKind.TRANSPOSE:
            out[nid] = out[ops[0]]
        else:
            out[nid] = False
    return out


class _UnionFind:
    def __init__(self):
        self.parent: Dict[str, str] = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


class _Inserter:
    def __init__(self, g: GraphIR, stats: CalibrationStats, n: int, rounding: str):
        if rounding not in ROUNDING_MODES:
            raise QuantizationError(f"unknown rounding mode {rounding!r}")
        self.g = g
        self.stats = stats
        self.n = n
        self.rounding = rounding
        self.q = GraphIR()
        self.ranges: Dict[str, Tuple[int, int]] = {}
        self.count = 0
        self.cache: Dict[tuple, _Int] = {}
        self.group_qp: Dict[str, QParams] = {}
        self.uf = _UnionFind()
        self.arith = _structural_arith(g)
        for nid in g.nodes:
            if g.nodes[nid].kind in (NodeKind.ADD, NodeKind.SUB):
                a, b = g.operands(nid)
                if not self.arith[a] and not self.arith[b]:
                    self.uf.union(a, b)
        members: Dict[str, List[str]] = {}
        for nid in g.nodes:
            members.setdefault(self.uf.find(nid), []).append(nid)
        self.group_abs = {
            root: max(self._stats(m).abs_max for m in ms) for root, ms in members.items() if not _is_const(g, root)
        }

    # helpers

    def _stats(self, edge: str) -> EdgeStats:
        if edge not in self.stats:
            raise QuantizationError(f"no calibration statistics for edge {edge!r}")
        return self.stats[edge]

    def _new_id(self, kind: NodeKind) -> str:
        nid = f"q{self.count:03d}_{kind.value}"
        self.count += 1
        return nid

    def _add(self, nid, kind, operands=(), rng=None, **attrs) -> str:
        if rng is not None:
            attrs["range"] = [int(rng[0]), int(rng[1])]
            self.ranges[nid] = (int(rng[0]), int(rng[1]))
        self.q.add_node(nid, kind, list(operands), **attrs)
        return nid

    def group_qparams(self, edge: str) -> QParams:
        root = self.uf.find(edge)
        if root not in self.group_qp:
            self.group_qp[root] = make_qparams(self.group_abs[root], self.n)
        return self.group_qp[root]

    def _set_group(self, edge: str, qp: QParams) -> None:
        self.group_qp[self.uf.find(edge)] = qp

    def _fixed_group(self, edge: str) -> Optional[QParams]:
        return self.group_qp.get(self.uf.find(edge))

    # materialization

    def materialize(self, rep, qp: Optional[QParams] = None) -> _Int:
        """Produce an ``n``-bit integer value on grid ``qp`` (default: the edge's group grid)."""
        if qp is None:
            qp = self.group_qparams(rep.edge)
        if isinstance(rep, _Src):
            return self._input(rep.edge, qp)
        if isinstance(rep, _Int):
            if rep.qp is not None and rep.qp == qp:
                return rep
            rep = _Pending(rep, (), rep.edge)
        key = (rep.source.node, rep.steps, qp.scale, qp.bit_width)
        if key in self.cache:
            return self.cache[key]
        out = self._emit_chain(rep, qp)
        self.cache[key] = out
        return out

    def _input(self, name: str, qp: QParams) -> _Int:
        key = ("input", name, qp.scale, qp.bit_width)
        if key in self.cache:
            return self.cache[key]
        if name in self.q.nodes:
            raise QuantizationError(f"input {name!r} quantized on two different grids")
        node = self.g.nodes[name]
        lo, hi = node.attrs.get("domain", [-math.inf, math.inf])
        rng = (
            int(np.clip(np.rint(lo / qp.scale), qp.qmin, qp.qmax)),
            int(np.clip(np.rint(hi / qp.scale), qp.qmin, qp.qmax)),
        )
        attrs = dict(node.attrs)
        attrs.update(qp.to_attrs())
        self._add(name, NodeKind.INPUT, (), rng, **attrs)
        out = _Int(name, qp.scale, qp, name)
        self.cache[key] = out
        self._set_group(name, qp)
        return out

    def _emit_chain(self, rep: _Pending, qp: QParams) -> _Int:
        src = rep.source
        ref = make_qparams(self._stats(src.edge), self.n)
        dec = decompose_scale(src.scale / ref.scale)
        n_r = dec.n_r
        lo, hi = shifted_range(*self.ranges[src.node], n_r, self.rounding)
        eff = src.scale * 2 ** n_r
        offset = (2 ** n_r - 1) / 2 ** (n_r + 1) if self.rounding == "truncate" else 0.0
        steps = [{"op": "dequantize", "scale": eff, "offset": offset}]
        cur = self._add(
            self._new_id(NodeKind.DEQUANTIZE),
            NodeKind.DEQUANTIZE,
            [src.node],
            scale=eff,
            offset=offset,
            n_r=n_r,
            rounding=self.rounding,
            M=dec.M,
            M0=dec.M0,
        )
        for kind, value in rep.steps:
            if kind in (NodeKind.DIV, NodeKind.MUL):
                c = self._add(self._new_id(NodeKind.CONSTANT), NodeKind.CONSTANT, (), value=value)
                cur = self._add(self._new_id(kind), kind, [cur, c])
                steps.append({"op": kind.value.lower(), "value": value})
            else:
                grad = bool(value)
                cur = self._add(self._new_id(kind), kind, [cur], grad=grad)
                steps.append({"op": kind.value.lower() + ("_grad" if grad else "")})
        steps.append({"op": "quantize", **{"scale": qp.scale, "bits": qp.bit_width}})
        codes = evaluate_chain(steps, np.arange(lo, hi + 1))
        nid = self._add(
            self._new_id(NodeKind.QUANTIZE),
            NodeKind.QUANTIZE,
            [cur],
            (codes.min(), codes.max()),
            **qp.to_attrs(),
        )
        return _Int(nid, qp.scale, qp, rep.edge)

    def ensure_nbit(self, rep) -> _Int:
        """Operand for a ciphertext product or a ReduceSum: integer codes within the n-bit range."""
        if isinstance(rep, _Int):
            lo, hi = self.ranges[rep.node]
            qmax = 2 ** (self.n - 1) - 1
            if -qmax <= lo and hi <= qmax:
                return rep
            qp = make_qparams(self._stats(rep.edge), self.n)
            return self.materialize(rep, qp)
        return self.materialize(rep)

    # arithmetic

    def _mm_range(self, a, b, k):
        prods = [x * y for x in self.ranges[a] for y in self.ranges[b]]
        return k * min(prods), k * max(prods)

    def _align(self, acc: _Int, other, edge: str) -> _Int:
        """Bring an n-bit operand onto the accumulator grid via an integer plaintext multiplier."""
        fixed = self._fixed_group(other.edge) if not isinstance(other, _Int) else other.qp
        if fixed is None:
            want = self.group_qparams(other.edge)
            k = max(1, int(round(want.scale / acc.scale)))
            qp = QParams(k * acc.scale, self.n)
            self._set_group(other.edge, qp)
            opnd = self.materialize(other, qp)
        else:
            ratio = fixed.scale / acc.scale
            k = max(1, int(round(ratio)))
            if abs(ratio - k) <= 1e-9 * ratio:
                opnd = self.materialize(other, fixed)
            else:
                opnd = self.materialize(other, QParams(k * acc.scale, self.n))
        if k == 1:
            return opnd
        c = self._add(self._new_id(NodeKind.CONSTANT), NodeKind.CONSTANT, (), value=k)
        lo, hi = self.ranges[opnd.node]
        nid = self._add(self._new_id(NodeKind.MUL), NodeKind.MUL, [opnd.node, c], (k * lo, k * hi), scale=acc.scale)
        return _Int(nid, acc.scale, None, edge)

    def run(self) -> GraphIR:
        g = self.g
        reps: Dict[str, object] = {}
        for nid in topo_order(g):
            node = g.nodes[nid]
            k = node.kind
            ops = g.operands(nid)
            if k == NodeKind.INPUT:
                reps[nid] = _Src(nid)
            elif k == NodeKind.CONSTANT:
                reps[nid] = None
            elif k == NodeKind.MATMUL or (k == NodeKind.MUL and self.arith[nid]):
                a = self.ensure_nbit(reps[ops[0]])
                b = self.ensure_nbit(reps[ops[1]])
                inner = self.q.shapes[a.node][1] if k == NodeKind.MATMUL else 1
                rng = self._mm_range(a.node, b.node, inner)
                self._add(nid, k, [a.node, b.node], rng, scale=a.scale * b.scale)
                reps[nid] = _Int(nid, a.scale * b.scale, None, nid)
            elif k in (NodeKind.MUL, NodeKind.DIV):
                if not _is_const(g, ops[1]) and k == NodeKind.DIV:
                    raise QuantizationError(f"{nid}: division by a non-constant cannot be tabulated")
                ci = 0 if _is_const(g, ops[0]) else 1
                value = float(g.nodes[ops[ci]].attrs["value"])
                reps[nid] = self._extend(reps[ops[1 - ci]], (k, value), nid)
            elif k in (NodeKind.SIGMOID, NodeKind.RELU):
                reps[nid] = self._extend(reps[ops[0]], (k, bool(node.attrs.get("grad", False))), nid)
            elif k in (NodeKind.ADD, NodeKind.SUB):
                reps[nid] = self._addsub(nid, k, reps[ops[0]], reps[ops[1]])
            elif k == NodeKind.REDUCE_SUM:
                a = self.ensure_nbit(reps[ops[0]])
                axis = int(node.attrs.get("axis", 0))
                m = self.q.shapes[a.node][axis]
                lo, hi = self.ranges[a.node]
                self._add(nid, k, [a.node], (m * lo, m * hi), axis=axis, scale=a.scale)
                reps[nid] = _Int(nid, a.scale, None, nid)
            elif k == NodeKind.TRANSPOSE:
                a = reps[ops[0]]
                if not isinstance(a, _Int):
                    a = self.materialize(a)
                self._add(nid, k, [a.node], self.ranges[a.node], scale=a.scale)
                reps[nid] = _Int(nid, a.scale, a.qp, nid)
            elif k == NodeKind.OUTPUT:
                a = reps[ops[0]]
                if not isinstance(a, _Int):
                    a = self.materialize(a, make_qparams(self._stats(a.edge), self.n))
                attrs = {"scale": a.scale}
                param = nid[: -len("_out")] if nid.endswith("_out") else None
                if param in self.q.nodes:
                    attrs["param_scale"] = self.q.nodes[param].attrs["scale"]
                    attrs["bits"] = self.n
                self._add(nid, k, [a.node], self.ranges[a.node], **attrs)
            else:
                raise QuantizationError(f"{nid}: cannot quantize {k.value} in a float graph")
        for name in g.inputs:
            if name not in self.q.nodes:
                self.materialize(_Src(name))
        self.q.inputs = [i for i in g.inputs]
        validate(self.q)
        return self.q

    def _extend(self, rep, step, nid) -> _Pending:
        if rep is None:
            raise QuantizationError(f"{nid}: constant operand where a tensor is required")
        if isinstance(rep, _Src):
            rep = self.materialize(rep)
        if isinstance(rep, _Int):
            return _Pending(rep, (step,), nid)
        return _Pending(rep.source, rep.steps + (step,), nid)

    def _is_acc(self, rep) -> bool:
        return isinstance(rep, _Int) and rep.qp is None

    def _addsub(self, nid, k, ra, rb) -> _Int:
        if self._is_acc(ra) and self._is_acc(rb):
            if not math.isclose(ra.scale, rb.scale, rel_tol=1e-12):
                raise QuantizationError(f"{nid}: adding accumulators on different grids")
            a, b = ra, rb
            scale = ra.scale
        elif self._is_acc(ra):
            a, b = ra, self._align(ra, rb, nid)
            scale = ra.scale
        elif self._is_acc(rb):
            a, b = self._align(rb, ra, nid), rb
            scale = rb.scale
        else:
            qp = self._fixed_group(ra.edge) or self.group_qparams(ra.edge)
            a, b = self.materialize(ra, qp), self.materialize(rb, qp)
            scale = qp.scale
        (alo, ahi), (blo, bhi) = self.ranges[a.node], self.ranges[b.node]
        rng = (alo + blo, ahi + bhi) if k == NodeKind.ADD else (alo - bhi, ahi - blo)
        self._add(nid, k, [a.node, b.node], rng, scale=scale)
        return _Int(nid, scale, None, nid)


def insert_quantizers(g: GraphIR, stats: CalibrationStats, n: int = DEFAULT_BITS, rounding: str = "truncate") -> GraphIR:
    """Quantized graph with explicit Quantize/Dequantize around every float chain."""
    return _Inserter(g, stats, n, rounding).run()


_FLOAT_UNARY = (NodeKind.SIGMOID, NodeKind.RELU)


def _trace_chain(qg: GraphIR, qnode: str) -> Tuple[str, List[str]]:
    """Walk back from a Quantize node to its Dequantize; return (dequantize id, chain ids)."""
    chain = []
    cur = qg.operands(qnode)[0]
    while True:
        node = qg.nodes[cur]
        if node.kind == NodeKind.DEQUANTIZE:
            return cur, chain[::-1]
        if node.kind in _FLOAT_UNARY:
            nxt = qg.operands(cur)[0]
        elif node.kind in (NodeKind.DIV, NodeKind.MUL, NodeKind.ADD, NodeKind.SUB):
            ops = qg.operands(cur)
            consts = [o for o in ops if qg.nodes[o].kind == NodeKind.CONSTANT]
            if node.kind not in (NodeKind.DIV, NodeKind.MUL) or len(consts) != 1:
                raise FusionError(f"{cur}: binary float {node.kind.value} cannot be tabulated")
            nxt = next(o for o in ops if o not in consts)
        else:
            raise FusionError(f"{qnode}: chain reaches {node.kind.value} {cur!r} before a Dequantize")
        if len(qg.consumers(cur)) != 1:
            raise FusionError(f"{cur}: float value shared outside its chain")
        chain.append(cur)
        cur = nxt


def _chain_steps(qg: GraphIR, deq: str, chain: List[str], qnode: str) -> List[dict]:
    da = qg.nodes[deq].attrs
    steps = [{"op": "dequantize", "scale": float(da["scale"]), "offset": float(da.get("offset", 0.0))}]
    for nid in chain:
        node = qg.nodes[nid]
        if node.kind in _FLOAT_UNARY:
            name = node.kind.value.lower() + ("_grad" if node.attrs.get("grad") else "")
            steps.append({"op": name})
        else:
            c = next(o for o in qg.operands(nid) if qg.nodes[o].kind == NodeKind.CONSTANT)
            steps.append({"op": node.kind.value.lower(), "value": float(qg.nodes[c].attrs["value"])})
    qa = qg.nodes[qnode].attrs
    steps.append({"op": "quantize", "scale": float(qa["scale"]), "bits": int(qa["bits"])})
    return steps


def fuse_float_chains(qg: GraphIR) -> GraphIR:
    """Collapse each ``Dequantize -> ... -> Quantize`` chain into one ``Lut`` node."""
    chains = {}
    absorbed = set()
    for nid in qg.nodes:
        if qg.nodes[nid].kind == NodeKind.QUANTIZE:
            deq, chain = _trace_chain(qg, nid)
            chains[nid] = (deq, chain)
            absorbed.update(chain)
            absorbed.add(deq)
    for nid, node in qg.nodes.items():
        if node.kind == NodeKind.CONSTANT and qg.consumers(nid) and set(qg.consumers(nid)) <= absorbed:
            absorbed.add(nid)

    out = GraphIR()
    float_kinds = {NodeKind.DEQUANTIZE, NodeKind.DIV, *_FLOAT_UNARY}
    for nid in topo_order(qg):
        if nid in absorbed:
            continue
        node = qg.nodes[nid]
        if node.kind in float_kinds:
            raise FusionError(f"{nid}: dangling float {node.kind.value} outside any chain")
        if node.kind == NodeKind.QUANTIZE:
            deq, chain = chains[nid]
            da = qg.nodes[deq].attrs
            src = qg.operands(deq)[0]
            n_r = int(da.get("n_r", 0))
            rounding = da.get("rounding", "truncate")
            lo, hi = shifted_range(*qg.nodes[src].attrs["range"], n_r, rounding)
            table_id = f"lut_{len(out.tables):03d}"
            table = LutTable.from_chain(table_id, signed_width(lo, hi), _chain_steps(qg, deq, chain, nid))
            out.tables[table_id] = table
            out.add_node(
                nid,
                NodeKind.LUT,
                [src],
                table_id=table_id,
                n_r=n_r,
                rounding=rounding,
                range=list(node.attrs["range"]),
                scale=node.attrs["scale"],
                bits=node.attrs["bits"],
            )
            continue
        out.add_node(nid, node.kind, qg.operands(nid), **node.attrs)
    out.inputs = list(qg.inputs)
    validate(out)
    return out


def quantize_graph(g: GraphIR, stats: CalibrationStats, n: int = DEFAULT_BITS, rounding: str = "truncate") -> GraphIR:
    return fuse_float_chains(insert_quantizers(g, stats, n, rounding))


def input_qparams(g: GraphIR) -> Dict[str, QParams]:
    return {name: QParams.from_attrs(g.nodes[name].attrs) for name in g.inputs}
