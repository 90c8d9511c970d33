"""Training computation graphs: node kinds, shape rules, builder, interpreter and JSON format."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

GRAPH_FORMAT_VERSION = 1


class GraphError(ValueError):
    """Malformed graph or graph document."""


class CycleError(GraphError):
    pass


class ShapeError(GraphError):
    pass


class NodeKind(str, Enum):
    MATMUL = "MatMul"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    DIV = "Div"
    REDUCE_SUM = "ReduceSum"
    SIGMOID = "Sigmoid"
    RELU = "ReLU"
    TRANSPOSE = "Transpose"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"
    LUT = "Lut"
    CONSTANT = "Constant"
    INPUT = "Input"
    OUTPUT = "Output"


BINARY_KINDS = frozenset(
    {NodeKind.MATMUL, NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.DIV}
)
UNARY_KINDS = frozenset(
    {
        NodeKind.SIGMOID,
        NodeKind.RELU,
        NodeKind.REDUCE_SUM,
        NodeKind.TRANSPOSE,
        NodeKind.QUANTIZE,
        NodeKind.DEQUANTIZE,
        NodeKind.LUT,
        NodeKind.OUTPUT,
    }
)
SOURCE_KINDS = frozenset({NodeKind.CONSTANT, NodeKind.INPUT})
ACTIVATIONS = {"sigmoid": NodeKind.SIGMOID, "relu": NodeKind.RELU}


def arity(kind: NodeKind) -> int:
    if kind in BINARY_KINDS:
        return 2
    if kind in UNARY_KINDS:
        return 1
    return 0


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    attrs: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind.value, "attrs": _jsonable(self.attrs)}


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    port: int


@dataclass
class ModelSpec:
    """Model to train: logistic regression or an MLP with sigmoid output."""

    kind: str = "logistic"
    d: int = 30
    hidden: Tuple[int, ...] = ()
    activation: str = "sigmoid"
    batch: int = 8
    lr_exp: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("logistic", "mlp"):
            raise GraphError(f"unsupported model kind {self.kind!r}")
        if self.kind == "logistic" and self.hidden:
            raise GraphError("logistic model cannot have hidden layers")
        if self.d < 1 or self.batch < 1:
            raise GraphError("d and batch must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise GraphError("hidden sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise GraphError(f"unsupported activation {self.activation!r}")

    @property
    def lr(self) -> float:
        return 2.0 ** self.lr_exp

    @property
    def layer_sizes(self) -> List[int]:
        return [self.d, *self.hidden, 1]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def n_weights(self) -> int:
        """Trainable weights excluding biases (930 for 30 inputs and 30 hidden units)."""
        sizes = self.layer_sizes
        return sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))

    def to_dict(self):
        return {
            "kind": self.kind,
            "d": self.d,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "batch": self.batch,
            "lr_exp": self.lr_exp,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


class GraphIR:
    """A DAG of single-output nodes; an edge's tensor is its producer's output.

    Edge data (shapes, calibration statistics, integer ranges) is therefore keyed
    by producer node id.
    """

    def __init__(self):
        self.nodes: Dict[str, Node] = {}
        self.edges: List[Edge] = []
        self.inputs: List[str] = []
        self.outputs: List[str] = []
        self.shapes: Dict[str, Tuple[int, ...]] = {}
        self.tables: Dict[str, Any] = {}

    # construction -----------------------------------------------------------------

    def add_node(self, node_id: str, kind: NodeKind, operands: Sequence[str] = (), **attrs) -> str:
        kind = NodeKind(kind)
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id!r}")
        if len(operands) != arity(kind):
            raise GraphError(f"{kind.value} expects {arity(kind)} operands, got {len(operands)}")
        for op in operands:
            if op not in self.nodes:
                raise GraphError(f"unknown operand {op!r} for {node_id!r}")
        self.nodes[node_id] = Node(node_id, kind, dict(attrs))
        for port, op in enumerate(operands):
            self.edges.append(Edge(op, node_id, port))
        if kind == NodeKind.INPUT:
            self.inputs.append(node_id)
        elif kind == NodeKind.OUTPUT:
            self.outputs.append(node_id)
        self.shapes[node_id] = infer_shape(self, node_id)
        return node_id

    # queries ----------------------------------------------------------------------

    def operands(self, node_id: str) -> List[str]:
        ins = sorted((e for e in self.edges if e.dst == node_id), key=lambda e: e.port)
        return [e.src for e in ins]

    def consumers(self, node_id: str) -> List[str]:
        return sorted({e.dst for e in self.edges if e.src == node_id})

    def kinds(self) -> set:
        return {n.kind for n in self.nodes.values()}

    def compute_kinds(self) -> set:
        return self.kinds() - {NodeKind.INPUT, NodeKind.OUTPUT, NodeKind.CONSTANT}

    def structurally_equal(self, other: "GraphIR") -> bool:
        def canon(g):
            return (
                {k: (n.kind, json.dumps(_jsonable(n.attrs), sort_keys=True)) for k, n in g.nodes.items()},
                sorted((e.src, e.dst, e.port) for e in g.edges),
                list(g.inputs),
                list(g.outputs),
                {k: tuple(v) for k, v in g.shapes.items()},
                {k: json.dumps(t.to_dict(), sort_keys=True) for k, t in g.tables.items()},
            )

        return canon(self) == canon(other)

    def copy(self) -> "GraphIR":
        return deserialize(serialize(self))


def _broadcast(a, b, what):
    try:
        return tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError as exc:
        raise ShapeError(f"{what}: cannot broadcast {tuple(a)} with {tuple(b)}") from exc


def infer_shape(g: GraphIR, node_id: str) -> Tuple[int, ...]:
    node = g.nodes[node_id]
    ins = [g.shapes[o] for o in g.operands(node_id)]
    kind = node.kind
    if kind == NodeKind.INPUT:
        return tuple(int(s) for s in node.attrs["shape"])
    if kind == NodeKind.CONSTANT:
        return tuple(np.shape(node.attrs["value"]))
    if kind == NodeKind.MATMUL:
        a, b = ins
        if len(a) != 2 or len(b) != 2:
            raise ShapeError(f"{node_id}: MatMul needs 2-D operands, got {a} and {b}")
        if a[1] != b[0]:
            raise ShapeError(f"{node_id}: MatMul inner dimensions differ: {a} x {b}")
        return (a[0], b[1])
    if kind in (NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.DIV):
        return _broadcast(ins[0], ins[1], node_id)
    if kind == NodeKind.REDUCE_SUM:
        axis = int(node.attrs.get("axis", 0))
        shape = list(ins[0])
        if not -len(shape) <= axis < len(shape):
            raise ShapeError(f"{node_id}: axis {axis} out of range for {tuple(shape)}")
        del shape[axis]
        return tuple(shape) or (1,)
    if kind == NodeKind.TRANSPOSE:
        if len(ins[0]) != 2:
            raise ShapeError(f"{node_id}: Transpose needs a 2-D operand")
        return (ins[0][1], ins[0][0])
    return tuple(ins[0])


# ordering ---------------------------------------------------------------------------


def topo_order(g: GraphIR) -> List[str]:
    """Kahn's algorithm; ready nodes are released in node-id order."""
    indeg = {n: 0 for n in g.nodes}
    succ: Dict[str, List[str]] = {n: [] for n in g.nodes}
    for e in g.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    ready = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(ready, m)
    if len(order) != len(g.nodes):
        stuck = sorted(n for n, k in indeg.items() if k > 0)
        raise CycleError(f"graph has a cycle through {stuck[:5]}")
    return order


def validate(g: GraphIR) -> None:
    """Check arity, acyclicity, shapes and the parameter input/output pairing."""
    for n in g.nodes.values():
        got = len(g.operands(n.id))
        if got != arity(n.kind):
            raise GraphError(f"{n.id}: {n.kind.value} has {got} operands, expects {arity(n.kind)}")
    for n in topo_order(g):
        expect = infer_shape(g, n)
        if n in g.shapes and tuple(g.shapes[n]) != expect:
            raise ShapeError(f"{n}: declared shape {tuple(g.shapes[n])} != inferred {expect}")
        g.shapes[n] = expect
    params = [i for i in g.inputs if g.nodes[i].attrs.get("role") == "param"]
    outs = set(g.outputs)
    for p in params:
        if f"{p}_out" not in outs:
            raise GraphError(f"trained parameter {p!r} has no updated output")
    for o in g.outputs:
        src = o[: -len("_out")] if o.endswith("_out") else None
        if src is not None and src not in g.inputs:
            raise GraphError(f"output {o!r} has no matching parameter input")


# builder ----------------------------------------------------------------------------


class _Builder:
    def __init__(self):
        self.g = GraphIR()
        self.count = 0

    def node(self, kind: NodeKind, *operands, **attrs) -> str:
        node_id = f"n{self.count:03d}_{kind.value}"
        self.count += 1
        return self.g.add_node(node_id, kind, operands, **attrs)

    def const(self, value) -> str:
        return self.node(NodeKind.CONSTANT, value=float(value))


def build_training_graph(spec: ModelSpec) -> GraphIR:
    """One mini-batch of SGD: forward pass, backward pass and parameter update.

    Loss is binary cross-entropy on a sigmoid output, so the output error is
    ``p - y``. Division by the batch size and the learning-rate product are
    explicit ``Div``/``Mul`` nodes with constant operands.
    """
    b = _Builder()
    g = b.g
    sizes = spec.layer_sizes
    n_layers = len(sizes) - 1
    B = spec.batch

    g.add_node("X", NodeKind.INPUT, shape=[B, spec.d], role="data", domain=[-1.0, 1.0])
    g.add_node("Y", NodeKind.INPUT, shape=[B, 1], role="label", domain=[0.0, 1.0])
    for i in range(n_layers):
        g.add_node(f"weight_{i}", NodeKind.INPUT, shape=[sizes[i], sizes[i + 1]], role="param")
        g.add_node(f"bias_{i}", NodeKind.INPUT, shape=[sizes[i + 1]], role="param")

    act_kind = ACTIVATIONS[spec.activation]
    acts = ["X"]
    pre = []
    for i in range(n_layers):
        mm = b.node(NodeKind.MATMUL, acts[-1], f"weight_{i}")
        z = b.node(NodeKind.ADD, mm, f"bias_{i}")
        pre.append(z)
        last = i == n_layers - 1
        acts.append(b.node(NodeKind.SIGMOID if last else act_kind, z))

    err = b.node(NodeKind.SUB, acts[-1], "Y")
    batch_c = b.const(B)
    lr_c = b.const(spec.lr)
    for i in reversed(range(n_layers)):
        at = b.node(NodeKind.TRANSPOSE, acts[i])
        gw = b.node(NodeKind.MATMUL, at, err)
        gw = b.node(NodeKind.DIV, gw, batch_c)
        gw = b.node(NodeKind.MUL, gw, lr_c)
        gb = b.node(NodeKind.REDUCE_SUM, err, axis=0)
        gb = b.node(NodeKind.DIV, gb, batch_c)
        gb = b.node(NodeKind.MUL, gb, lr_c)
        if i > 0:
            wt = b.node(NodeKind.TRANSPOSE, f"weight_{i}")
            back = b.node(NodeKind.MATMUL, err, wt)
            dact = b.node(act_kind, pre[i - 1], grad=True)
            next_err = b.node(NodeKind.MUL, back, dact)
        new_w = b.node(NodeKind.SUB, f"weight_{i}", gw)
        new_b = b.node(NodeKind.SUB, f"bias_{i}", gb)
        g.add_node(f"weight_{i}_out", NodeKind.OUTPUT, [new_w])
        g.add_node(f"bias_{i}_out", NodeKind.OUTPUT, [new_b])
        if i > 0:
            err = next_err
    validate(g)
    return g


# interpreter ------------------------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activation(kind: NodeKind, x, grad: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if kind == NodeKind.SIGMOID:
        s = sigmoid(x)
        return s * (1.0 - s) if grad else s
    if kind == NodeKind.RELU:
        return (x > 0).astype(np.float64) if grad else np.maximum(x, 0.0)
    raise GraphError(f"{kind} is not an activation")


def remove_lsbs(x, n_r: int, rounding: str = "truncate"):
    """Arithmetic model of bit removal: drop ``n_r`` LSBs (floor), optionally rounding first."""
    x = np.asarray(x, dtype=np.int64)
    if n_r == 0:
        return x
    if rounding == "nearest":
        x = x + (1 << (n_r - 1))
    return x >> n_r


def evaluate(g: GraphIR, inputs: Dict[str, Any], keep_all: bool = False) -> Dict[str, np.ndarray]:
    """Interpret ``g`` directly with numpy.

    Float graphs evaluate in float64. Integer graphs (quantized, with ``Lut`` nodes)
    evaluate on int64 exactly; ``Dequantize``/``Quantize`` switch between the two.
    Returns the named outputs, or every node's value with ``keep_all``.
    """
    from . import quantizer  # tables and quantizers live there

    vals: Dict[str, np.ndarray] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        k = node.kind
        ops = [vals[o] for o in g.operands(nid)]
        a = node.attrs
        if k == NodeKind.INPUT:
            if nid not in inputs:
                raise GraphError(f"missing input {nid!r}")
            v = np.asarray(inputs[nid])
            if tuple(v.shape) != tuple(g.shapes[nid]):
                raise ShapeError(f"input {nid!r} has shape {v.shape}, expected {g.shapes[nid]}")
            if "scale" in a:
                v = v.astype(np.int64)
        elif k == NodeKind.CONSTANT:
            v = np.asarray(a["value"])
        elif k == NodeKind.MATMUL:
            v = ops[0] @ ops[1]
        elif k == NodeKind.ADD:
            v = ops[0] + ops[1]
        elif k == NodeKind.SUB:
            v = ops[0] - ops[1]
        elif k == NodeKind.MUL:
            v = ops[0] * ops[1]
        elif k == NodeKind.DIV:
            v = ops[0] / ops[1]
        elif k == NodeKind.REDUCE_SUM:
            v = ops[0].sum(axis=int(a.get("axis", 0)))
            v = v.reshape(g.shapes[nid])
        elif k == NodeKind.TRANSPOSE:
            v = ops[0].T
        elif k in (NodeKind.SIGMOID, NodeKind.RELU):
            v = activation(k, ops[0], bool(a.get("grad", False)))
        elif k == NodeKind.DEQUANTIZE:
            codes = remove_lsbs(ops[0], int(a.get("n_r", 0)), a.get("rounding", "truncate"))
            v = (codes + float(a.get("offset", 0.0))) * float(a["scale"])
        elif k == NodeKind.QUANTIZE:
            v = quantizer.quantize(ops[0], quantizer.QParams.from_attrs(a))
        elif k == NodeKind.LUT:
            table = g.tables[a["table_id"]]
            codes = remove_lsbs(ops[0], int(a.get("n_r", 0)), a.get("rounding", "truncate"))
            v = table.lookup(codes)
        elif k == NodeKind.OUTPUT:
            v = ops[0]
        else:  # pragma: no cover
            raise GraphError(f"cannot evaluate {k}")
        vals[nid] = np.asarray(v)
    if keep_all:
        return vals
    return {o: vals[o] for o in g.outputs}


# serialization ----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Enum):
        return obj.value
    return obj


def to_document(g: GraphIR) -> dict:
    return {
        "format": "fhetrain-graph",
        "version": GRAPH_FORMAT_VERSION,
        "nodes": [g.nodes[n].to_dict() for n in g.nodes],
        "edges": [{"from": e.src, "to": e.dst, "port": e.port} for e in g.edges],
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
        "shapes": {k: list(v) for k, v in g.shapes.items()},
        "tables": {k: t.to_dict() for k, t in g.tables.items()},
    }


def serialize(g: GraphIR) -> str:
    return json.dumps(to_document(g), indent=1, sort_keys=False)


def from_document(doc: dict) -> GraphIR:
    from .quantizer import LutTable

    try:
        nodes = doc["nodes"]
        edges = doc["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph document: {exc}") from exc
    g = GraphIR()
    for nd in nodes:
        try:
            kind = NodeKind(nd["kind"])
        except ValueError as exc:
            raise GraphError(f"unknown node kind {nd.get('kind')!r}") from exc
        g.nodes[nd["id"]] = Node(nd["id"], kind, dict(nd.get("attrs", {})))
    for e in edges:
        if e["from"] not in g.nodes or e["to"] not in g.nodes:
            raise GraphError(f"edge references unknown node: {e}")
        g.edges.append(Edge(e["from"], e["to"], int(e["port"])))
    g.inputs = list(doc.get("inputs", []))
    g.outputs = list(doc.get("outputs", []))
    for name in g.inputs + g.outputs:
        if name not in g.nodes:
            raise GraphError(f"declared input/output {name!r} is not a node")
    g.tables = {k: LutTable.from_dict(v) for k, v in doc.get("tables", {}).items()}
    declared = {k: tuple(v) for k, v in doc.get("shapes", {}).items()}
    g.shapes = dict(declared)
    validate(g)
    return g


def deserialize(text: str) -> GraphIR:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"malformed graph document: {exc}") from exc
    return from_document(doc)
