"""Mini-batch training with the compiled circuit, plus the float reference run.

Each batch is quantized ("encrypted"), pushed through the compiled batch
circuit, and the updated weight codes are decrypted and re-quantized onto the
weight grid before the next batch. The float reference applies the same float
training graph to the same batches in the same order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .calibration import CalibrationConfig, CalibrationStats, collect_stats
from .compiler import CompiledCircuit, partition_graph
from .datasets import Dataset
from .graph_ir import GraphIR, ModelSpec, NodeKind, activation, build_training_graph, evaluate as eval_graph, sigmoid
from .quantizer import (
    QParams,
    SaturationCounter,
    dequantize,
    input_qparams,
    insert_quantizers,
    fuse_float_chains,
    quantize,
)
from .tfhe_sim import CostModel, CostReport, Simulator, estimate_cost

BACKENDS = ("circuit", "graph")
SCALINGS = ("minmax", "percentile")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 8
    lr_exp: int = 0
    bits: int = 4
    seed: int = 0
    patience: Optional[int] = 200
    shuffle: bool = True
    rounding: str = "truncate"
    backend: str = "circuit"
    calib_batches: int = 64
    calib_seed: int = 0
    test_size: float = 0.2
    scaling: str = "percentile"
    percentile: float = 5.0
    refresh_weights: bool = False

    def __post_init__(self):
        if self.batch < 1:
            raise TrainingError("batch size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.backend not in BACKENDS:
            raise TrainingError(f"unknown backend {self.backend!r}")
        if self.scaling not in SCALINGS:
            raise TrainingError(f"unknown scaling {self.scaling!r}")
        if self.patience is not None and self.patience < 1:
            raise TrainingError("patience must be >= 1 or None")
        if not 0 < self.test_size < 1:
            raise TrainingError("test_size must be in (0, 1)")

    @property
    def lr(self) -> float:
        return 2.0**self.lr_exp

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        return cls(**doc)


# compilation ------------------------------------------------------------------------


@dataclass
class CompiledModel:
    spec: ModelSpec
    float_graph: GraphIR
    stats: CalibrationStats
    quantized_graph: GraphIR
    int_graph: GraphIR
    circuit: CompiledCircuit
    qparams: Dict[str, QParams]


def compile_model(spec: ModelSpec, bits: int = 4, rounding: str = "truncate", calib: Optional[CalibrationConfig] = None) -> CompiledModel:
    """Float graph -> calibration -> quantized graph -> fused integer graph -> circuit."""
    g = build_training_graph(spec)
    stats = collect_stats(g, calib or CalibrationConfig())
    qg = insert_quantizers(g, stats, bits, rounding)
    ig = fuse_float_chains(qg)
    circuit = partition_graph(ig)
    return CompiledModel(spec, g, stats, qg, ig, circuit, input_qparams(ig))


# data preparation -------------------------------------------------------------------


@dataclass
class FeatureScaler:
    """Affine map of each feature onto [-1, 1], fitted on the training split; clips outside."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, method: str = "minmax", percentile: float = 5.0) -> "FeatureScaler":
        if method == "minmax":
            lo, hi = X.min(axis=0), X.max(axis=0)
        elif method == "percentile":
            lo, hi = np.percentile(X, percentile, axis=0), np.percentile(X, 100 - percentile, axis=0)
        else:
            raise TrainingError(f"unknown scaling {method!r}")
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(lo, hi)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.clip(2.0 * (X - self.lo) / (self.hi - self.lo) - 1.0, -1.0, 1.0)


@dataclass
class Split:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    clipped: SaturationCounter = field(default_factory=SaturationCounter)


def prepare(ds: Dataset, cfg: TrainConfig) -> Split:
    """Stratified train/test split and feature scaling fitted on the training part."""
    from sklearn.model_selection import train_test_split

    if ds.n == 0:
        raise TrainingError("dataset is empty")
    Xtr, Xte, ytr, yte = train_test_split(ds.X, ds.y, test_size=cfg.test_size, stratify=ds.y, random_state=cfg.seed)
    sc = FeatureScaler.fit(Xtr, cfg.scaling, cfg.percentile)
    split = Split(sc.transform(Xtr), ytr.astype(np.float64), sc.transform(Xte), yte.astype(np.float64))
    split.clipped.record(np.abs(split.X_train) >= 1.0)
    return split


# evaluation -------------------------------------------------------------------------


def predict_proba(weights: Dict[str, np.ndarray], X: np.ndarray, spec: ModelSpec) -> np.ndarray:
    h = np.asarray(X, dtype=np.float64)
    layers = len(spec.layer_sizes) - 1
    act = NodeKind.RELU if spec.activation == "relu" else NodeKind.SIGMOID
    for i in range(layers):
        z = h @ weights[f"weight_{i}"] + weights[f"bias_{i}"]
        h = sigmoid(z) if i == layers - 1 else activation(act, z)
    return h.ravel()


def evaluate(weights: Dict[str, np.ndarray], X: np.ndarray, y: np.ndarray, spec: ModelSpec) -> float:
    """Fraction of examples whose thresholded probability (>= 0.5) equals the label."""
    if len(y) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    return float(np.mean((predict_proba(weights, X, spec) >= 0.5) == (np.asarray(y) > 0.5)))


# training ---------------------------------------------------------------------------


@dataclass
class Track:
    curve: List[float] = field(default_factory=list)
    initial_accuracy: float = 0.0
    best_accuracy: float = 0.0
    best_batch: int = 0
    last_accuracy: float = 0.0
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        """Accuracy of the returned weights, i.e. the best held-out checkpoint."""
        return self.best_accuracy

    def observe(self, acc: float, weights: Dict[str, np.ndarray]) -> bool:
        self.curve.append(acc)
        self.last_accuracy = acc
        if acc > self.best_accuracy:
            self.best_accuracy = acc
            self.best_batch = len(self.curve)
            self.weights = {k: np.array(v) for k, v in weights.items()}
            return True
        return False

    def summary(self) -> dict:
        return {
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "best_batch": self.best_batch,
            "last_accuracy": self.last_accuracy,
            "batches": len(self.curve),
        }


@dataclass
class TrainReport:
    spec: ModelSpec
    config: TrainConfig
    quantized: Optional[Track]
    reference: Optional[Track]
    batch_cost: Optional[CostReport] = None
    batches: int = 0
    stopped_early: bool = False
    saturation: Dict[str, dict] = field(default_factory=dict)
    overflows: int = 0
    dataset: str = ""
    quantized_weight_codes: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total_latency_s(self) -> float:
        return self.batch_cost.total_latency_s * self.batches if self.batch_cost else 0.0

    def to_dict(self) -> dict:
        doc = {
            "dataset": self.dataset,
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "batches": self.batches,
            "stopped_early": self.stopped_early,
            "overflows": self.overflows,
            "saturation": self.saturation,
            "estimated_fhe_latency_s": self.total_latency_s,
        }
        if self.batch_cost is not None:
            doc["batch_cost"] = self.batch_cost.to_dict()
        for name in ("quantized", "reference"):
            t = getattr(self, name)
            if t is not None:
                doc[name] = t.summary()
                doc[name]["curve"] = list(t.curve)
                doc[name]["weights"] = {k: np.asarray(v).tolist() for k, v in t.weights.items()}
        if self.quantized_weight_codes:
            doc["weight_codes"] = {k: v.tolist() for k, v in self.quantized_weight_codes.items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_tsv(self) -> str:
        """Per-batch accuracy curves as tab-separated columns."""
        cols = ["batch"]
        tracks = [(n, t) for n, t in (("quantized", self.quantized), ("fp32", self.reference)) if t is not None]
        cols += [f"{n}_accuracy" for n, _ in tracks]
        lines = ["\t".join(cols)]
        lines.append("\t".join(["0"] + [f"{t.initial_accuracy:.6f}" for _, t in tracks]))
        for i in range(self.batches):
            lines.append("\t".join([str(i + 1)] + [f"{t.curve[i]:.6f}" for _, t in tracks]))
        return "\n".join(lines) + "\n"


def _init_weights(spec: ModelSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    sizes = spec.layer_sizes
    w = {}
    for i in range(len(sizes) - 1):
        w[f"weight_{i}"] = rng.uniform(-1.0, 1.0, (sizes[i], sizes[i + 1]))
        w[f"bias_{i}"] = rng.uniform(-1.0, 1.0, (sizes[i + 1],))
    return w


def _batches(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Index arrays of full batches, epoch after epoch; the incomplete tail batch is dropped."""
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for s in range(0, n - cfg.batch + 1, cfg.batch):
            yield order[s : s + cfg.batch]


def _check(ds: Dataset, spec: ModelSpec, cfg: TrainConfig) -> None:
    if ds.n == 0:
        raise TrainingError("dataset is empty")
    if ds.d != spec.d:
        raise TrainingError(f"dataset has {ds.d} features, model expects {spec.d}")
    if spec.batch != cfg.batch:
        raise TrainingError(f"model batch {spec.batch} differs from training batch {cfg.batch}")
    if spec.lr_exp != cfg.lr_exp:
        raise TrainingError("model and training learning rates differ")


def _run(
    ds: Dataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    quantized: bool,
    reference: bool,
    model: Optional[CompiledModel] = None,
    cost_model: Optional[CostModel] = None,
) -> TrainReport:
    _check(ds, spec, cfg)
    split = prepare(ds, cfg)
    rng = np.random.default_rng(cfg.seed)
    init = _init_weights(spec, rng)
    report = TrainReport(spec, cfg, None, None, dataset=ds.provenance)
    acc = lambda w: evaluate(w, split.X_test, split.y_test, spec)

    if quantized:
        model = model or compile_model(spec, cfg.bits, cfg.rounding, CalibrationConfig(cfg.calib_batches, cfg.calib_seed))
        qp = model.qparams
        sat = {"features": split.clipped, "inputs": SaturationCounter(), "weights_init": SaturationCounter(), "weights_update": SaturationCounter()}
        codes = {k: quantize(v, qp[k], sat["weights_init"]) for k, v in init.items()}
        out_meta = {k[: -len("_out")]: v for k, v in model.circuit.output_scales.items()}
        sim = Simulator(cost_model or CostModel())
        dq = lambda c: {k: dequantize(v, qp[k]) for k, v in c.items()}
        qtrack = Track(initial_accuracy=acc(dq(codes)), weights=dq(codes))
        qtrack.best_accuracy = -1.0
        report.quantized = qtrack
        report.batch_cost = estimate_cost(
            model.circuit,
            sim.model,
            refresh_params=spec.n_params if cfg.refresh_weights else 0,
            refresh_bits=cfg.bits,
        )
    if reference:
        fw = {k: np.array(v) for k, v in init.items()}
        rtrack = Track(initial_accuracy=acc(fw), weights=dict(fw))
        rtrack.best_accuracy = -1.0
        report.reference = rtrack
        fgraph = model.float_graph if model is not None else build_training_graph(spec)

    since = 0
    for idx in _batches(len(split.y_train), cfg, rng):
        xb, yb = split.X_train[idx], split.y_train[idx][:, None]
        improved = False
        if quantized:
            feed = dict(codes)
            feed["X"] = quantize(xb, qp["X"], sat["inputs"])
            feed["Y"] = quantize(yb, qp["Y"], sat["inputs"])
            if cfg.backend == "circuit":
                out, _ = sim.run(model.circuit, feed)
            else:
                out = eval_graph(model.int_graph, feed)
            # decrypt, then re-encrypt fresh codes on each parameter's own grid
            for k in codes:
                meta = out_meta[k]
                raw = np.asarray(out[k + "_out"], dtype=np.int64)
                if np.isclose(meta["scale"], qp[k].scale, rtol=1e-12):
                    new = np.clip(raw, qp[k].qmin, qp[k].qmax)
                    sat["weights_update"].record(new != raw)
                else:
                    new = quantize(raw * meta["scale"], qp[k], sat["weights_update"])
                codes[k] = new
            improved = qtrack.observe(acc(dq(codes)), dq(codes))
        if reference:
            feed = dict(fw)
            feed["X"], feed["Y"] = xb, yb
            out = eval_graph(fgraph, feed)
            fw = {k: np.asarray(out[k + "_out"]) for k in fw}
            r_improved = rtrack.observe(acc(fw), fw)
            if not quantized:
                improved = r_improved
        report.batches += 1
        since = 0 if improved else since + 1
        if cfg.patience is not None and since >= cfg.patience:
            report.stopped_early = True
            break

    for t in (report.quantized, report.reference):
        if t is not None and not t.curve:
            t.best_accuracy = t.last_accuracy = t.initial_accuracy
    if quantized:
        report.saturation = {k: {"clipped": c.clipped, "total": c.total, "rate": c.rate} for k, c in sat.items()}
        report.overflows = sim.stats.overflows
        report.quantized_weight_codes = {k: np.array(v) for k, v in codes.items()}
    return report


def train(ds: Dataset, spec: ModelSpec, cfg: TrainConfig, model: Optional[CompiledModel] = None, cost_model: Optional[CostModel] = None) -> TrainReport:
    """Quantized training through the compiled circuit, with the float reference on the same batches."""
    return _run(ds, spec, cfg, True, True, model, cost_model)


def train_fp32_reference(ds: Dataset, spec: ModelSpec, cfg: TrainConfig) -> TrainReport:
    """Float-only run; early stopping follows the float held-out accuracy."""
    return _run(ds, spec, cfg, False, True)


def epoch_latency_s(batch_cost: CostReport, rows: int, batch: int) -> float:
    """Estimated time for one pass over ``rows`` examples (the tail batch counts as full)."""
    return batch_cost.total_latency_s * -(-rows // batch)
