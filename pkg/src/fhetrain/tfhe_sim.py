"""Exact simulator of TFHE integer semantics and a PBS cost model.

Ciphertexts are plain integers. Levelled operations are exact integer arithmetic
checked against the accumulator width the compiler assigned; a PBS is a table
lookup. No lattice noise is sampled; noise is tracked only as a count of
levelled operations since the last bootstrap.

The rounding operator removes low bits one at a time. For bit ``i`` of a
``w``-bit value, multiplying by ``2**(w-1-i)`` modulo ``2**w`` moves that bit to
the most significant position where a one-bit PBS reads it and returns it at
its original weight; subtracting the result clears the bit. Once ``n_r`` bits
are cleared the value is an exact multiple of ``2**n_r`` and is shifted down
before the final table lookup.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .compiler import (
    Add,
    CompiledCircuit,
    Expand,
    Expr,
    Partition,
    Ref,
    Scale,
    Sub,
    Sum,
    Transpose,
    expr_eval,
)
from .quantizer import LutDomainError, LutTable

THREADS_ENV = "FHETRAIN_THREADS"
DEFAULT_THREADS = 16

# L(w) = a * r**w, from fit_latency_table: ``a`` reproduces 11.8 s for the 4-bit
# logistic d=30, B=8 batch at 16 threads; ``r`` best matches 15.8 s (logistic
# d=10), 149 s (d=30, 30 hidden) and 45 s (d=10, 15 hidden). A fit, not a
# measurement.
FIT_A_MS = 1.3803
FIT_R = 1.9
MAX_TABLE_WIDTH = 24


class SimulationError(RuntimeError):
    pass


class AccumulatorOverflow(SimulationError):
    """A multi-sum left the width the compiler assigned to it."""


class DomainViolation(SimulationError, LutDomainError):
    """A PBS received a value outside its table's domain."""


class NoiseBudgetExceeded(SimulationError):
    pass


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return DEFAULT_THREADS
    try:
        t = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if t < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return t


# scalar ciphertexts -----------------------------------------------------------------


@dataclass
class SimCiphertext:
    value: int
    bit_width: int
    noise: int = 0
    tag: str = ""
    signed: bool = True

    def __post_init__(self):
        self.value = int(self.value)
        if self.bit_width < 1:
            raise SimulationError("bit width must be positive")
        lo, hi = self.bounds
        if not lo <= self.value <= hi:
            raise AccumulatorOverflow(f"{self.tag or 'ciphertext'}: {self.value} does not fit {self.bit_width} bits")

    @property
    def bounds(self) -> Tuple[int, int]:
        if self.signed:
            return -(2 ** (self.bit_width - 1)) + 1, 2 ** (self.bit_width - 1) - 1
        return 0, 2**self.bit_width - 1


def pbs(ct: SimCiphertext, table: LutTable, tag: str = "") -> SimCiphertext:
    """Programmable bootstrap: table lookup that resets the noise counter."""
    if ct.signed and ct.bit_width != table.input_bits:
        raise DomainViolation(f"{table.table_id}: {ct.bit_width}-bit ciphertext into a {table.input_bits}-bit table")
    try:
        out = table.lookup(ct.value)
    except LutDomainError as exc:
        raise DomainViolation(str(exc)) from None
    return SimCiphertext(int(out), table.output_bits, 0, tag or ct.tag)


def remove_bits(values, width: int, n_r: int, rounding: str = "truncate") -> np.ndarray:
    """Clear and drop the ``n_r`` low bits of ``width``-bit values, one bit-extraction PBS per bit.

    Returns the values shifted down by ``n_r``. In ``nearest`` mode half a step
    is added first, a levelled plaintext addition.
    """
    if n_r < 0:
        raise SimulationError("n_r must be non-negative")
    if n_r >= width:
        raise SimulationError(f"cannot remove {n_r} bits from a {width}-bit value")
    v = np.asarray(values, dtype=np.int64)
    if n_r == 0:
        return v.copy()
    if rounding == "nearest":
        v = v + (1 << (n_r - 1))
    elif rounding != "truncate":
        raise SimulationError(f"unknown rounding mode {rounding!r}")
    mod = 1 << width
    for i in range(n_r):
        top = (v << (width - 1 - i)) % mod
        bit = top >> (width - 1)
        v = v - (bit << i)
    return v >> n_r


def rounded_pbs(ct: SimCiphertext, n_r: int, table: Optional[LutTable] = None, rounding: str = "truncate") -> SimCiphertext:
    """Remove ``n_r`` LSBs, then apply ``table`` (identity when omitted) to the narrower value."""
    if n_r >= ct.bit_width:
        raise SimulationError(f"cannot remove {n_r} bits from a {ct.bit_width}-bit value")
    v = int(remove_bits(ct.value, ct.bit_width, n_r, rounding))
    narrowed = SimCiphertext(v, ct.bit_width - n_r, 0, ct.tag, ct.signed)
    if table is None:
        return narrowed
    return pbs(SimCiphertext(v, table.input_bits, 0, ct.tag), table)


def _lev(a: SimCiphertext, b: SimCiphertext, value: int, width: Optional[int]) -> SimCiphertext:
    w = width if width is not None else max(a.bit_width, b.bit_width)
    return SimCiphertext(value, w, a.noise + b.noise + 1, a.tag or b.tag)


def lev_add(a: SimCiphertext, b: SimCiphertext, width: Optional[int] = None) -> SimCiphertext:
    return _lev(a, b, a.value + b.value, width)


def lev_sub(a: SimCiphertext, b: SimCiphertext, width: Optional[int] = None) -> SimCiphertext:
    return _lev(a, b, a.value - b.value, width)


# cost model -------------------------------------------------------------------------


def fitted_latency_table(a_ms: float = FIT_A_MS, r: float = FIT_R, max_width: int = MAX_TABLE_WIDTH) -> Dict[int, float]:
    return {w: a_ms * r**w for w in range(1, max_width + 1)}


@dataclass
class CostModel:
    """Per-PBS latency (ms) by input width, levelled-op cost and thread count."""

    latency_ms: Dict[int, float] = field(default_factory=fitted_latency_table)
    levelled_ms: float = 0.0
    threads: int = field(default_factory=default_threads)

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be positive")
        widths = sorted(self.latency_ms)
        if not widths:
            raise ValueError("empty latency table")
        lat = [self.latency_ms[w] for w in widths]
        if any(x > y for x, y in zip(lat, lat[1:])):
            raise ValueError("PBS latency must not decrease with bit width")

    def latency(self, width: int) -> float:
        """Latency of one PBS; widths between keys use the next wider entry."""
        for w in sorted(self.latency_ms):
            if w >= width:
                return self.latency_ms[w]
        raise SimulationError(f"no latency entry for {width}-bit PBS (table ends at {max(self.latency_ms)})")

    def to_dict(self) -> dict:
        return {
            "latency_ms": {str(k): v for k, v in sorted(self.latency_ms.items())},
            "levelled_ms": self.levelled_ms,
            "threads": self.threads,
        }


@dataclass
class CostReport:
    pbs_by_width: Dict[int, int] = field(default_factory=dict)
    rounding_pbs_by_width: Dict[int, int] = field(default_factory=dict)
    levelled_ops: int = 0
    latency_s: float = 0.0
    threads: int = DEFAULT_THREADS
    refresh_s: float = 0.0

    @property
    def table_pbs(self) -> int:
        return sum(self.pbs_by_width.values())

    @property
    def rounding_pbs(self) -> int:
        return sum(self.rounding_pbs_by_width.values())

    @property
    def total_pbs(self) -> int:
        return self.table_pbs + self.rounding_pbs

    @property
    def total_latency_s(self) -> float:
        return self.latency_s + self.refresh_s

    def merge(self, other: "CostReport") -> "CostReport":
        def add(x, y):
            out = dict(x)
            for k, v in y.items():
                out[k] = out.get(k, 0) + v
            return dict(sorted(out.items()))

        return CostReport(
            add(self.pbs_by_width, other.pbs_by_width),
            add(self.rounding_pbs_by_width, other.rounding_pbs_by_width),
            self.levelled_ops + other.levelled_ops,
            self.latency_s + other.latency_s,
            self.threads,
            self.refresh_s + other.refresh_s,
        )

    def wgc(self, params: int, batch: int) -> float:
        return wgc_rate(params, batch, self.total_latency_s, self.threads)

    def to_dict(self) -> dict:
        return {
            "pbs_by_width": {str(k): v for k, v in sorted(self.pbs_by_width.items())},
            "rounding_pbs_by_width": {str(k): v for k, v in sorted(self.rounding_pbs_by_width.items())},
            "table_pbs": self.table_pbs,
            "rounding_pbs": self.rounding_pbs,
            "levelled_ops": self.levelled_ops,
            "latency_s": self.latency_s,
            "refresh_s": self.refresh_s,
            "total_latency_s": self.total_latency_s,
            "threads": self.threads,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=1)


def _partition_cost(p: Partition, model: CostModel) -> CostReport:
    n = p.elements
    par = min(model.threads, n)
    rep = CostReport(threads=model.threads, levelled_ops=p.levelled_ops)
    ms = p.levelled_ops * model.levelled_ms / par
    if p.pbs is not None:
        rep.pbs_by_width[p.pbs_width] = n
        ms += n * model.latency(p.pbs_width) / par
        # the extraction of bit i reads the w_acc - i significant bits still present
        for i in range(p.n_r):
            w = p.w_acc - i
            rep.rounding_pbs_by_width[w] = rep.rounding_pbs_by_width.get(w, 0) + n
            ms += n * model.latency(w) / par
    rep.latency_s = ms / 1000.0
    return rep


def estimate_cost(c: CompiledCircuit, model: Optional[CostModel] = None, refresh_params: int = 0, refresh_bits: int = 0) -> CostReport:
    """Static cost of one circuit run.

    ``refresh_params`` models the non-interactive alternative to decrypting and
    re-encrypting weights: one bootstrap of width ``refresh_bits`` per parameter.
    """
    model = model or CostModel()
    total = CostReport(threads=model.threads)
    for p in c.partitions:
        total = total.merge(_partition_cost(p, model))
    if refresh_params:
        w = refresh_bits or c.bits
        total.refresh_s = refresh_params * model.latency(w) / min(model.threads, refresh_params) / 1000.0
    return total


def wgc_rate(params: int, batch: int, latency_s: float, threads: int) -> float:
    """Weight-gradient computations per second per thread."""
    if latency_s == 0 or threads == 0:
        raise ZeroDivisionError("latency and thread count must be non-zero")
    if params <= 0 or batch <= 0 or latency_s < 0 or threads < 0:
        raise ValueError("wgc_rate arguments must be positive")
    return params * batch / (latency_s * threads)


# circuit execution ------------------------------------------------------------------


def _noise(e: Expr, levels: Dict[str, np.ndarray], shapes) -> np.ndarray:
    """Per-element count of levelled operations since the last bootstrap."""
    if isinstance(e, Ref):
        return levels[e.name]
    if isinstance(e, (Add, Sub)):
        a, b = _noise(e.a, levels, shapes), _noise(e.b, levels, shapes)
        return a + b + 1
    if isinstance(e, Scale):
        return _noise(e.a, levels, shapes) + 1
    if isinstance(e, Sum):
        a = _noise(e.a, levels, shapes)
        return a.sum(axis=e.axis) + a.shape[e.axis] - 1
    if isinstance(e, Transpose):
        return _noise(e.a, levels, shapes).T
    if isinstance(e, Expand):
        return np.expand_dims(_noise(e.a, levels, shapes), e.axis)
    raise TypeError(e)


def noise_levels(c: CompiledCircuit) -> Dict[str, int]:
    """Worst per-element noise counter of each partition's multi-sum (data independent)."""
    shapes = c.shapes()
    levels = {k: np.zeros(v["shape"], dtype=np.int64) for k, v in c.inputs.items()}
    out = {}
    for p in c.partitions:
        acc = np.broadcast_to(_noise(p.expr, levels, shapes), p.shape)
        out[p.id] = int(acc.max()) if acc.size else 0
        levels[p.id] = np.zeros(p.shape, dtype=np.int64) if p.pbs is not None else np.array(acc)
    return out


@dataclass
class SimStats:
    """Counters accumulated over simulator runs."""

    runs: int = 0
    overflows: int = 0
    domain_violations: int = 0
    max_acc_ratio: float = 0.0
    max_noise: int = 0
    cost: CostReport = field(default_factory=CostReport)


@dataclass
class Simulator:
    """Executes compiled circuits; one instance accumulates counters across runs."""

    model: CostModel = field(default_factory=CostModel)
    noise_threshold: Optional[int] = None
    stats: SimStats = field(default_factory=SimStats)
    fatal: bool = True
    _noise_cache: Dict[int, Dict[str, int]] = field(default_factory=dict, repr=False)
    _cost_cache: Dict[int, CostReport] = field(default_factory=dict, repr=False)

    def run(self, c: CompiledCircuit, inputs: Mapping[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], CostReport]:
        env: Dict[str, np.ndarray] = {}
        for name, meta in c.inputs.items():
            if name not in inputs:
                raise SimulationError(f"missing circuit input {name!r}")
            v = np.asarray(inputs[name])
            if not np.issubdtype(v.dtype, np.integer):
                raise SimulationError(f"input {name!r} must hold integer codes")
            v = v.astype(np.int64)
            if v.shape != tuple(meta["shape"]):
                raise SimulationError(f"input {name!r}: shape {v.shape}, expected {tuple(meta['shape'])}")
            lo, hi = meta["range"]
            if v.size and (v.min() < lo or v.max() > hi):
                raise SimulationError(f"input {name!r}: codes outside the declared range [{lo}, {hi}]")
            env[name] = v
        if self.noise_threshold is not None:
            levels = self._noise_cache.setdefault(id(c), noise_levels(c))
            worst = max(levels.values(), default=0)
            self.stats.max_noise = max(self.stats.max_noise, worst)
            if worst > self.noise_threshold:
                raise NoiseBudgetExceeded(f"noise counter {worst} exceeds threshold {self.noise_threshold}")
        tables = c.tables
        executed = CostReport(threads=self.model.threads)
        for p in c.partitions:
            acc = np.broadcast_to(expr_eval(p.expr, env), p.shape)
            self._check_acc(p, acc)
            if p.pbs is None:
                env[p.id] = np.array(acc, dtype=np.int64)
            else:
                codes = remove_bits(acc, p.w_acc, p.n_r, p.pbs.rounding)
                table = tables[p.pbs.table_id]
                try:
                    env[p.id] = table.lookup(codes)
                except LutDomainError as exc:
                    self.stats.domain_violations += 1
                    raise DomainViolation(f"{p.label}: {exc}") from None
            executed = executed.merge(self._partition_report(p))
        self.stats.runs += 1
        self.stats.cost = self.stats.cost.merge(executed)
        return {name: env[pid] for name, pid in c.outputs.items()}, executed

    def _partition_report(self, p: Partition) -> CostReport:
        key = id(p)
        if key not in self._cost_cache:
            self._cost_cache[key] = _partition_cost(p, self.model)
        return self._cost_cache[key]

    def _check_acc(self, p: Partition, acc: np.ndarray) -> None:
        if not acc.size:
            return
        hi = int(acc.max())
        if p.pbs is not None and p.n_r and p.pbs.rounding == "nearest":
            hi += 1 << (p.n_r - 1)
        peak = max(abs(int(acc.min())), abs(hi))
        limit = 2 ** (p.w_acc - 1) - 1
        self.stats.max_acc_ratio = max(self.stats.max_acc_ratio, peak / limit if limit else math.inf)
        if peak > limit:
            self.stats.overflows += 1
            if self.fatal:
                raise AccumulatorOverflow(f"{p.label}: |accumulator| {peak} exceeds {p.w_acc}-bit width")


def run_circuit(c: CompiledCircuit, inputs: Mapping[str, np.ndarray], model: Optional[CostModel] = None, sim: Optional[Simulator] = None):
    """Execute ``c`` on integer inputs; returns (outputs by name, CostReport)."""
    if sim is None:
        sim = Simulator(model or CostModel())
    return sim.run(c, inputs)


def fit_latency_table(anchor, others=(), widths=range(1, MAX_TABLE_WIDTH + 1), threads: int = DEFAULT_THREADS):
    """Fit ``L(w) = a * r**w`` (ms) to reported per-batch latencies.

    ``anchor`` is a ``(circuit, seconds)`` pair reproduced exactly by choice of
    ``a``; ``r`` minimises the squared log error over ``others``. Returns
    ``(a_ms, r)``.
    """
    best = None
    for r in np.arange(1.05, 3.0, 0.01):
        unit = CostModel({w: float(r) ** w for w in widths}, threads=threads)
        a = anchor[1] / estimate_cost(anchor[0], unit).latency_s
        err = sum((math.log(a * estimate_cost(c, unit).latency_s) - math.log(s)) ** 2 for c, s in others)
        if best is None or err < best[0] - 1e-12:
            best = (err, a, float(round(r, 2)))
    return best[1], best[2]
