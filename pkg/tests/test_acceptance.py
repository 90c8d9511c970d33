"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Accuracy criteria average five seeds (0-4); each seed draws its own split,
initial weights and batch order.
"""

import time

import numpy as np
import pytest

from fhetrain.compiler import fsq_table
from fhetrain.datasets import MORTALITY_ROWS, load_breast_cancer, mortality_substitute
from fhetrain.graph_ir import ModelSpec, evaluate
from fhetrain.tfhe_sim import CostModel, Simulator, estimate_cost, remove_bits, wgc_rate
from fhetrain.trainer import TrainConfig, epoch_latency_s, train
from oracles import bit_removal, chain_value, random_codes

SEEDS = range(5)
LOGISTIC = ModelSpec("logistic", 30, (), "sigmoid", 8, 0)
MLP = ModelSpec("mlp", 30, (30,), "relu", 8, 0)
MORTALITY = ModelSpec("logistic", 10, (), "sigmoid", 8, 0)
EQUIV_MODELS = [
    ("logistic", 30, (), "sigmoid"),
    ("mlp", 30, (30,), "relu"),
    ("mlp", 30, (30,), "sigmoid"),
    ("logistic", 10, (), "sigmoid"),
    ("mlp", 10, (15,), "relu"),
]

# fatal-error counters gathered by every run in this module
OVERFLOWS = {"runs": 0, "overflows": 0, "domain_violations": 0}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _tally(sim=None, report=None):
    if sim is not None:
        OVERFLOWS["runs"] += sim.stats.runs
        OVERFLOWS["overflows"] += sim.stats.overflows
        OVERFLOWS["domain_violations"] += sim.stats.domain_violations
    if report is not None:
        OVERFLOWS["runs"] += report.batches
        OVERFLOWS["overflows"] += report.overflows


@pytest.fixture(scope="module")
def bc():
    return load_breast_cancer()


def _runs(ds, spec, compiled):
    m = compiled(spec.kind, spec.d, spec.hidden, spec.activation, spec.batch)
    out = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        rep = train(ds, spec, TrainConfig(seed=seed), model=m)
        out.append((rep, time.perf_counter() - t0))
        _tally(report=rep)
    return out


@pytest.fixture(scope="module")
def logistic_runs(bc, compiled):
    return _runs(bc, LOGISTIC, compiled)


@pytest.fixture(scope="module")
def mlp_runs(bc, compiled):
    return _runs(bc, MLP, compiled)


def _mean(runs, track):
    return 100 * float(np.mean([getattr(r, track).final_accuracy for r, _ in runs]))


def test_c01_quarter_square_exact(capsys):
    t0 = time.perf_counter()
    table = fsq_table(5)
    a, b = np.meshgrid(np.arange(-8, 8), np.arange(-8, 8))
    fails = int(np.count_nonzero(table.lookup(a + b) - table.lookup(a - b) != a * b))
    fails += sum((x + y) ** 2 // 4 - (x - y) ** 2 // 4 != x * y for x in range(-8, 8) for y in range(-8, 8))
    dt = time.perf_counter() - t0
    verdict(capsys, 1, fails == 0 and dt < 1.0, f"{a.size} signed 4-bit pairs, {fails} failures, {dt * 1000:.1f} ms")


def test_c02_rounded_pbs_semantics(capsys):
    checked = fails = 0
    for w in range(1, 9):
        vals = np.arange(-(2 ** (w - 1)), 2 ** (w - 1))
        for n_r in range(w):
            got = remove_bits(vals, w, n_r)
            want = (vals - vals % 2**n_r) // 2**n_r
            fails += int(np.count_nonzero(got != want))
            fails += sum(int(g) != bit_removal(int(v), w, n_r) for g, v in zip(got, vals))
            checked += vals.size
    verdict(capsys, 2, fails == 0, f"{checked} (width, n_r, value) cases up to 8 bits, {fails} failures")


def test_c03_lut_fusion_lossless(capsys, compiled):
    tables = entries = mismatches = 0
    for model in EQUIV_MODELS:
        for rounding in ("truncate", "nearest"):
            for t in compiled(*model, rounding=rounding).int_graph.tables.values():
                tables += 1
                entries += t.entries.size
                mismatches += sum(chain_value(t.provenance, int(c)) != int(e) for c, e in zip(t.domain(), t.entries))
    verdict(capsys, 3, mismatches == 0 and tables > 0, f"{tables} fused tables, {entries} codes, {mismatches} mismatches")


def test_c04_oracle_equivalence(capsys, compiled):
    per_model = 2000
    batches = mismatches = 0
    rng = np.random.default_rng(20240)
    for model in EQUIV_MODELS:
        m = compiled(*model)
        sim = Simulator()
        for _ in range(per_model):
            feed = random_codes(m.circuit.inputs, rng)
            got, _ = sim.run(m.circuit, feed)
            want = evaluate(m.int_graph, feed)
            mismatches += sum(not np.array_equal(got[k], want[k]) for k in want)
            batches += 1
        _tally(sim=sim)
    verdict(capsys, 4, batches >= 10**4 and mismatches == 0, f"{batches} random batches over {len(EQUIV_MODELS)} models, {mismatches} mismatches")


def test_c05_breast_cancer_logistic(capsys, logistic_runs):
    q, f = _mean(logistic_runs, "quantized"), _mean(logistic_runs, "reference")
    slowest = max(dt for _, dt in logistic_runs)
    ok = q >= 96.75 and f >= 97.6 and slowest < 60
    verdict(capsys, 5, ok, f"quantized {q:.2f}% (>= 96.75), fp32 {f:.2f}% (>= 97.6), slowest run {slowest:.1f} s (< 60)")


def test_c06_breast_cancer_mlp(capsys, mlp_runs):
    q, f = _mean(mlp_runs, "quantized"), _mean(mlp_runs, "reference")
    ok = q >= 96.75 and abs(q - f) <= 2.5
    verdict(capsys, 6, ok, f"quantized {q:.2f}% (>= 96.75), fp32 {f:.2f}%, gap {abs(q - f):.2f} pt (<= 2.5)")


def test_c07_mortality_substitute(capsys, compiled):
    m = compiled("logistic", 10)
    gaps = []
    for seed in SEEDS:
        rep = train(mortality_substitute(seed=seed), MORTALITY, TrainConfig(seed=seed), model=m)
        _tally(report=rep)
        gaps.append(100 * (rep.reference.final_accuracy - rep.quantized.final_accuracy))
    gap = float(np.mean(np.abs(gaps)))
    cost = estimate_cost(m.circuit, CostModel(threads=16))
    hours = epoch_latency_s(cost, MORTALITY_ROWS, MORTALITY.batch) / 3600
    ok = gap <= 2.0 and 25.5 / 2 <= hours <= 25.5 * 2
    verdict(
        capsys,
        7,
        ok,
        f"accuracy gap {gap:.2f} pt (<= 2); full-data epoch estimate {hours:.2f} h "
        f"({cost.total_latency_s:.2f} s/batch x {-(-MORTALITY_ROWS // 8)} batches; window 12.75-51 h)",
    )


def test_c08_convergence_speed(capsys, logistic_runs):
    early = [100 * max(r.quantized.curve[:20]) for r, _ in logistic_runs]
    final = [100 * r.quantized.final_accuracy for r, _ in logistic_runs]
    lag = [f - e for e, f in zip(early, final)]
    ok = all(x <= 1.0 for x in lag)
    verdict(
        capsys,
        8,
        ok,
        f"best accuracy by batch 20 {np.mean(early):.2f}% vs final {np.mean(final):.2f}%; "
        f"per-seed lag {', '.join(f'{x:.2f}' for x in lag)} pt (<= 1)",
    )


def test_c09_wgc_calculator(capsys):
    a = wgc_rate(2720, 60, 144, 48)
    b = wgc_rate(930, 8, 149, 16)
    ok = abs(a - 24) <= 1 and abs(b - 3) <= 0.5
    verdict(capsys, 9, ok, f"(2720, 60, 144 s, 48) -> {a:.2f} (24 +- 1); (930, 8, 149 s, 16) -> {b:.2f} (3 +- 0.5)")


def test_c10_no_overflow(capsys, logistic_runs, mlp_runs):
    ok = OVERFLOWS["overflows"] == 0 and OVERFLOWS["domain_violations"] == 0 and OVERFLOWS["runs"] > 0
    verdict(
        capsys,
        10,
        ok,
        f"{OVERFLOWS['runs']} circuit executions, {OVERFLOWS['overflows']} accumulator overflows, "
        f"{OVERFLOWS['domain_violations']} table domain violations",
    )
