"""Quantized training under TFHE semantics: graph builder, quantizer, circuit compiler and exact simulator."""

__version__ = "0.1.0"

from .calibration import CalibrationConfig, CalibrationStats, collect_stats, sample_calibration_data
from .compiler import CompiledCircuit, Partition, assign_bitwidths, lower_matmul, partition_graph
from .datasets import Dataset, load_breast_cancer, load_csv, make_synthetic, mortality_substitute
from .graph_ir import GraphIR, ModelSpec, NodeKind, build_training_graph, deserialize, serialize, topo_order
from .quantizer import (
    LutTable,
    QParams,
    ScaleDecomposition,
    decompose_scale,
    dequantize,
    fuse_float_chains,
    insert_quantizers,
    make_qparams,
    quantize,
    quantize_graph,
)
from .tfhe_sim import (
    CostModel,
    CostReport,
    SimCiphertext,
    estimate_cost,
    lev_add,
    lev_sub,
    pbs,
    rounded_pbs,
    run_circuit,
    wgc_rate,
)
from .trainer import TrainConfig, TrainReport, compile_model, train, train_fp32_reference
