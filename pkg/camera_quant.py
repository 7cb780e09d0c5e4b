"""
Micro-expert-aware mixed-precision quantization.

The descending-energy ranking is split into three precision levels S1, S2, S3
(highest bits to the highest energies). Within each expert the micro-experts of a
level are quantized together:

- variant "q":        up[s_k, :], gate[s_k, :], down[:, s_k]
                      every weight of a micro-expert shares one bit-width
- variant "q-dagger": up[:, c_k], gate[:, c_k], down[:, s_k]
                      up/gate are sliced along the input columns, so one
                      micro-expert's up/gate rows mix all precisions

The quantizer is group-wise asymmetric round-to-nearest (min/max affine). Each
group's scale and zero point are counted as 16 bits each. Weights are stored
dequantized for the forward pass, and the codes stay on the layer for bit
accounting and audits.
"""

import logging
from collections import defaultdict
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from data_models import (
    MoELayer, MoEModel, CalibBatch, LayerSamples, Ranking, EnergyScores,
    QuantPlan, QuantizedMatrix, ExpertWeights,
)
from moe_model import permute_micro_experts, layer_with_experts
from calibration import sequential_replace
from camera_rank import rank_micro_experts, DEFAULT_ALPHA
from utils import exact, parallel_map, split_counts

logger = logging.getLogger(__name__)

GROUP_META_BITS = 32
DEFAULT_GROUP_SIZE = 128
VARIANTS = ("q", "q-dagger")

LayerCallback = Callable[[int, MoELayer, Ranking, EnergyScores, QuantPlan], None]


def _group_bounds(n_cols: int, group_size: Optional[int]) -> List[Tuple[int, int]]:
    step = n_cols if group_size is None else group_size
    if n_cols == 0:
        return []
    return [(s, min(s + step, n_cols)) for s in range(0, n_cols, step)]


def quantize_group_affine(w: np.ndarray, bits: int, group_size: Optional[int],
                          rows: Optional[np.ndarray] = None, cols: Optional[np.ndarray] = None,
                          matrix: str = "", expert: int = -1) -> QuantizedMatrix:
    """
    Group-wise affine round-to-nearest quantization along the last axis.

    Per group: scale = (max - min) / (2^b - 1), zero_point = min,
    code = round((w - min) / scale) clamped to [0, 2^b - 1]. A zero-range group
    gets scale 0 and all-zero codes. b = 1 is the two-level {min, max} quantizer.

    :param w: vector or matrix; groups never cross a row
    :param group_size: weights per group, None for one group per row
    :raises ValueError: bits < 1, group_size < 1 or non-finite weights
    """
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    if group_size is not None and group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weights cannot be quantized")

    n_rows, n_cols = w.shape
    bounds = _group_bounds(n_cols, group_size) if n_rows else []
    levels = (1 << bits) - 1
    codes = np.zeros(w.shape, dtype=np.int64)
    scale = np.zeros((n_rows, len(bounds)), dtype=np.float64)
    zero_point = np.zeros((n_rows, len(bounds)), dtype=np.float64)
    for g, (s, t) in enumerate(bounds):
        block = w[:, s:t]
        lo = block.min(axis=1)
        hi = block.max(axis=1)
        sc = (hi - lo) / levels
        safe = np.where(sc > 0, sc, 1.0)
        q = np.floor((block - lo[:, None]) / safe[:, None] + 0.5)
        q = np.clip(q, 0, levels)
        q[sc == 0] = 0
        codes[:, s:t] = q.astype(np.int64)
        scale[:, g] = sc
        zero_point[:, g] = lo

    return QuantizedMatrix(
        codes=codes, scale=scale, zero_point=zero_point, bits=int(bits),
        group_size=group_size if group_size is not None else max(n_cols, 1),
        rows=np.arange(n_rows) if rows is None else np.asarray(rows, dtype=np.int64),
        cols=np.arange(n_cols) if cols is None else np.asarray(cols, dtype=np.int64),
        matrix=matrix, expert=expert,
    )


def dequantize(qm: QuantizedMatrix) -> np.ndarray:
    n_rows, n_cols = qm.codes.shape
    if qm.codes.size == 0:
        return np.zeros(qm.codes.shape, dtype=np.float64)
    lengths = [t - s for s, t in _group_bounds(n_cols, qm.group_size)]
    scale = np.repeat(qm.scale, lengths, axis=1)
    zero_point = np.repeat(qm.zero_point, lengths, axis=1)
    return qm.codes * scale + zero_point


def _check_ratios_bits(ratios: Sequence[float], bits: Sequence[int]) -> None:
    if len(ratios) != 3 or len(bits) != 3:
        raise ValueError("ratios and bits must each have three entries")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if any(int(b) != b or b < 1 for b in bits):
        raise ValueError(f"bits must be positive integers, got {tuple(bits)}")
    if not bits[0] >= bits[1] >= bits[2]:
        raise ValueError(f"bits must be in descending order, got {tuple(bits)}")


def make_quant_plan(ranking: Ranking, ratios: Sequence[float], bits: Sequence[int],
                    group_size: Optional[int] = DEFAULT_GROUP_SIZE,
                    input_energy: Optional[np.ndarray] = None) -> QuantPlan:
    """
    Split the ranking into S1 (first r1 * N_e), S2 and S3.

    :param input_energy: per input channel calibration energy; orders the
        input columns for the q-dagger variant
    """
    _check_ratios_bits(ratios, bits)
    if group_size is not None and group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    n_micro = ranking.order.size
    counts = split_counts(n_micro, ratios)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    level_sets = tuple(np.sort(ranking.order[bounds[k]:bounds[k + 1]]) for k in range(3))
    input_order = None
    if input_energy is not None:
        input_order = np.argsort(-np.asarray(input_energy, dtype=np.float64), kind="stable")
    return QuantPlan(
        ratios=tuple(float(r) for r in ratios),
        bits=tuple(int(b) for b in bits),
        group_size=group_size,
        level_sets=level_sets,
        widths=ranking.widths,
        input_order=input_order,
    )


def uniform_plan(n_micro: int, bits: int, group_size: Optional[int] = DEFAULT_GROUP_SIZE,
                 widths: Tuple[int, ...] = ()) -> QuantPlan:
    """Degenerate single-precision plan; needs no ranking."""
    ranking = Ranking(order=np.arange(n_micro, dtype=np.int64), widths=widths)
    return make_quant_plan(ranking, (0.0, 1.0, 0.0), (bits, bits, bits), group_size)


def three_level_plan(avg_bits: int, r: float) -> Tuple[Tuple[float, float, float], Tuple[int, int, int]]:
    """[b+1, b, b-1] bits in proportions [r, 1-2r, r]; r = 0.5 leaves two levels."""
    if not 0.0 <= r <= 0.5:
        raise ValueError(f"r must lie in [0, 0.5], got {r}")
    if avg_bits < 2:
        raise ValueError(f"average bits must be >= 2 for a three-level scheme, got {avg_bits}")
    return (r, float(1 - 2 * exact(r)), r), (avg_bits + 1, avg_bits, avg_bits - 1)


def sub_indices(plan: QuantPlan, widths: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-expert local neuron indices of each level."""
    levels = micro_levels(plan)
    offsets = np.concatenate([[0], np.cumsum(widths, dtype=np.int64)])
    return [
        tuple(np.flatnonzero(levels[offsets[j]:offsets[j + 1]] == k) for k in range(3))
        for j in range(len(widths))
    ]


def micro_levels(plan: QuantPlan) -> np.ndarray:
    levels = np.full(plan.n_micro, -1, dtype=np.int64)
    for k, s in enumerate(plan.level_sets):
        levels[s] = k
    if np.any(levels < 0):
        raise ValueError("plan level sets do not partition [0, N_e)")
    return levels


def input_levels(plan: QuantPlan, d_model: int) -> np.ndarray:
    order = plan.input_order if plan.input_order is not None else np.arange(d_model)
    if order.size != d_model:
        raise ValueError(f"plan input order has {order.size} channels, layer has d_model={d_model}")
    counts = split_counts(d_model, plan.ratios)
    levels = np.empty(d_model, dtype=np.int64)
    start = 0
    for k, c in enumerate(counts):
        levels[order[start:start + c]] = k
        start += c
    return levels


def average_bitwidth(plan: QuantPlan) -> float:
    """sum(r_k * b_k) + 32 / group_size, evaluated exactly."""
    total = sum((exact(r) * b for r, b in zip(plan.ratios, plan.bits)), Fraction(0))
    if plan.group_size is not None:
        total += Fraction(GROUP_META_BITS, plan.group_size)
    return float(total)


def measured_bitwidth(records: Sequence[QuantizedMatrix]) -> float:
    """Bits per weight from the actual codes and group count."""
    n_weights = sum(r.n_weights for r in records)
    if n_weights == 0:
        return 0.0
    payload = sum(r.n_weights * r.bits for r in records)
    meta = sum(r.n_groups for r in records) * GROUP_META_BITS
    return (payload + meta) / n_weights


def _quantize_slice(matrix: np.ndarray, rows: np.ndarray, cols: np.ndarray, bits: int,
                    group_size: Optional[int], name: str, expert: int,
                    out: np.ndarray, records: List[QuantizedMatrix]) -> None:
    if rows.size == 0 or cols.size == 0:
        return
    qm = quantize_group_affine(matrix[np.ix_(rows, cols)], bits, group_size,
                               rows=rows, cols=cols, matrix=name, expert=expert)
    out[np.ix_(rows, cols)] = dequantize(qm)
    records.append(qm)


def quantize_layer(layer: MoELayer, plan: QuantPlan, variant: str = "q", threads: int = 1) -> MoELayer:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    if plan.n_micro != layer.n_micro or (plan.widths and tuple(plan.widths) != layer.widths):
        raise ValueError(f"plan covers N_e={plan.n_micro} with widths {plan.widths}, "
                         f"layer has N_e={layer.n_micro} with widths {layer.widths}")
    levels = micro_levels(plan)
    col_levels = input_levels(plan, layer.config.d_model) if variant == "q-dagger" else None
    offsets = layer.offsets
    all_inputs = np.arange(layer.config.d_model)

    def quantize_expert(j: int) -> Tuple[ExpertWeights, List[QuantizedMatrix]]:
        lv = levels[offsets[j]:offsets[j + 1]]
        # colocate same-level neurons, level 1 first
        perm = np.argsort(lv, kind="stable")
        e = permute_micro_experts(layer.experts[j], perm)
        lv = lv[perm]
        up = e.w_up.astype(np.float64)
        gate = e.w_gate.astype(np.float64)
        down = e.w_down.astype(np.float64)
        new_up, new_gate, new_down = up.copy(), gate.copy(), down.copy()
        records: List[QuantizedMatrix] = []
        neurons = np.arange(e.width)
        for k, b in enumerate(plan.bits):
            s_k = np.flatnonzero(lv == k)
            if variant == "q":
                _quantize_slice(up, s_k, all_inputs, b, plan.group_size, "up", j, new_up, records)
                _quantize_slice(gate, s_k, all_inputs, b, plan.group_size, "gate", j, new_gate, records)
            else:
                c_k = np.flatnonzero(col_levels == k)
                _quantize_slice(up, neurons, c_k, b, plan.group_size, "up", j, new_up, records)
                _quantize_slice(gate, neurons, c_k, b, plan.group_size, "gate", j, new_gate, records)
            _quantize_slice(down, all_inputs, s_k, b, plan.group_size, "down", j, new_down, records)
        return ExpertWeights(w_up=new_up, w_gate=new_gate, w_down=new_down), records

    results = parallel_map(quantize_expert, range(len(layer.experts)), threads)
    experts = [r[0] for r in results]
    records = [qm for r in results for qm in r[1]]
    return layer_with_experts(layer, experts, quant_records=records)


def quantize_layer_camera_q(layer: MoELayer, plan: QuantPlan, threads: int = 1) -> MoELayer:
    return quantize_layer(layer, plan, "q", threads)


def quantize_layer_camera_q_dagger(layer: MoELayer, plan: QuantPlan, threads: int = 1) -> MoELayer:
    return quantize_layer(layer, plan, "q-dagger", threads)


def quantize_model(model: MoEModel, batch: CalibBatch, ratios: Sequence[float], bits: Sequence[int],
                   group_size: Optional[int] = DEFAULT_GROUP_SIZE, alpha: float = DEFAULT_ALPHA,
                   variant: str = "q", threads: int = 1, on_layer: Optional[LayerCallback] = None,
                   show_progress: bool = False) -> MoEModel:
    """Rank and quantize each layer on the already-quantized prefix."""
    _check_ratios_bits(ratios, bits)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")

    def choose(i: int, layer: MoELayer, samples: LayerSamples) -> MoELayer:
        ranking, scores = rank_micro_experts(layer, samples, alpha, threads=threads)
        X = np.asarray(samples.X, dtype=np.float64)
        plan = make_quant_plan(ranking, ratios, bits, group_size,
                               input_energy=np.einsum("tc,tc->c", X, X))
        quantized = quantize_layer(layer, plan, variant, threads)
        logger.info("Layer %d: quantized %d micro-experts at %s bits (levels %s)", i, layer.n_micro,
                    plan.bits, [s.size for s in plan.level_sets])
        if on_layer:
            on_layer(i, layer, ranking, scores, plan)
        return quantized

    return sequential_replace(model, batch, choose, f"quantize-{variant}", show_progress)


def quantize_model_uniform(model: MoEModel, bits: int, group_size: Optional[int] = DEFAULT_GROUP_SIZE,
                           threads: int = 1) -> MoEModel:
    """Single-precision baseline: every expert matrix at the same bit-width."""
    layers = []
    for layer in model.layers:
        plan = uniform_plan(layer.n_micro, bits, group_size, layer.widths)
        layers.append(quantize_layer(layer, plan, "q", threads))
    return MoEModel(config=model.config, layers=tuple(layers))


def integrity_audit(layer: MoELayer) -> Dict[str, Dict[Tuple[int, int], FrozenSet[int]]]:
    """Map (expert, neuron) -> set of bit-widths touching it, per matrix."""
    audit: Dict[str, Dict[Tuple[int, int], set]] = {"up": defaultdict(set), "gate": defaultdict(set),
                                                     "down": defaultdict(set)}
    for qm in layer.quant_records:
        neurons = qm.cols if qm.matrix == "down" else qm.rows
        for n in neurons:
            audit[qm.matrix][(qm.expert, int(n))].add(qm.bits)
    return {m: {key: frozenset(v) for key, v in table.items()} for m, table in audit.items()}


def micro_expert_bitwidths(layer: MoELayer) -> Dict[Tuple[int, int], FrozenSet[int]]:
    """Union over up, gate and down of the bit-widths each micro-expert carries."""
    merged: Dict[Tuple[int, int], set] = defaultdict(set)
    for table in integrity_audit(layer).values():
        for key, bits in table.items():
            merged[key] |= bits
    return {key: frozenset(v) for key, v in merged.items()}


def is_precision_consistent(layer: MoELayer) -> bool:
    return all(len(bits) == 1 for bits in micro_expert_bitwidths(layer).values())


def weights_covered_once(layer: MoELayer) -> bool:
    """True when every expert weight sits in exactly one quantization group."""
    counts = {}
    for j, e in enumerate(layer.experts):
        counts[(j, "up")] = np.zeros(e.w_up.shape, dtype=np.int64)
        counts[(j, "gate")] = np.zeros(e.w_gate.shape, dtype=np.int64)
        counts[(j, "down")] = np.zeros(e.w_down.shape, dtype=np.int64)
    for qm in layer.quant_records:
        counts[(qm.expert, qm.matrix)][np.ix_(qm.rows, qm.cols)] += 1
    return all(np.all(c == 1) for c in counts.values())


def quant_layer_report(index: int, layer: MoELayer, plan: QuantPlan, quantized: MoELayer,
                       variant: str) -> Dict[str, object]:
    return {
        "layer": index,
        "variant": variant,
        "ratios": list(plan.ratios),
        "bits": list(plan.bits),
        "group_size": plan.group_size,
        "level_sizes": [int(s.size) for s in plan.level_sets],
        "average_bits": average_bitwidth(plan),
        "measured_bits": measured_bitwidth(quantized.quant_records),
        "precision_consistent": is_precision_consistent(quantized),
    }
