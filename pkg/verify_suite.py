"""
Self-checks run by the `verify` subcommand.

Each check returns {"name", "passed", "details"}; run_verification collects them.
Everything is seeded, so a given seed and trial count always gives the same result.
"""

import logging
from fractions import Fraction
from typing import Any, Callable, Dict, List

import numpy as np
from tqdm import tqdm

from data_models import ModelConfig, LayerSamples, PruneConfig, Ranking
from moe_model import gen_model, moe_forward_batch, model_forward, stack_basis, permute_micro_experts, layer_with_experts
from calibration import gen_synthetic
from camera_rank import compute_coefficients, rank_micro_experts
from camera_prune import prune_model
from camera_quant import (
    make_quant_plan, average_bitwidth, quantize_model, quantize_layer, micro_expert_bitwidths, integrity_audit,
)
from oracles import run_bound_sweeps, lossless_table_rows
from utils import exact

logger = logging.getLogger(__name__)

LOSSLESS_EXPECTED_PERCENT = (53.57, 55.00, 30.62, 9.27, 17.24)
DECOMPOSITION_LAYERS = 100
DECOMPOSITION_RTOL = 1e-4

# small model for the identity, invariance and integrity checks
TOY_CONFIG = ModelConfig(n_layers=2, n_experts=4, n_shared=1, d_model=16, d_ff=8, top_k=2)


def _result(name: str, passed: bool, **details: Any) -> Dict[str, Any]:
    return {"name": name, "passed": bool(passed), "details": details}


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else float(np.linalg.norm(a - b))


def random_layer_config(rng: np.random.Generator) -> ModelConfig:
    n_experts = int(rng.integers(2, 9))
    return ModelConfig(
        n_layers=1,
        n_experts=n_experts,
        n_shared=int(rng.choice([0, 2])),
        d_model=int(rng.integers(8, 65)),
        d_ff=int(rng.integers(4, 33)),
        top_k=int(rng.integers(1, n_experts + 1)),
    )


def check_decomposition(seed: int, n_layers: int = DECOMPOSITION_LAYERS,
                        show_progress: bool = False) -> Dict[str, Any]:
    """Layer output equals the sum of micro-expert contributions phi @ W."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in tqdm(range(n_layers), desc="decomposition", disable=not show_progress):
        config = random_layer_config(rng)
        layer = gen_model(config, int(rng.integers(0, 2 ** 31))).layers[0]
        X = rng.standard_normal((4, config.d_model))
        Y = moe_forward_batch(layer, X, out_dtype=np.float64)
        phi = compute_coefficients(layer, LayerSamples(X=X, Y=Y)).phi
        S = phi @ stack_basis(layer)
        err = np.abs(S - Y)
        tol = DECOMPOSITION_RTOL * np.maximum(np.abs(Y), np.max(np.abs(Y)) * 1e-6)
        if np.any(err > tol):
            failures += 1
        scale = np.max(np.abs(Y))
        if scale > 0:
            worst = max(worst, float(np.max(err) / scale))
    return _result("decomposition", failures == 0, layers=n_layers, failures=failures, max_rel_err=worst)


def check_lossless_table() -> Dict[str, Any]:
    rows = lossless_table_rows(0.25)
    got = [round(row["p_lossless"] * 100, 2) for row in rows]
    return _result("lossless_table", got == list(LOSSLESS_EXPECTED_PERCENT), percent=got,
                   expected=list(LOSSLESS_EXPECTED_PERCENT))


def check_bit_accounting() -> Dict[str, Any]:
    ranking = Ranking(order=np.arange(1000))
    values = {}
    passed = True
    for ratios in ((0.1, 0.8, 0.1), (0.2, 0.6, 0.2)):
        plan = make_quant_plan(ranking, ratios, (3, 2, 1), 128)
        expected = sum(exact(r) * b for r, b in zip(ratios, (3, 2, 1))) + Fraction(32, 128)
        got = average_bitwidth(plan)
        values[",".join(map(str, ratios))] = got
        passed &= expected == Fraction(9, 4) and Fraction(got) == expected
    return _result("bit_accounting", passed, average_bits=values)


def check_identity_and_invariance(seed: int) -> Dict[str, Any]:
    model = gen_model(TOY_CONFIG, seed)
    batch = gen_synthetic(64, TOY_CONFIG.d_model, seed + 1)
    reference = model_forward(model, batch.X)

    pruned = prune_model(model, batch, PruneConfig(lam=0.0))
    prune_err = _relative(model_forward(pruned, batch.X), reference)

    high = quantize_model(model, batch, (0.2, 0.6, 0.2), (16, 16, 16), 128)
    quant_err = _relative(model_forward(high, batch.X), reference)

    rng = np.random.default_rng(seed + 2)
    permuted = model
    for i, layer in enumerate(model.layers):
        experts = [permute_micro_experts(e, rng.permutation(e.width)) for e in layer.experts]
        permuted = permuted.replace_layer(i, layer_with_experts(layer, experts))
    perm_err = _relative(model_forward(permuted, batch.X), reference)

    return _result("identity_invariance", prune_err <= 1e-6 and quant_err <= 1e-3 and perm_err <= 1e-5,
                   prune_rel_err=prune_err, quant16_rel_err=quant_err, permutation_rel_err=perm_err)


def check_integrity_audit(seed: int) -> Dict[str, Any]:
    layer = gen_model(TOY_CONFIG, seed).layers[0]
    batch = gen_synthetic(64, TOY_CONFIG.d_model, seed + 1)
    samples = LayerSamples(X=batch.X, Y=moe_forward_batch(layer, batch.X))
    ranking, _ = rank_micro_experts(layer, samples)
    X = batch.X.astype(np.float64)
    plan = make_quant_plan(ranking, (0.2, 0.6, 0.2), (3, 2, 1), 128, input_energy=np.einsum("tc,tc->c", X, X))

    q = quantize_layer(layer, plan, "q")
    q_consistent = all(len(bits) == 1 for bits in micro_expert_bitwidths(q).values())

    dagger = quantize_layer(layer, plan, "q-dagger")
    audit = integrity_audit(dagger)
    mixed = sum(1 for m in ("up", "gate") for bits in audit[m].values() if len(bits) >= 2)
    return _result("integrity_audit", q_consistent and mixed > 0,
                   q_precision_consistent=q_consistent, q_dagger_mixed_micro_experts=mixed)


def run_verification(seed: int, trials: int, threads: int = 1,
                     show_progress: bool = False) -> Dict[str, Any]:
    """Run every check; passed is True only when all of them pass."""
    checks: List[Callable[[], Dict[str, Any]]] = [
        lambda: check_decomposition(seed, show_progress=show_progress),
        lambda: _sweeps_result(run_bound_sweeps(trials, seed, threads=threads, show_progress=show_progress)),
        check_lossless_table,
        check_bit_accounting,
        lambda: check_identity_and_invariance(seed),
        lambda: check_integrity_audit(seed),
    ]
    results = []
    for check in checks:
        result = check()
        results.append(result)
        logger.info("%-22s %s", result["name"], "ok" if result["passed"] else "FAILED")
    return {"seed": seed, "trials": trials, "checks": results, "passed": all(r["passed"] for r in results)}


def _sweeps_result(summary: Dict[str, Any]) -> Dict[str, Any]:
    return _result("bound_sweeps", summary["passed"], **{k: summary[k] for k in ("lemma", "theorem", "sandwich")})
