"""
Reference MoE forward pass and the micro-expert view of a layer.

Weights and activations are stored as float32; every matmul and reduction here
runs in float64 and the public outputs are cast back to float32 unless the
caller asks for float64.
"""

import logging
from typing import List, Sequence

import numpy as np
from scipy.special import expit, softmax

from data_models import (
    ModelConfig, ExpertWeights, MoELayer, MoEModel,
    MicroExpertId, MicroExpertView, RouterWeights,
)

logger = logging.getLogger(__name__)


def silu(x):
    """x * logistic(x), element-wise for arrays."""
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def route_batch(router: np.ndarray, X: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Top&Norm routing for a batch of tokens.

    Softmax over all routed logits, keep the top_k largest (lower index wins on
    ties), renormalize the kept values to sum to one. Shared experts get 1.0.

    :return: matrix [n x (n_shared + n_experts)] of float64 coefficients
    """
    if config.top_k > config.n_experts:
        raise ValueError(f"top_k={config.top_k} exceeds n_experts={config.n_experts}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != config.d_model:
        raise ValueError(f"input has {X.shape[1]} features, expected d_model={config.d_model}")

    logits = X @ np.asarray(router, dtype=np.float64).T
    probs = softmax(logits, axis=1)
    # stable sort on the negated probabilities keeps the lower index first on ties
    top = np.argsort(-probs, axis=1, kind="stable")[:, :config.top_k]
    rows = np.arange(X.shape[0])[:, None]
    kept = probs[rows, top]
    kept = kept / kept.sum(axis=1, keepdims=True)

    A = np.zeros((X.shape[0], config.n_total_experts), dtype=np.float64)
    A[:, :config.n_shared] = 1.0
    A[rows, config.n_shared + top] = kept
    return A


def route(router: np.ndarray, x: np.ndarray, config: ModelConfig) -> RouterWeights:
    A = route_batch(router, np.asarray(x).reshape(1, -1), config)
    return RouterWeights(coefficients=A[0], n_shared=config.n_shared)


def _hidden(e: ExpertWeights, X: np.ndarray) -> np.ndarray:
    """silu(gate) * up for a float64 batch, shape [n x width]."""
    gate = X @ e.w_gate.astype(np.float64).T
    up = X @ e.w_up.astype(np.float64).T
    return silu(gate) * up


def _check_input(x: np.ndarray, d_model: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d_model:
        raise ValueError(f"input has {x.shape[-1]} features, expected d_model={d_model}")
    return x


def expert_forward(e: ExpertWeights, x: np.ndarray, out_dtype=np.float32) -> np.ndarray:
    x = _check_input(x, e.d_model)
    if e.width == 0:
        return np.zeros(x.shape, dtype=out_dtype)
    h = _hidden(e, np.atleast_2d(x))
    y = h @ e.w_down.astype(np.float64).T
    return y.reshape(x.shape).astype(out_dtype)


def moe_forward_batch(layer: MoELayer, X: np.ndarray, out_dtype=np.float32) -> np.ndarray:
    """Sum of A_j(x) * E_j(x) for every row of X."""
    X = np.atleast_2d(_check_input(X, layer.config.d_model))
    A = route_batch(layer.router, X, layer.config)
    Y = np.zeros(X.shape, dtype=np.float64)
    for j, e in enumerate(layer.experts):
        active = np.flatnonzero(A[:, j])
        if e.width == 0 or active.size == 0:
            continue
        h = _hidden(e, X[active]) * A[active, j:j + 1]
        Y[active] += h @ e.w_down.astype(np.float64).T
    return Y.astype(out_dtype)


def moe_forward(layer: MoELayer, x: np.ndarray, out_dtype=np.float32) -> np.ndarray:
    x = _check_input(x, layer.config.d_model)
    return moe_forward_batch(layer, x.reshape(1, -1), out_dtype=out_dtype)[0]


def model_forward(model: MoEModel, X: np.ndarray) -> np.ndarray:
    """Chains the MoE layers directly; there is no residual path."""
    H = np.asarray(X, dtype=np.float32)
    for layer in model.layers:
        H = moe_forward_batch(layer, H)
    return H


def micro_expert_ids(layer: MoELayer) -> List[MicroExpertId]:
    ids = []
    flat = 0
    for j, width in enumerate(layer.widths):
        for k in range(width):
            ids.append(MicroExpertId(expert=j, neuron=k, flat=flat))
            flat += 1
    return ids


def flat_to_id(layer: MoELayer, flat: int) -> MicroExpertId:
    offsets = layer.offsets
    if not 0 <= flat < offsets[-1]:
        raise IndexError(f"flat index {flat} out of range for N_e={offsets[-1]}")
    # side='right' skips over width-0 experts sharing the same offset
    expert = int(np.searchsorted(offsets, flat, side="right") - 1)
    return MicroExpertId(expert=expert, neuron=int(flat - offsets[expert]), flat=int(flat))


def _validate_id(layer: MoELayer, mid: MicroExpertId) -> None:
    if not 0 <= mid.expert < len(layer.experts):
        raise IndexError(f"expert {mid.expert} out of range")
    if not 0 <= mid.neuron < layer.experts[mid.expert].width:
        raise IndexError(f"neuron {mid.neuron} out of range for expert {mid.expert} "
                         f"of width {layer.experts[mid.expert].width}")
    if mid.flat != int(layer.offsets[mid.expert]) + mid.neuron:
        raise IndexError(f"flat index {mid.flat} inconsistent with ({mid.expert}, {mid.neuron})")


def micro_expert_view(layer: MoELayer, mid: MicroExpertId) -> MicroExpertView:
    _validate_id(layer, mid)
    e = layer.experts[mid.expert]
    return MicroExpertView(
        w_up_row=e.w_up[mid.neuron],
        w_gate_row=e.w_gate[mid.neuron],
        w_down_col=e.w_down[:, mid.neuron],
    )


def micro_expert_contribution(layer: MoELayer, mid: MicroExpertId, x: np.ndarray,
                              out_dtype=np.float32) -> np.ndarray:
    """phi_i * w_down_col, with phi_i = A_expert(x) * silu(gate_row . x) * (up_row . x)."""
    view = micro_expert_view(layer, mid)
    x = _check_input(x, layer.config.d_model)
    a = route(layer.router, x, layer.config).coefficients[mid.expert]
    if a == 0.0:
        return np.zeros(layer.config.d_model, dtype=out_dtype)
    phi = a * silu(view.w_gate_row.astype(np.float64) @ x) * (view.w_up_row.astype(np.float64) @ x)
    return (phi * view.w_down_col.astype(np.float64)).astype(out_dtype)


def permute_micro_experts(e: ExpertWeights, perm: Sequence[int]) -> ExpertWeights:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (e.width,) or not np.array_equal(np.sort(perm), np.arange(e.width)):
        raise ValueError(f"perm is not a bijection on [0, {e.width})")
    return ExpertWeights(w_up=e.w_up[perm], w_gate=e.w_gate[perm], w_down=e.w_down[:, perm])


def stack_basis(layer: MoELayer) -> np.ndarray:
    """Basis matrix W [N_e x d_model]: the transposed, concatenated down projections."""
    cols = [e.w_down.astype(np.float64).T for e in layer.experts]
    if not cols:
        return np.zeros((0, layer.config.d_model))
    return np.concatenate(cols, axis=0)


def parameter_count(layer: MoELayer, include_router: bool = True) -> int:
    count = 3 * layer.config.d_model * layer.n_micro
    if include_router:
        count += layer.router.size
    return count


def gen_model(config: ModelConfig, seed: int, spread: float = 1.0,
              router_scale: float = 1.0) -> MoEModel:
    """Seeded random toy model.

    Weights are Gaussian with 1/sqrt(fan_in) scaling. Each neuron's up, gate and
    down vectors are additionally multiplied by independent log-normal factors
    exp(spread * z - spread**2), whose second moment is 1; spread > 0 gives the
    heavy-tailed micro-expert energies seen in trained experts, spread = 0 gives
    a plain Gaussian model.
    """
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    layers = []
    for _ in range(config.n_layers):
        experts = []
        for _ in range(config.n_total_experts):
            scales = np.exp(spread * rng.standard_normal((3, f)) - spread ** 2)
            w_up = rng.standard_normal((f, d)) / np.sqrt(d) * scales[0][:, None]
            w_gate = rng.standard_normal((f, d)) / np.sqrt(d) * scales[1][:, None]
            w_down = rng.standard_normal((d, f)) / np.sqrt(f) * scales[2][None, :]
            experts.append(ExpertWeights(w_up=w_up, w_gate=w_gate, w_down=w_down))
        router = rng.standard_normal((config.n_experts, d)) * (router_scale / np.sqrt(d))
        layers.append(MoELayer(experts=tuple(experts), router=router, config=config))
    logger.debug("Generated toy model %s with seed %d", config.to_dict(), seed)
    return MoEModel(config=config, layers=tuple(layers))


def layer_with_experts(layer: MoELayer, experts: Sequence[ExpertWeights],
                       quant_records=()) -> MoELayer:
    return MoELayer(experts=tuple(experts), router=layer.router, config=layer.config,
                    quant_records=tuple(quant_records))

