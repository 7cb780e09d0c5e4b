"""
Micro-expert ranking by decoding-time energy.

For micro-expert i with coefficient column phi_i (over calibration tokens) and
basis vector w_i (its down-projection column):

    E_i = [(1 - alpha) * ||phi_i||_2^2 + alpha * ||phi_i||_inf^2] * ||w_i||_2^2

alpha = 0 is the plain energy that bounds the decoding error of removing i.
"""

import logging
from typing import Dict, Any, List, Tuple

import numpy as np

from data_models import (
    MoELayer, MoEModel, CalibBatch, LayerSamples,
    ActivationCoefficients, EnergyScores, Ranking,
)
from moe_model import route_batch, silu, stack_basis, flat_to_id
from calibration import capture_all_layers
from utils import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1.0


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def compute_coefficients(layer: MoELayer, samples: LayerSamples,
                         threads: int = 1) -> ActivationCoefficients:
    """Phi [n x N_e]: phi[t, flat(j, k)] = A_j(x_t) * silu(gate_k . x_t) * (up_k . x_t)."""
    X = np.asarray(samples.X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.config.d_model:
        raise ValueError(f"samples have shape {X.shape}, expected [n x {layer.config.d_model}]")
    A = route_batch(layer.router, X, layer.config)
    offsets = layer.offsets
    phi = np.zeros((X.shape[0], layer.n_micro), dtype=np.float64)

    def fill(j: int) -> None:
        e = layer.experts[j]
        if e.width == 0:
            return
        active = np.flatnonzero(A[:, j])
        if active.size == 0:
            return
        Xa = X[active]
        block = silu(Xa @ e.w_gate.astype(np.float64).T) * (Xa @ e.w_up.astype(np.float64).T)
        # each expert writes only its own column block
        phi[active, offsets[j]:offsets[j + 1]] = A[active, j:j + 1] * block

    parallel_map(fill, range(len(layer.experts)), threads)
    return ActivationCoefficients(phi=phi, widths=layer.widths)


def energy_from_norms(phi: np.ndarray, basis_sq_norms: np.ndarray, alpha: float) -> np.ndarray:
    _check_alpha(alpha)
    phi = np.asarray(phi, dtype=np.float64)
    col_sq = np.einsum("ti,ti->i", phi, phi)
    if phi.shape[0] == 0:
        col_inf = np.zeros(phi.shape[1])
    else:
        col_inf = np.max(np.abs(phi), axis=0) ** 2
    return ((1.0 - alpha) * col_sq + alpha * col_inf) * np.asarray(basis_sq_norms, dtype=np.float64)


def basis_sq_norms(layer: MoELayer) -> np.ndarray:
    W = stack_basis(layer)
    return np.einsum("ij,ij->i", W, W)


def compute_energy(phi: ActivationCoefficients, layer: MoELayer, alpha: float) -> EnergyScores:
    _check_alpha(alpha)
    if phi.phi.shape[1] != layer.n_micro:
        raise ValueError(f"coefficient matrix has {phi.phi.shape[1]} columns, layer has N_e={layer.n_micro}")
    energy = energy_from_norms(phi.phi, basis_sq_norms(layer), alpha)
    return EnergyScores(energy=energy, alpha=float(alpha))


def rank_by_energy(energy: np.ndarray, widths: Tuple[int, ...] = ()) -> Ranking:
    """Descending energy; equal energies keep ascending flat order."""
    order = np.argsort(-np.asarray(energy, dtype=np.float64), kind="stable")
    return Ranking(order=order.astype(np.int64), widths=tuple(widths))


def rank_micro_experts(layer: MoELayer, samples: LayerSamples, alpha: float = DEFAULT_ALPHA,
                       threads: int = 1) -> Tuple[Ranking, EnergyScores]:
    _check_alpha(alpha)
    coeffs = compute_coefficients(layer, samples, threads=threads)
    scores = compute_energy(coeffs, layer, alpha)
    return rank_by_energy(scores.energy, layer.widths), scores


def rank_model(model: MoEModel, batch: CalibBatch, alpha: float = DEFAULT_ALPHA,
               threads: int = 1) -> List[Tuple[Ranking, EnergyScores]]:
    """Rank every layer on the unmodified model's hidden states."""
    results = []
    for samples in capture_all_layers(model, batch):
        results.append(rank_micro_experts(model.layers[samples.layer], samples, alpha, threads))
        logger.info("Ranked layer %d (N_e=%d)", samples.layer, model.layers[samples.layer].n_micro)
    return results


def ranking_records(ranking: Ranking, scores: EnergyScores, layer: MoELayer) -> List[Dict[str, Any]]:
    """Rows of ranking.json, in rank order."""
    records = []
    for rank, flat in enumerate(ranking.order):
        mid = flat_to_id(layer, int(flat))
        records.append({
            "flat_index": int(flat),
            "expert": mid.expert,
            "neuron": mid.neuron,
            "energy": float(scores.energy[flat]),
            "rank": rank,
        })
    return records
