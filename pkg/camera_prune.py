"""
Layer-by-layer structured pruning of micro-experts.

Each layer is ranked on hidden states produced by the already-pruned prefix of
the model, the lowest-energy micro-experts are removed jointly from up, gate and
down, and the pruned layer's output becomes the next layer's calibration input.
"""

import logging
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from data_models import (
    MoELayer, MoEModel, CalibBatch, Ranking, EnergyScores,
    RetainSet, PruneConfig, ExpertWeights,
)
from moe_model import layer_with_experts, parameter_count
from calibration import sequential_replace
from camera_rank import rank_micro_experts

logger = logging.getLogger(__name__)

LayerCallback = Callable[[int, MoELayer, Ranking, EnergyScores, RetainSet], None]


def _retain_from_kept(kept: np.ndarray, widths: Sequence[int]) -> RetainSet:
    n_micro = int(sum(widths))
    kept = np.unique(np.asarray(kept, dtype=np.int64))
    if kept.size and (kept[0] < 0 or kept[-1] >= n_micro):
        raise IndexError(f"retained index out of range for N_e={n_micro}")
    mask = np.zeros(n_micro, dtype=bool)
    mask[kept] = True
    offsets = np.concatenate([[0], np.cumsum(widths, dtype=np.int64)])
    per_expert = tuple(
        tuple(int(k) for k in np.flatnonzero(mask[offsets[j]:offsets[j + 1]]))
        for j in range(len(widths))
    )
    return RetainSet(kept=kept, removed=np.flatnonzero(~mask).astype(np.int64), per_expert=per_expert)


def _widths_of(ranking: Ranking, n_micro: int) -> Tuple[int, ...]:
    widths = ranking.widths or (n_micro,)
    if sum(widths) != n_micro:
        raise ValueError(f"ranking widths sum to {sum(widths)}, expected N_e={n_micro}")
    return tuple(widths)


def select_retain_set(ranking: Ranking, lam: float, n_micro: int,
                      protected: Optional[Sequence[int]] = None) -> RetainSet:
    """
    Keep the top round-half-up((1 - lam) * N_e) ranked micro-experts (at least one).

    :param protected: flat indices kept unconditionally; the rest of the budget is
        filled from the ranking
    """
    config = PruneConfig(lam=lam)
    if ranking.order.size != n_micro:
        raise ValueError(f"ranking covers {ranking.order.size} micro-experts, expected {n_micro}")
    widths = _widths_of(ranking, n_micro)
    m = config.retain_count(n_micro)
    if protected is None or len(protected) == 0:
        kept = ranking.order[:m]
    else:
        protected = np.unique(np.asarray(protected, dtype=np.int64))
        rest = ranking.order[~np.isin(ranking.order, protected)]
        kept = np.concatenate([protected, rest[:max(0, m - protected.size)]])
    return _retain_from_kept(kept, widths)


def random_retain_set(widths: Sequence[int], lam: float, seed: int) -> RetainSet:
    """Uniformly random retain set of the same size select_retain_set would keep."""
    n_micro = int(sum(widths))
    m = PruneConfig(lam=lam).retain_count(n_micro)
    rng = np.random.default_rng(seed)
    return _retain_from_kept(rng.permutation(n_micro)[:m], widths)


def prune_layer(layer: MoELayer, retain: RetainSet) -> MoELayer:
    if len(retain.per_expert) != len(layer.experts):
        raise ValueError(f"retain set covers {len(retain.per_expert)} experts, layer has {len(layer.experts)}")
    experts = []
    for j, (e, keep) in enumerate(zip(layer.experts, retain.per_expert)):
        keep = np.asarray(keep, dtype=np.int64)
        if keep.size and (keep.min() < 0 or keep.max() >= e.width):
            raise IndexError(f"neuron index out of range for expert {j} of width {e.width}")
        experts.append(ExpertWeights(w_up=e.w_up[keep], w_gate=e.w_gate[keep], w_down=e.w_down[:, keep]))
    return layer_with_experts(layer, experts)


def shared_indices(layer: MoELayer) -> np.ndarray:
    return np.arange(int(layer.offsets[layer.config.n_shared]), dtype=np.int64)


def prune_model(model: MoEModel, batch: CalibBatch, config: PruneConfig, threads: int = 1,
                on_layer: Optional[LayerCallback] = None, show_progress: bool = False) -> MoEModel:
    def choose(i, layer, samples):
        ranking, scores = rank_micro_experts(layer, samples, config.alpha, threads=threads)
        protected = shared_indices(layer) if config.protect_shared else None
        retain = select_retain_set(ranking, config.lam, layer.n_micro, protected)
        pruned = prune_layer(layer, retain)
        logger.info("Layer %d: kept %d of %d micro-experts", i, retain.kept.size, layer.n_micro)
        if on_layer:
            on_layer(i, layer, ranking, scores, retain)
        return pruned

    return sequential_replace(model, batch, choose, "prune", show_progress)


def prune_model_random(model: MoEModel, batch: CalibBatch, lam: float, seed: int,
                       show_progress: bool = False) -> MoEModel:
    """Random-pruning baseline in the same sequential harness, one seed stream per layer."""
    seeds = np.random.SeedSequence(seed).spawn(model.config.n_layers)

    def choose(i, layer, samples):
        retain = random_retain_set(layer.widths, lam, int(seeds[i].generate_state(1)[0]))
        return prune_layer(layer, retain)

    return sequential_replace(model, batch, choose, "prune-random", show_progress)


def prune_layer_report(index: int, layer: MoELayer, retain: RetainSet, lam: float) -> Dict[str, Any]:
    pruned = prune_layer(layer, retain)
    return {
        "layer": index,
        "lambda": lam,
        "n_micro_before": layer.n_micro,
        "n_micro_after": pruned.n_micro,
        "widths_before": list(layer.widths),
        "widths_after": list(pruned.widths),
        "params_before": parameter_count(layer, include_router=False),
        "params_after": parameter_count(pruned, include_router=False),
    }


def prune_with_report(model: MoEModel, batch: CalibBatch, config: PruneConfig, threads: int = 1,
                      show_progress: bool = False) -> Tuple[MoEModel, List[Dict[str, Any]]]:
    report: List[Dict[str, Any]] = []

    def collect(i, layer, ranking, scores, retain):
        report.append(prune_layer_report(i, layer, retain, config.lam))

    pruned = prune_model(model, batch, config, threads=threads, on_layer=collect,
                         show_progress=show_progress)
    return pruned, report
