import logging
from typing import List, Dict, Any, Optional, Sequence

import numpy as np

from data_models import (
    MoELayer, MoEModel, CalibBatch, EnergyScores, Ranking, RetainSet, ApproxErrorRecord, LayerSamples,
)
from calibration import capture_all_layers
from camera_rank import rank_micro_experts
from camera_prune import select_retain_set, prune_layer
from moe_model import moe_forward_batch, route_batch
from utils import parallel_map

logger = logging.getLogger(__name__)

QUANTILES = (0, 25, 50, 75, 100)
QUANTILE_NAMES = ("min", "p25", "median", "p75", "max")


def expert_label(layer: MoELayer, expert: int) -> str:
    """S0, S1, ... for shared experts, E0, E1, ... for routed ones."""
    n_shared = layer.config.n_shared
    return f"S{expert}" if expert < n_shared else f"E{expert - n_shared}"


def _quantiles(values: np.ndarray, prefix: str = "") -> Dict[str, Optional[float]]:
    if values.size == 0:
        return {f"{prefix}{name}": None for name in QUANTILE_NAMES}
    points = np.percentile(values, QUANTILES)
    return {f"{prefix}{name}": float(p) for name, p in zip(QUANTILE_NAMES, points)}


def _check_same_shape(model_a: MoEModel, model_b: MoEModel) -> None:
    a, b = model_a.config, model_b.config
    if (a.n_layers, a.n_experts, a.n_shared, a.d_model, a.top_k) != \
            (b.n_layers, b.n_experts, b.n_shared, b.d_model, b.top_k):
        raise ValueError(f"models do not share a config shape: {a.to_dict()} vs {b.to_dict()}")


def _row_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine; equal rows give exactly 1, negated rows exactly -1."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", A, B)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    cos = np.clip(cos, -1.0, 1.0)
    cos[np.all(A == B, axis=1)] = 1.0
    cos[np.all(A == -B, axis=1) & (na > 0)] = -1.0
    return cos


class LayerReportCalculator:
    """Diagnostic tables for ranked, pruned and quantized layers."""

    def energy_distribution(self, scores: EnergyScores, drop_top: int = 0) -> Dict[str, Any]:
        """
        Descending energies with the drop_top largest removed, plus quantiles.

        :param drop_top: outliers to drop before summarizing, < N_e
        """
        energy = np.asarray(scores.energy, dtype=np.float64)
        if not 0 <= drop_top < energy.size:
            raise ValueError(f"drop_top must lie in [0, {energy.size}), got {drop_top}")
        kept = np.sort(energy)[::-1][drop_top:]
        summary = _quantiles(kept)
        median = summary["median"]
        return {
            "alpha": scores.alpha,
            "drop_top": drop_top,
            "n_micro": int(energy.size),
            "summary": summary,
            # recorded for heavy-tail inspection, never asserted on
            "max_over_median": summary["max"] / median if median else None,
            "energies": [float(e) for e in kept],
        }

    def energy_rows(self, distribution: Dict[str, Any]) -> List[Dict[str, Any]]:
        offset = distribution["drop_top"]
        return [{"rank": offset + i, "energy": e} for i, e in enumerate(distribution["energies"])]

    def rank_distribution_per_expert(self, ranking: Ranking, layer: MoELayer) -> List[Dict[str, Any]]:
        """
        Quartiles of each expert's global micro-expert ranks (box-plot data).

        Raw ranks are 0-based positions in the descending-energy order;
        normalized ranks divide by N_e - 1.
        """
        if ranking.order.size != layer.n_micro:
            raise ValueError(f"ranking covers {ranking.order.size} micro-experts, layer has {layer.n_micro}")
        positions = ranking.positions().astype(np.float64)
        scale = max(layer.n_micro - 1, 1)
        offsets = layer.offsets
        rows = []
        for j in range(len(layer.experts)):
            ranks = positions[offsets[j]:offsets[j + 1]]
            row: Dict[str, Any] = {"expert": j, "label": expert_label(layer, j), "width": int(ranks.size)}
            row.update(_quantiles(ranks, "rank_"))
            row.update(_quantiles(ranks / scale, "norm_rank_"))
            rows.append(row)
        return rows

    def per_expert_prune_ratio(self, retain: RetainSet, layer: MoELayer) -> List[Dict[str, Any]]:
        """1 - kept / width per expert; None for experts that were already empty."""
        if len(retain.per_expert) != len(layer.experts):
            raise ValueError(f"retain set covers {len(retain.per_expert)} experts, layer has {len(layer.experts)}")
        return self._ratio_rows(layer, [len(kept) for kept in retain.per_expert])

    def width_prune_ratio(self, before: MoELayer, after: MoELayer) -> List[Dict[str, Any]]:
        """Same table from the widths of a layer before and after pruning."""
        if len(before.experts) != len(after.experts):
            raise ValueError(f"layers have {len(before.experts)} and {len(after.experts)} experts")
        kept = list(after.widths)
        for j, (w0, w1) in enumerate(zip(before.widths, kept)):
            if w1 > w0:
                raise ValueError(f"expert {j} grew from width {w0} to {w1}")
        return self._ratio_rows(before, kept)

    def _ratio_rows(self, layer: MoELayer, kept_counts: Sequence[int]) -> List[Dict[str, Any]]:
        rows = []
        for j, (e, kept) in enumerate(zip(layer.experts, kept_counts)):
            rows.append({
                "expert": j,
                "label": expert_label(layer, j),
                "width": e.width,
                "kept": int(kept),
                "prune_ratio": 1.0 - kept / e.width if e.width else None,
            })
        return rows

    def approx_error(self, model_a: MoEModel, model_b: MoEModel, batch: CalibBatch,
                     layers: Optional[Sequence[int]] = None, threads: int = 1) -> List[ApproxErrorRecord]:
        """
        Per-layer output error of model_b against model_a.

        Both layer variants are fed model_a's upstream hidden states. l2 is the
        sum over tokens of ||y_b - y_a||_2; cosine is the mean row cosine.
        """
        _check_same_shape(model_a, model_b)
        n_layers = model_a.config.n_layers
        layers = list(range(n_layers)) if layers is None else [int(i) for i in layers]
        for i in layers:
            if not 0 <= i < n_layers:
                raise IndexError(f"layer {i} out of range for {n_layers} layers")
        samples = capture_all_layers(model_a, batch)

        def compare(i: int) -> ApproxErrorRecord:
            X = samples[i].X
            Ya = moe_forward_batch(model_a.layers[i], X, out_dtype=np.float64)
            Yb = moe_forward_batch(model_b.layers[i], X, out_dtype=np.float64)
            l2 = float(np.sum(np.linalg.norm(Yb - Ya, axis=1)))
            return ApproxErrorRecord(layer=i, l2=l2, cosine=float(np.mean(_row_cosines(Ya, Yb))))

        return parallel_map(compare, layers, threads)

    def approx_error_rows(self, records: Sequence[ApproxErrorRecord]) -> List[Dict[str, Any]]:
        return [{"layer": r.layer, "l2_sum_over_tokens": r.l2, "mean_cosine": r.cosine} for r in records]

    def lossless_token_fraction(self, model_a: MoEModel, model_b: MoEModel,
                                batch: CalibBatch) -> List[Dict[str, Any]]:
        """
        Per layer, the share of tokens whose routed experts survive in model_b.

        Routing follows model_a on its own hidden states. A token is "intact"
        when each of its routed experts keeps its full width, and "alive" when
        each keeps at least one micro-expert.
        """
        _check_same_shape(model_a, model_b)
        n_shared = model_a.config.n_shared
        rows = []
        for samples in capture_all_layers(model_a, batch):
            i = samples.layer
            A = route_batch(model_a.layers[i].router, samples.X, model_a.config)[:, n_shared:] > 0
            before = np.asarray(model_a.layers[i].widths[n_shared:])
            after = np.asarray(model_b.layers[i].widths[n_shared:])
            full = after >= before
            nonempty = after > 0
            rows.append({
                "layer": i,
                "intact_fraction": float(np.mean(np.all(~A | full, axis=1))),
                "alive_fraction": float(np.mean(np.all(~A | nonempty, axis=1))),
            })
        return rows


def jaccard(a: Sequence[int], b: Sequence[int]) -> float:
    """|a & b| / |a | b|; two empty sets count as identical."""
    sa, sb = set(int(i) for i in a), set(int(i) for i in b)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


def _layer_l2(layer: MoELayer, pruned: MoELayer, X: np.ndarray) -> float:
    Y = moe_forward_batch(layer, X, out_dtype=np.float64)
    Y_hat = moe_forward_batch(pruned, X, out_dtype=np.float64)
    return float(np.sum(np.linalg.norm(Y_hat - Y, axis=1)))


def alpha_sweep(layer: MoELayer, samples: LayerSamples, alphas: Sequence[float],
                lam: float) -> List[Dict[str, Any]]:
    """
    Prune one layer at a fixed lambda for every alpha in the grid.

    Each row holds the pruned layer's l2 error on the samples (sum over tokens of
    ||y_hat - y||_2) and the Jaccard overlap of its retain set with the plain
    energy (alpha = 0) retain set.
    """
    X = np.asarray(samples.X, dtype=np.float64)
    plain, _ = rank_micro_experts(layer, samples, 0.0)
    reference = select_retain_set(plain, lam, layer.n_micro).kept
    rows = []
    for alpha in alphas:
        ranking, _ = rank_micro_experts(layer, samples, alpha)
        retain = select_retain_set(ranking, lam, layer.n_micro)
        rows.append({
            "layer": samples.layer,
            "alpha": float(alpha),
            "lambda": float(lam),
            "kept": int(retain.kept.size),
            "l2_error": _layer_l2(layer, prune_layer(layer, retain), X),
            "jaccard_vs_plain_energy": jaccard(retain.kept, reference),
        })
    return rows


def calibration_size_sweep(layer: MoELayer, samples: LayerSamples, sizes: Sequence[int],
                           lam: float, alpha: float) -> List[Dict[str, Any]]:
    """
    Rank on the first n calibration tokens for each n in sizes.

    Retain sets are compared with the one from the largest n (Jaccard), and every
    pruned layer is scored on the full sample set.
    """
    X = np.asarray(samples.X, dtype=np.float64)
    sizes = sorted(set(int(n) for n in sizes))
    if not sizes or sizes[0] < 1 or sizes[-1] > X.shape[0]:
        raise ValueError(f"calibration sizes must lie in [1, {X.shape[0]}], got {sizes}")
    retained = []
    for n in sizes:
        ranking, _ = rank_micro_experts(layer, LayerSamples(X=X[:n], Y=None, layer=samples.layer), alpha)
        retained.append(select_retain_set(ranking, lam, layer.n_micro))
    reference = retained[-1].kept
    return [{
        "layer": samples.layer,
        "n": n,
        "lambda": float(lam),
        "alpha": float(alpha),
        "jaccard_vs_largest": jaccard(retain.kept, reference),
        "l2_error": _layer_l2(layer, prune_layer(layer, retain), X),
    } for n, retain in zip(sizes, retained)]
