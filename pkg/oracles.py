"""
Exact reference computations for checking micro-expert selection.

All functions take the coefficient matrix phi [n x N_e] and the basis matrix
W [N_e x d] directly, so they can be driven by random instances as well as by
coefficients captured from a model layer. Y = phi @ W is the layer output.
"""

import itertools
import logging
import math
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from tqdm import tqdm

from data_models import OracleReport
from camera_rank import energy_from_norms, rank_by_energy
from utils import exact, parallel_map

logger = logging.getLogger(__name__)

MAX_BRUTEFORCE_MICRO = 20
BOUND_RTOL = 1e-6
BOUND_ATOL = 1e-9
SPECTRUM_RTOL = 1e-8

# (label, routed experts, shared experts, activated routed experts)
LOSSLESS_TABLE_CONFIGS = (
    ("Mixtral-8x7B", 8, 0, 2),
    ("Phi3.5-MoE-42B", 16, 0, 2),
    ("Deepseek-MoE-16B", 64, 2, 4),
    ("Qwen3-30B-A3B", 128, 0, 8),
    ("Deepseek-V2", 160, 2, 6),
)


class BoundViolationError(AssertionError):
    """An error bound that must hold on every instance did not."""


def _check_instance(phi: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    phi = np.asarray(phi, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if phi.ndim != 2 or W.ndim != 2:
        raise ValueError("phi and W must be 2-D")
    if phi.shape[1] != W.shape[0]:
        raise ValueError(f"phi has {phi.shape[1]} columns but W has {W.shape[0]} rows")
    return phi, W


def _check_indices(indices: Sequence[int], n_micro: int) -> np.ndarray:
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_micro):
        raise IndexError(f"micro-expert index out of range for N_e={n_micro}")
    return idx


def _within(lhs: float, rhs: float) -> bool:
    return lhs <= rhs * (1.0 + BOUND_RTOL) + BOUND_ATOL


def subset_error(phi: np.ndarray, W: np.ndarray, kept: Sequence[int]) -> float:
    """||phi @ W - phi[:, S] @ W[S, :]||_F^2, computed from the removed columns."""
    phi, W = _check_instance(phi, W)
    kept = _check_indices(kept, phi.shape[1])
    removed = np.setdiff1d(np.arange(phi.shape[1]), kept)
    residual = phi[:, removed] @ W[removed]
    return float(np.einsum("ij,ij->", residual, residual))


def removal_energies(phi: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Plain (alpha = 0) energies ||phi_i||^2 * ||w_i||^2."""
    phi, W = _check_instance(phi, W)
    return energy_from_norms(phi, np.einsum("ij,ij->i", W, W), 0.0)


def cssp_bruteforce(phi: np.ndarray, W: np.ndarray, m: int,
                    threads: int = 1) -> Tuple[Tuple[int, ...], float]:
    """
    Best m-column subset by exhaustive enumeration.

    Errors come from the Hadamard product of the Gram matrices,
    error(S) = sum((phi^T phi * W W^T)[S^C, S^C]). Subsets are visited in
    lexicographic order and the first minimum wins, whatever the thread count.

    :raises ValueError: N_e above the enumeration guard or m outside [1, N_e]
    """
    phi, W = _check_instance(phi, W)
    n_micro = phi.shape[1]
    if n_micro > MAX_BRUTEFORCE_MICRO:
        raise ValueError(f"N_e={n_micro} exceeds the enumeration limit of {MAX_BRUTEFORCE_MICRO}; "
                         f"use the greedy selection instead")
    if not 1 <= m <= n_micro:
        raise ValueError(f"m must lie in [1, {n_micro}], got {m}")

    M = (phi.T @ phi) * (W @ W.T)
    universe = np.arange(n_micro)
    total = math.comb(n_micro, m)
    n_chunks = max(1, min(total, threads * 4))
    step = -(-total // n_chunks)

    def best_in(chunk: Tuple[Tuple[int, ...], ...]) -> Tuple[float, Tuple[int, ...]]:
        best_err, best_set = math.inf, ()
        for subset in chunk:
            sc = np.setdiff1d(universe, subset, assume_unique=True)
            err = float(M[np.ix_(sc, sc)].sum()) if sc.size else 0.0
            if err < best_err:
                best_err, best_set = err, subset
        return best_err, best_set

    best_err, best_set = math.inf, ()
    subsets = itertools.combinations(range(n_micro), m)
    chunks = iter(lambda: tuple(itertools.islice(subsets, step)), ())
    for err, subset in parallel_map(best_in, chunks, threads):
        if err < best_err:
            best_err, best_set = err, subset
    return tuple(int(i) for i in best_set), max(best_err, 0.0)


def greedy_selection(phi: np.ndarray, W: np.ndarray, keep: int) -> np.ndarray:
    """Top-energy keep set (alpha = 0 energies, ties to the lower index)."""
    return rank_by_energy(removal_energies(phi, W)).order[:keep]


def greedy_error(phi: np.ndarray, W: np.ndarray, keep: int) -> float:
    phi, W = _check_instance(phi, W)
    if not 0 <= keep <= phi.shape[1]:
        raise ValueError(f"keep must lie in [0, {phi.shape[1]}], got {keep}")
    return subset_error(phi, W, greedy_selection(phi, W, keep))


def singular_values(Y: np.ndarray) -> np.ndarray:
    """Full spectrum, descending. Falls back to the QR-iteration driver when gesdd fails."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.size == 0:
        return np.zeros(0)
    try:
        return linalg.svd(Y, compute_uv=False, lapack_driver="gesdd")
    except linalg.LinAlgError:
        logger.warning("gesdd did not converge on a %s matrix, retrying with gesvd", Y.shape)
        return linalg.svd(Y, compute_uv=False, lapack_driver="gesvd")


def svd_rank_k_error(Y: np.ndarray, rank: int) -> Tuple[float, np.ndarray]:
    """
    Optimal rank-`rank` approximation error sum_{i > rank} sigma_i^2.

    :raises ValueError: rank outside [0, min(n, d)]
    :raises scipy.linalg.LinAlgError: neither driver converged
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError("Y must be 2-D")
    if not 0 <= rank <= min(Y.shape):
        raise ValueError(f"rank must lie in [0, {min(Y.shape)}], got {rank}")
    s = singular_values(Y)
    return float(np.sum(s[rank:] ** 2)), s


def lemma_bound(phi: np.ndarray, W: np.ndarray, removed: Sequence[int],
                check: bool = True) -> Tuple[float, float]:
    """
    (epsilon, epsilon_sup) for removing `removed`.

    epsilon = ||phi[:, R] @ W[R, :]||_F^2 and
    epsilon_sup = sum_{i in R} ||phi_i||^2 ||w_i||^2.

    :raises IndexError: removed index out of range
    :raises BoundViolationError: epsilon > epsilon_sup beyond rounding slack
    """
    phi, W = _check_instance(phi, W)
    removed = _check_indices(removed, phi.shape[1])
    if removed.size == 0:
        return 0.0, 0.0
    residual = phi[:, removed] @ W[removed]
    epsilon = float(np.einsum("ij,ij->", residual, residual))
    epsilon_sup = float(np.sum(removal_energies(phi, W)[removed]))
    if check and not _within(epsilon, epsilon_sup):
        raise BoundViolationError(f"decoding error {epsilon!r} exceeds its upper bound {epsilon_sup!r}")
    return epsilon, epsilon_sup


def theorem_check(phi: np.ndarray, W: np.ndarray, keep: int, check: bool = True) -> OracleReport:
    """
    Compare the greedy keep-set error with the optimal rank-keep error.

    delta = k * (boundary energy - min_{i > keep} sigma_i^2) with k = N_e - keep
    removed micro-experts; the spectrum is zero-padded to N_e entries. The
    boundary energy is the keep-th ranked energy after tie-breaking.

    :raises ValueError: keep outside [1, N_e)
    :raises BoundViolationError: greedy error > svd error + delta beyond slack
    """
    phi, W = _check_instance(phi, W)
    n_micro = phi.shape[1]
    if not 1 <= keep < n_micro:
        raise ValueError(f"keep must lie in [1, {n_micro}), got {keep}")

    energies = removal_energies(phi, W)
    order = rank_by_energy(energies).order
    removed = order[keep:]
    epsilon = subset_error(phi, W, order[:keep])
    epsilon_sup = float(np.sum(energies[removed]))

    Y = phi @ W
    svd_error, s = svd_rank_k_error(Y, min(keep, min(Y.shape)))
    padded = np.zeros(max(n_micro, s.size))
    padded[:s.size] = s ** 2
    k = n_micro - keep
    boundary = float(energies[order[keep - 1]])
    delta = k * (boundary - float(np.min(padded[keep:n_micro])))

    bound = svd_error + delta
    report = OracleReport(
        epsilon=epsilon, epsilon_sup=epsilon_sup, svd_error=svd_error, delta=delta, k=k,
        boundary_energy=boundary, tightness=epsilon / bound if bound > 0 else None,
        singular_values=[float(v) for v in s],
    )
    if check and not _within(epsilon, bound):
        raise BoundViolationError(f"greedy error {epsilon!r} exceeds svd error + delta = {bound!r}")
    return report


def p_lossless_exact(n_experts: int, n_activated: int, prune_frac: float) -> Fraction:
    """
    C(remaining, k) / C(n_experts, k) with remaining = floor((1 - prune_frac) * n_experts).

    Zero when fewer than k experts remain.
    """
    if n_experts < 1:
        raise ValueError(f"experts must be >= 1, got {n_experts}")
    if not 1 <= n_activated <= n_experts:
        raise ValueError(f"activated must lie in [1, {n_experts}], got {n_activated}")
    if not 0.0 <= prune_frac < 1.0:
        raise ValueError(f"prune fraction must lie in [0, 1), got {prune_frac}")
    remaining = math.floor((1 - exact(prune_frac)) * n_experts)
    return Fraction(math.comb(remaining, n_activated), math.comb(n_experts, n_activated))


def p_lossless(n_experts: int, n_activated: int, prune_frac: float) -> Tuple[float, bool]:
    """
    Probability that a token's routed experts all survive expert-level pruning.

    :return: (probability, feasible); feasible is False when fewer than
        n_activated experts remain, in which case the probability is 0
    """
    probability = p_lossless_exact(n_experts, n_activated, prune_frac)
    remaining = math.floor((1 - exact(prune_frac)) * n_experts)
    feasible = remaining >= n_activated
    if not feasible:
        logger.warning("only %d of %d experts remain, fewer than the %d activated per token",
                       remaining, n_experts, n_activated)
    return float(probability), feasible


def lossless_table_rows(prune_frac: float = 0.25) -> List[Dict[str, Any]]:
    """Lossless-activation probability of common MoE configurations after expert pruning."""
    rows = []
    for name, routed, shared, activated in LOSSLESS_TABLE_CONFIGS:
        probability, _ = p_lossless(routed, activated, prune_frac)
        rows.append({
            "model": name,
            "experts": f"{shared}+{routed}" if shared else str(routed),
            "activated": f"{shared}+top{activated}" if shared else f"top{activated}",
            "r_act": activated / routed,
            "p_lossless": probability,
            "p_lossless_percent": round(probability * 100, 2),
        })
    return rows


def random_instance(rng: np.random.Generator, max_n: int = 24, max_micro: int = 16,
                    max_d: int = 12, min_micro: int = 2, orthogonal: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random (phi, W) with heavy-tailed column scales.

    Sizes are drawn uniformly: n in [2, max_n], N_e in [min_micro, max_micro],
    d in [2, max_d]. With orthogonal=True the coefficient columns are mutually
    orthogonal and n is raised to at least N_e.
    """
    n_micro = int(rng.integers(min_micro, max_micro + 1))
    low_n = n_micro if orthogonal else 2
    n = int(rng.integers(low_n, max(max_n, low_n) + 1))
    d = int(rng.integers(2, max_d + 1))
    return sized_instance(rng, n, n_micro, d, orthogonal)


def sized_instance(rng: np.random.Generator, n: int, n_micro: int, d: int,
                   orthogonal: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    scales = np.exp(rng.standard_normal(n_micro))
    if orthogonal:
        if n < n_micro:
            raise ValueError(f"orthogonal coefficient columns need n >= N_e, got n={n}, N_e={n_micro}")
        basis, _ = np.linalg.qr(rng.standard_normal((n, n_micro)))
        phi = basis * (scales * np.sqrt(n))
    else:
        phi = rng.standard_normal((n, n_micro)) * scales
    W = rng.standard_normal((n_micro, d))
    return phi, W


def triangle_bound(phi: np.ndarray, W: np.ndarray, removed: Sequence[int]) -> float:
    """(sum_{i in R} ||phi_i|| ||w_i||)^2, a bound on the removal error that holds for any instance."""
    phi, W = _check_instance(phi, W)
    removed = _check_indices(removed, phi.shape[1])
    return float(np.sum(np.sqrt(removal_energies(phi, W)[removed])) ** 2)


def _ratio(lhs: float, rhs: float) -> Optional[float]:
    return lhs / rhs if rhs > 0 else None


def _spectrum_rel_err(phi: np.ndarray, W: np.ndarray, s: Sequence[float]) -> float:
    Y = phi @ W
    total = float(np.einsum("ij,ij->", Y, Y))
    return abs(float(np.sum(np.square(s))) - total) / total if total > 0 else 0.0


def lemma_sweep(trials: int, seed: int, show_progress: bool = False) -> Dict[str, Any]:
    """
    Per-column removal bound on orthogonal-coefficient instances, plus the
    triangle bound on unconstrained Gaussian instances.

    The per-column bound drops the cross terms (phi_i . phi_j)(w_i . w_j), so
    on unconstrained instances it is only counted, never asserted.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    worst_tightness = 0.0
    worst_single_gap = 0.0
    triangle_violations = 0
    sup_exceeded = 0
    for _ in tqdm(range(trials), desc="lemma", disable=not show_progress):
        for orthogonal in (True, False):
            phi, W = random_instance(rng, orthogonal=orthogonal)
            n_micro = phi.shape[1]
            size = int(rng.integers(1, n_micro + 1))
            removed = rng.choice(n_micro, size=size, replace=False)
            epsilon, epsilon_sup = lemma_bound(phi, W, removed, check=False)
            if orthogonal:
                if not _within(epsilon, epsilon_sup):
                    violations += 1
                worst_tightness = max(worst_tightness, _ratio(epsilon, epsilon_sup) or 0.0)
            else:
                if not _within(epsilon, triangle_bound(phi, W, removed)):
                    triangle_violations += 1
                if not _within(epsilon, epsilon_sup):
                    sup_exceeded += 1

            single = [int(rng.integers(0, n_micro))]
            e1, s1 = lemma_bound(phi, W, single, check=False)
            if s1 > 0:
                worst_single_gap = max(worst_single_gap, abs(e1 - s1) / s1)
    return {
        "trials": trials,
        "violations": violations,
        "max_tightness": worst_tightness,
        "single_removal_max_rel_gap": worst_single_gap,
        "general_triangle_violations": triangle_violations,
        "general_per_column_exceeded": sup_exceeded,
        "passed": violations == 0 and triangle_violations == 0 and worst_single_gap <= 1e-9,
    }


def theorem_sweep(trials: int, seed: int, show_progress: bool = False) -> Dict[str, Any]:
    """
    Greedy keep-set error against svd error + delta at keep = N_e // 2.

    Asserted on orthogonal-coefficient instances; on unconstrained instances
    the exceedances are counted and the spectrum identity is still checked.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    exceeded = 0
    worst_spectrum = 0.0
    tightness: List[float] = []
    for _ in tqdm(range(trials), desc="theorem", disable=not show_progress):
        for orthogonal in (True, False):
            phi, W = random_instance(rng, orthogonal=orthogonal)
            report = theorem_check(phi, W, phi.shape[1] // 2, check=False)
            holds = _within(report.epsilon, report.svd_error + report.delta)
            if orthogonal:
                violations += not holds
                if report.tightness is not None:
                    tightness.append(report.tightness)
            else:
                exceeded += not holds
            worst_spectrum = max(worst_spectrum, _spectrum_rel_err(phi, W, report.singular_values))
    return {
        "trials": trials,
        "violations": violations,
        "general_exceeded": exceeded,
        "spectrum_max_rel_err": worst_spectrum,
        "tightness_median": float(np.median(tightness)) if tightness else None,
        "tightness_max": float(np.max(tightness)) if tightness else None,
        "passed": violations == 0 and worst_spectrum <= SPECTRUM_RTOL,
    }


def sandwich_sweep(trials: int, seed: int, max_micro: int = 12, threads: int = 1,
                   show_progress: bool = False) -> Dict[str, Any]:
    """
    svd error <= cssp error <= greedy error on every instance, and
    greedy error <= svd error + delta on orthogonal-coefficient instances.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    for trial in tqdm(range(trials), desc="sandwich", disable=not show_progress):
        orthogonal = trial % 2 == 0
        phi, W = random_instance(rng, max_n=16, max_micro=max_micro, max_d=8, orthogonal=orthogonal)
        keep = phi.shape[1] // 2
        report = theorem_check(phi, W, keep, check=False)
        _, best = cssp_bruteforce(phi, W, keep, threads=threads)
        greedy = report.epsilon
        ok = _within(report.svd_error, best) and _within(best, greedy)
        if orthogonal:
            ok = ok and _within(greedy, report.svd_error + report.delta)
        if not ok:
            violations += 1
            logger.debug("sandwich violated: cssp=%r greedy=%r svd=%r delta=%r",
                         best, greedy, report.svd_error, report.delta)
    return {"trials": trials, "violations": violations, "passed": violations == 0}


def run_bound_sweeps(trials: int, seed: int, sandwich_trials: Optional[int] = None, threads: int = 1,
                     show_progress: bool = False) -> Dict[str, Any]:
    """Lemma, theorem and oracle-sandwich sweeps on seeded random instances."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    sandwich_trials = sandwich_trials if sandwich_trials is not None else min(trials, 50)
    summary = {
        "seed": seed,
        "lemma": lemma_sweep(trials, seed, show_progress),
        "theorem": theorem_sweep(trials, seed + 1, show_progress),
        "sandwich": sandwich_sweep(sandwich_trials, seed + 2, threads=threads, show_progress=show_progress),
    }
    summary["passed"] = all(summary[k]["passed"] for k in ("lemma", "theorem", "sandwich"))
    logger.info("Bound sweeps (%d trials, seed %d): %s", trials, seed,
                "passed" if summary["passed"] else "FAILED")
    return summary
