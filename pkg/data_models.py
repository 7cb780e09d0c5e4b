from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any, Tuple

import numpy as np

from utils import exact, round_half_up


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_experts: int
    n_shared: int
    d_model: int
    d_ff: int
    top_k: int

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_experts < 1:
            raise ValueError(f"n_experts must be >= 1, got {self.n_experts}")
        if self.n_shared < 0:
            raise ValueError(f"n_shared must be >= 0, got {self.n_shared}")
        if self.d_model < 1 or self.d_ff < 1:
            raise ValueError(f"d_model and d_ff must be >= 1, got {self.d_model}, {self.d_ff}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must lie in [1, n_experts={self.n_experts}], got {self.top_k}")

    @property
    def n_total_experts(self) -> int:
        return self.n_shared + self.n_experts

    @property
    def n_micro(self) -> int:
        """Micro-expert count of an unpruned layer, shared experts included."""
        return self.n_total_experts * self.d_ff

    def to_dict(self) -> Dict[str, int]:
        return {
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "n_shared": self.n_shared,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "top_k": self.top_k,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(**{k: int(data[k]) for k in ("n_layers", "n_experts", "n_shared",
                                                 "d_model", "d_ff", "top_k")})


@dataclass(frozen=True)
class ExpertWeights:
    """One SwiGLU expert. Rows of up/gate and columns of down are its micro-experts."""
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        up = _frozen_array(self.w_up, np.float32)
        gate = _frozen_array(self.w_gate, np.float32)
        down = _frozen_array(self.w_down, np.float32)
        if up.ndim != 2 or gate.ndim != 2 or down.ndim != 2:
            raise ValueError("expert matrices must be 2-D")
        if up.shape != gate.shape:
            raise ValueError(f"w_up {up.shape} and w_gate {gate.shape} disagree")
        if down.shape != (up.shape[1], up.shape[0]):
            raise ValueError(f"w_down {down.shape} does not match width {up.shape[0]} "
                             f"and d_model {up.shape[1]}")
        object.__setattr__(self, "w_up", up)
        object.__setattr__(self, "w_gate", gate)
        object.__setattr__(self, "w_down", down)

    @property
    def width(self) -> int:
        return self.w_up.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_up.shape[1]


@dataclass(frozen=True)
class QuantizedMatrix:
    """Group-wise affine codes for a slice of one expert matrix.

    codes has the slice shape; groups run along the last axis and are truncated
    at the slice end, so scale/zero_point have shape (rows, groups_per_row).
    rows/cols hold the parent-matrix indices of the slice.
    """
    codes: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    group_size: int
    rows: np.ndarray
    cols: np.ndarray
    matrix: str = ""
    expert: int = -1

    @property
    def n_groups(self) -> int:
        return int(self.scale.size)

    @property
    def n_weights(self) -> int:
        return int(self.codes.size)


@dataclass(frozen=True)
class MoELayer:
    experts: Tuple[ExpertWeights, ...]
    router: np.ndarray
    config: ModelConfig
    quant_records: Tuple[QuantizedMatrix, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "quant_records", tuple(self.quant_records))
        router = _frozen_array(self.router, np.float32)
        if router.shape != (self.config.n_experts, self.config.d_model):
            raise ValueError(f"router shape {router.shape} != "
                             f"({self.config.n_experts}, {self.config.d_model})")
        if len(self.experts) != self.config.n_total_experts:
            raise ValueError(f"expected {self.config.n_total_experts} experts, got {len(self.experts)}")
        for j, e in enumerate(self.experts):
            if e.d_model != self.config.d_model:
                raise ValueError(f"expert {j} has d_model {e.d_model}, expected {self.config.d_model}")
        object.__setattr__(self, "router", router)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(e.width for e in self.experts)

    @property
    def offsets(self) -> np.ndarray:
        """Flat index of each expert's first micro-expert, plus the total at the end."""
        return np.concatenate([[0], np.cumsum(self.widths, dtype=np.int64)])

    @property
    def n_micro(self) -> int:
        return int(sum(self.widths))

    def is_shared(self, expert: int) -> bool:
        return expert < self.config.n_shared


@dataclass(frozen=True)
class MoEModel:
    config: ModelConfig
    layers: Tuple[MoELayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.config.n_layers:
            raise ValueError(f"expected {self.config.n_layers} layers, got {len(self.layers)}")

    def replace_layer(self, index: int, layer: MoELayer) -> "MoEModel":
        layers = list(self.layers)
        layers[index] = layer
        return MoEModel(self.config, tuple(layers))


@dataclass(frozen=True)
class MicroExpertId:
    expert: int
    neuron: int
    flat: int


@dataclass(frozen=True)
class MicroExpertView:
    w_up_row: np.ndarray
    w_gate_row: np.ndarray
    w_down_col: np.ndarray


@dataclass(frozen=True)
class RouterWeights:
    """Per-token expert coefficients: shared experts first (fixed 1.0), then routed."""
    coefficients: np.ndarray
    n_shared: int

    @property
    def routed(self) -> np.ndarray:
        return self.coefficients[self.n_shared:]

    @property
    def active_experts(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.coefficients)]


@dataclass(frozen=True)
class CalibBatch:
    X: np.ndarray

    def __post_init__(self):
        X = _frozen_array(self.X, np.float32)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"calibration batch must be a non-empty 2-D matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite calibration value")
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_model(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class LayerSamples:
    X: np.ndarray
    Y: np.ndarray
    layer: int = 0


@dataclass(frozen=True)
class ActivationCoefficients:
    phi: np.ndarray  # [n x N_e], float64
    widths: Tuple[int, ...] = ()


@dataclass(frozen=True)
class EnergyScores:
    energy: np.ndarray  # [N_e], float64
    alpha: float


@dataclass(frozen=True)
class Ranking:
    """Flat indices in descending-energy order; widths describe the ranked layer."""
    order: np.ndarray
    widths: Tuple[int, ...] = ()

    def positions(self) -> np.ndarray:
        """Inverse permutation: positions()[flat] is that micro-expert's rank."""
        pos = np.empty_like(self.order)
        pos[self.order] = np.arange(self.order.size)
        return pos


@dataclass(frozen=True)
class RetainSet:
    kept: np.ndarray
    removed: np.ndarray
    per_expert: Tuple[Tuple[int, ...], ...]


@dataclass(frozen=True)
class PruneConfig:
    lam: float
    alpha: float = 1.0
    protect_shared: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def retain_count(self, n_micro: int) -> int:
        """round-half-up((1 - lambda) * N_e), at least 1."""
        return max(1, round_half_up((1 - exact(self.lam)) * n_micro))


@dataclass(frozen=True)
class QuantPlan:
    ratios: Tuple[float, float, float]
    bits: Tuple[int, int, int]
    group_size: Optional[int]
    level_sets: Tuple[np.ndarray, np.ndarray, np.ndarray]
    widths: Tuple[int, ...] = ()
    input_order: Optional[np.ndarray] = None

    @property
    def n_micro(self) -> int:
        return int(sum(s.size for s in self.level_sets))


@dataclass
class OracleReport:
    epsilon: float
    epsilon_sup: float
    svd_error: float
    delta: float
    k: int
    boundary_energy: float = 0.0
    tightness: Optional[float] = None
    singular_values: List[float] = field(default_factory=list)


@dataclass
class ApproxErrorRecord:
    layer: int
    l2: float
    cosine: float


@dataclass
class RunManifest:
    subcommand: str
    parameters: Dict[str, Any]
    tool_version: str
    input_digests: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
