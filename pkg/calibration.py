"""
Calibration batches and per-layer (X, Y) capture.

Capture stands in for forward hooks on the MoE modules: the model is run layer
by layer and each layer's output is fed to the next one unchanged.
"""

import logging
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from data_models import CalibBatch, LayerSamples, MoELayer, MoEModel
from model_container import ContainerReader, ContainerFormatError, write_container
from moe_model import moe_forward_batch

logger = logging.getLogger(__name__)

CALIB_TENSOR = "X"


def gen_synthetic(n: int, d_model: int, seed: int, scale: float = 1.0) -> CalibBatch:
    """Deterministic N(0, scale^2) batch."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if d_model < 1:
        raise ValueError(f"d_model must be >= 1, got {d_model}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d_model)) * scale
    return CalibBatch(X=X.astype(np.float32))


def save_calibration(path: str, batch: CalibBatch, meta: Optional[dict] = None) -> None:
    write_container(path, {CALIB_TENSOR: batch.X}, meta=meta)
    logger.info("Saved calibration batch (n=%d, d_model=%d) to %s", batch.n, batch.d_model, path)


def load_calibration(path: str, d_model: Optional[int] = None) -> CalibBatch:
    """
    Load a calibration batch from an MCAM container holding tensor "X".

    :param path: container path
    :param d_model: expected feature count; skipped when None
    :raises FileNotFoundError: missing file
    :raises ContainerFormatError: bad magic, missing tensor or wrong shape
    :raises ValueError: non-finite entries
    """
    with ContainerReader(path) as reader:
        if CALIB_TENSOR not in reader:
            raise ContainerFormatError(f"{path}: tensor not found: {CALIB_TENSOR}")
        X = reader.read(CALIB_TENSOR)
    if X.ndim != 2:
        raise ContainerFormatError(f"{path}: calibration tensor must be 2-D, got shape {X.shape}")
    if d_model is not None and X.shape[1] != d_model:
        raise ContainerFormatError(f"{path}: calibration width {X.shape[1]} != d_model {d_model}")
    return CalibBatch(X=X)


def _check_batch(model: MoEModel, batch: CalibBatch) -> None:
    if batch.d_model != model.config.d_model:
        raise ValueError(f"calibration batch has d_model={batch.d_model}, "
                         f"model expects {model.config.d_model}")


def capture_layer_samples(model: MoEModel, batch: CalibBatch, layer: int) -> LayerSamples:
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range for {model.config.n_layers} layers")
    _check_batch(model, batch)
    X = batch.X
    for i in range(layer):
        X = moe_forward_batch(model.layers[i], X)
    Y = moe_forward_batch(model.layers[layer], X)
    return LayerSamples(X=X, Y=Y, layer=layer)


def capture_all_layers(model: MoEModel, batch: CalibBatch) -> List[LayerSamples]:
    _check_batch(model, batch)
    samples = []
    X = batch.X
    for i, layer in enumerate(model.layers):
        Y = moe_forward_batch(layer, X)
        samples.append(LayerSamples(X=X, Y=Y, layer=i))
        X = Y
    return samples


def sequential_replace(model: MoEModel, batch: CalibBatch,
                       choose: Callable[[int, MoELayer, LayerSamples], MoELayer],
                       desc: str = "layers", show_progress: bool = False) -> MoEModel:
    """
    Rebuild a model layer by layer on its own modified prefix.

    For each layer the (X, Y) samples are captured with every earlier layer
    already replaced; choose(index, layer, samples) returns the replacement, and
    the replacement's output on X becomes the next layer's input.
    """
    _check_batch(model, batch)
    layers = []
    X = batch.X
    for i in tqdm(range(model.config.n_layers), desc=desc, disable=not show_progress):
        layer = model.layers[i]
        Y = moe_forward_batch(layer, X)
        new_layer = choose(i, layer, LayerSamples(X=X, Y=Y, layer=i))
        layers.append(new_layer)
        X = moe_forward_batch(new_layer, X)
    return MoEModel(config=model.config, layers=tuple(layers))
