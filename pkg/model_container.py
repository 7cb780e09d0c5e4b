"""
MCAM tensor container.

Layout: magic b"MCAM", format version (u32), header length (u64), a JSON header
holding the model config, free-form metadata and the tensor index
({name, shape, offset}), then raw little-endian float32 tensor data, row-major.
Offsets are relative to the start of the data section.
"""

import json
import logging
import os
import struct
from typing import Dict, Any, Optional, List, Tuple

import numpy as np

from data_models import ModelConfig, ExpertWeights, MoELayer, MoEModel

logger = logging.getLogger(__name__)

MAGIC = b"MCAM"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPE = np.dtype("<f4")


class ContainerFormatError(ValueError):
    """Raised for unreadable or inconsistent MCAM files."""


def tensor_name(layer: int, expert: Optional[int] = None, part: str = "") -> str:
    if expert is None:
        return f"layer{layer}.router"
    return f"layer{layer}.expert{expert}.{part}"


class ContainerWriter:
    """Collects tensors and writes them in one pass on close()."""

    def __init__(self, path: str, config: Optional[ModelConfig] = None,
                 meta: Optional[Dict[str, Any]] = None):
        self.path = path
        self.config = config
        self.meta = dict(meta or {})
        self._tensors: List[Tuple[str, np.ndarray]] = []
        self._names = set()
        self._closed = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.close()

    def add_tensor(self, name: str, tensor: np.ndarray) -> None:
        if name in self._names:
            raise ValueError(f"duplicate tensor name '{name}'")
        arr = np.ascontiguousarray(tensor, dtype=_DTYPE)
        self._tensors.append((name, arr))
        self._names.add(name)

    def close(self) -> None:
        if self._closed:
            return
        index = []
        offset = 0
        for name, arr in self._tensors:
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
        header = {
            "config": self.config.to_dict() if self.config else None,
            "meta": self.meta,
            "tensors": index,
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

        parent = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(parent, exist_ok=True)
        with open(self.path, "wb") as f:
            f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for _, arr in self._tensors:
                f.write(arr.tobytes(order="C"))
        self._closed = True
        logger.debug("Wrote %d tensors to %s", len(self._tensors), self.path)


class ContainerReader:
    """Reads an MCAM file fully into memory and serves tensors by name."""

    def __init__(self, path: str):
        self.path = path
        self.config: Optional[ModelConfig] = None
        self.meta: Dict[str, Any] = {}
        self._index: Dict[str, Dict[str, Any]] = {}
        self._data: bytes = b""
        self._load()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self._data = b""

    def _load(self) -> None:
        if not os.path.exists(self.path):
            raise FileNotFoundError(f"container not found: {self.path}")
        with open(self.path, "rb") as f:
            raw = f.read()
        if len(raw) < _PREAMBLE.size:
            raise ContainerFormatError(f"{self.path}: file too short for an MCAM preamble")
        magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ContainerFormatError(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ContainerFormatError(f"{self.path}: unsupported format version {version}")
        start = _PREAMBLE.size
        if start + header_len > len(raw):
            raise ContainerFormatError(f"{self.path}: truncated header")
        try:
            header = json.loads(raw[start:start + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerFormatError(f"{self.path}: unreadable header: {e}") from e

        self._data = raw[start + header_len:]
        if header.get("config"):
            self.config = ModelConfig.from_dict(header["config"])
        self.meta = header.get("meta") or {}
        for entry in header.get("tensors", []):
            shape = tuple(int(s) for s in entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
            if entry["offset"] < 0 or entry["offset"] + nbytes > len(self._data):
                raise ContainerFormatError(f"{self.path}: tensor '{entry['name']}' overruns the data section")
            self._index[entry["name"]] = {"shape": shape, "offset": int(entry["offset"])}

    @property
    def names(self) -> List[str]:
        return list(self._index)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def shape(self, name: str) -> Tuple[int, ...]:
        if name not in self._index:
            raise KeyError(f"tensor not found: {name}")
        return self._index[name]["shape"]

    def read(self, name: str) -> np.ndarray:
        if name not in self._index:
            raise KeyError(f"tensor not found: {name}")
        entry = self._index[name]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count == 0:
            return np.zeros(entry["shape"], dtype=np.float32)
        arr = np.frombuffer(self._data, dtype=_DTYPE, count=count, offset=entry["offset"])
        return arr.reshape(entry["shape"]).astype(np.float32)


def write_container(path: str, tensors: Dict[str, np.ndarray],
                    config: Optional[ModelConfig] = None,
                    meta: Optional[Dict[str, Any]] = None) -> None:
    with ContainerWriter(path, config=config, meta=meta) as writer:
        for name, tensor in tensors.items():
            writer.add_tensor(name, tensor)


def read_container(path: str) -> Tuple[Dict[str, np.ndarray], Optional[ModelConfig], Dict[str, Any]]:
    """Every tensor of an MCAM file, in index order, with its config and metadata."""
    with ContainerReader(path) as reader:
        tensors = {name: reader.read(name) for name in reader.names}
        return tensors, reader.config, reader.meta


def save_model(model: MoEModel, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
    meta = dict(meta or {})
    meta["widths"] = [list(layer.widths) for layer in model.layers]
    with ContainerWriter(path, config=model.config, meta=meta) as writer:
        for i, layer in enumerate(model.layers):
            writer.add_tensor(tensor_name(i), layer.router)
            for j, e in enumerate(layer.experts):
                writer.add_tensor(tensor_name(i, j, "up"), e.w_up)
                writer.add_tensor(tensor_name(i, j, "gate"), e.w_gate)
                writer.add_tensor(tensor_name(i, j, "down"), e.w_down)
    logger.info("Saved model (%d layers) to %s", model.config.n_layers, path)


def load_model(path: str) -> MoEModel:
    with ContainerReader(path) as reader:
        config = reader.config
        if config is None:
            raise ContainerFormatError(f"{path}: no model config in header")
        layers = []
        try:
            for i in range(config.n_layers):
                experts = [
                    ExpertWeights(
                        w_up=reader.read(tensor_name(i, j, "up")),
                        w_gate=reader.read(tensor_name(i, j, "gate")),
                        w_down=reader.read(tensor_name(i, j, "down")),
                    )
                    for j in range(config.n_total_experts)
                ]
                layers.append(MoELayer(experts=tuple(experts), router=reader.read(tensor_name(i)),
                                       config=config))
        except KeyError as e:
            raise ContainerFormatError(f"{path}: {e.args[0]}") from e
        widths = reader.meta.get("widths")
        if widths is not None and widths != [list(layer.widths) for layer in layers]:
            raise ContainerFormatError(f"{path}: recorded widths disagree with tensor shapes")
    return MoEModel(config=config, layers=tuple(layers))
