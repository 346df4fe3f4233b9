"""On-disk format for models, plans and datasets.

A model is a directory::

    manifest.json          human-readable, sorted keys, fixed schema
    blobs/<name>.blob      one array per file

Blob layout (all integers little-endian):

    offset  size      field
    0       8         magic  b"FBASIS\\x00\\x01"
    8       1         dtype  (1 = float32)
    9       4         rank   (uint32)
    13      4*rank    dims   (uint32 each)
    ..      8         payload length in bytes (uint64)
    ..      4*prod    payload, float32, row-major

Computation is float64; arrays are rounded to float32 when written.

Manifest schema (version 1.x)::

    {
      "format": "filterbasis-model",
      "version": "1.0",
      "input_shape": [c, h, w],
      "layers": [{"name", "kind", "params": {role: blob}, "attrs": {...}}, ...],
      "blobs": {name: {"file": "blobs/<name>.blob", "shape": [...]}},
      "meta": {"sharing": ..., "loss": ..., "optimizer": ..., "residuals": ..., ...}
    }

A dataset file is two blob records back to back: inputs, then targets.
"""
from __future__ import annotations

import io
import json
import os
import re
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .graph import Layer, ModelGraph
from .sharing import ShareGroup, SharingPlan
from .tensor_core import ShapeError

__all__ = [
    "FORMAT_NAME",
    "FORMAT_VERSION",
    "MAGIC",
    "ModelIOError",
    "VersionError",
    "BlobFormatError",
    "BlobLengthError",
    "DanglingBlobError",
    "ShapeChainError",
    "DatasetError",
    "EmptyDatasetError",
    "Dataset",
    "encode_blob",
    "decode_blob",
    "write_blob",
    "read_blob",
    "save_model",
    "load_model",
    "manifest_dict",
    "save_dataset",
    "load_dataset",
    "sharing_to_dict",
    "sharing_from_dict",
]

FORMAT_NAME = "filterbasis-model"
FORMAT_VERSION = "1.0"
MAGIC = b"FBASIS\x00\x01"
DTYPE_F32 = 1
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
PathLike = Union[str, os.PathLike]


class ModelIOError(Exception):
    pass


class VersionError(ModelIOError):
    pass


class BlobFormatError(ModelIOError):
    pass


class BlobLengthError(BlobFormatError):
    def __init__(self, name: str, message: str):
        super().__init__(f"blob {name!r}: {message}")
        self.blob = name


class DanglingBlobError(ModelIOError):
    def __init__(self, name: str, message: str = "referenced but not present"):
        super().__init__(f"blob {name!r}: {message}")
        self.blob = name


class ShapeChainError(ModelIOError, ShapeError):
    pass


class DatasetError(ModelIOError):
    pass


class EmptyDatasetError(DatasetError):
    pass


# ---------------------------------------------------------------------- blobs

def encode_blob(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<BI", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + struct.pack("<Q", len(payload)) + payload


def _read_record(stream: io.BufferedIOBase, name: str) -> Optional[np.ndarray]:
    magic = stream.read(len(MAGIC))
    if not magic:
        return None
    if magic != MAGIC:
        raise BlobFormatError(f"blob {name!r}: bad magic {magic!r}")
    head = stream.read(5)
    if len(head) != 5:
        raise BlobLengthError(name, "truncated header")
    dtype, rank = struct.unpack("<BI", head)
    if dtype != DTYPE_F32:
        raise BlobFormatError(f"blob {name!r}: unsupported dtype code {dtype}")
    raw_dims = stream.read(4 * rank)
    if len(raw_dims) != 4 * rank:
        raise BlobLengthError(name, "truncated dims")
    dims = struct.unpack(f"<{rank}I", raw_dims) if rank else ()
    raw_len = stream.read(8)
    if len(raw_len) != 8:
        raise BlobLengthError(name, "truncated length field")
    (declared,) = struct.unpack("<Q", raw_len)
    implied = 4 * int(np.prod(dims, dtype=np.int64))
    if declared != implied:
        raise BlobLengthError(name, f"declared {declared} bytes but dims {dims} imply {implied}")
    payload = stream.read(declared)
    if len(payload) != declared:
        raise BlobLengthError(name, f"expected {declared} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def decode_blob(data: bytes, name: str = "<bytes>") -> np.ndarray:
    stream = io.BytesIO(data)
    arr = _read_record(stream, name)
    if arr is None:
        raise BlobLengthError(name, "empty blob")
    if stream.read(1):
        raise BlobLengthError(name, "trailing bytes after payload")
    return arr


def write_blob(path: PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_blob(arr))


def read_blob(path: PathLike, name: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    name = name or path.stem
    if not path.exists():
        raise DanglingBlobError(name, f"file {path.name} missing")
    return decode_blob(path.read_bytes(), name)


# ---------------------------------------------------------------------- plans

def sharing_to_dict(plan: SharingPlan) -> dict:
    return {"strategy": plan.strategy, "groups": [asdict(g) for g in plan.groups]}


def sharing_from_dict(d: dict) -> SharingPlan:
    return SharingPlan(d["strategy"], [ShareGroup(**g) for g in d["groups"]])


# ---------------------------------------------------------------------- models

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def manifest_dict(graph: ModelGraph) -> dict:
    names = graph.referenced_params()
    for name in names:
        if not _NAME_RE.match(name):
            raise ModelIOError(f"parameter name {name!r} is not file-system safe")
    return _jsonable({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "layers": [{"name": l.name, "kind": l.kind, "params": l.params, "attrs": l.attrs}
                   for l in graph.layers],
        "blobs": {n: {"file": f"blobs/{n}.blob", "shape": list(graph.params[n].shape)}
                  for n in sorted(names)},
        "meta": graph.meta,
    })


def save_model(graph: ModelGraph, directory: PathLike) -> list[Path]:
    """Write manifest and blobs; identical graphs give identical bytes."""
    directory = Path(directory)
    blob_dir = directory / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest_dict(graph)
    for stale in blob_dir.glob("*.blob"):
        if stale.stem not in manifest["blobs"]:
            stale.unlink()
    paths = []
    for name, entry in manifest["blobs"].items():
        path = directory / entry["file"]
        write_blob(path, graph.params[name])
        paths.append(path)
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [mpath] + paths


def load_model(path: PathLike) -> ModelGraph:
    """Load a model directory (or its manifest.json path)."""
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    directory = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise ModelIOError(f"no manifest at {mpath}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise VersionError(f"{mpath}: not a {FORMAT_NAME} manifest")
    version = str(manifest.get("version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise VersionError(f"{mpath}: unsupported format version {version!r} (reader {FORMAT_VERSION})")
    blobs = manifest.get("blobs", {})
    layers = [Layer(l["name"], l["kind"], dict(l.get("params", {})), dict(l.get("attrs", {})))
              for l in manifest["layers"]]
    params = {}
    for layer in layers:
        for key in layer.params.values():
            if key in params:
                continue
            entry = blobs.get(key)
            if entry is None:
                raise DanglingBlobError(key, f"referenced by layer {layer.name!r} but not listed")
            arr = read_blob(directory / entry["file"], key)
            if list(arr.shape) != list(entry["shape"]):
                raise BlobLengthError(key, f"header shape {arr.shape} != manifest shape {entry['shape']}")
            params[key] = arr
    graph = ModelGraph(tuple(manifest["input_shape"]), layers, params, manifest.get("meta", {}))
    try:
        graph.infer_shapes()
    except ShapeError as exc:
        raise ShapeChainError(f"{mpath}: {exc}") from exc
    return graph


# ---------------------------------------------------------------------- datasets

class Dataset:
    def __init__(self, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 16,
                 shuffle: bool = True):
        if len(inputs) == 0:
            raise EmptyDatasetError("dataset has no samples")
        if len(inputs) != len(targets):
            raise DatasetError(f"{len(inputs)} inputs but {len(targets)} targets")
        if batch_size < 1:
            raise DatasetError(f"batch size must be >= 1, got {batch_size}")
        self.inputs = inputs
        self.targets = targets
        self.batch_size = batch_size
        self.shuffle = shuffle

    def __len__(self) -> int:
        return len(self.inputs)

    def batches(self, seed: int = 0, batch_size: Optional[int] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        bs = batch_size or self.batch_size
        order = np.arange(len(self))
        if self.shuffle:
            order = np.random.default_rng(seed).permutation(len(self))
        return [(self.inputs[order[i : i + bs]], self.targets[order[i : i + bs]])
                for i in range(0, len(self), bs)]


def save_dataset(path: PathLike, inputs: np.ndarray, targets: np.ndarray) -> Path:
    if len(inputs) != len(targets):
        raise DatasetError(f"{len(inputs)} inputs but {len(targets)} targets")
    path = Path(path)
    path.write_bytes(encode_blob(np.asarray(inputs)) + encode_blob(np.asarray(targets)))
    return path


def load_dataset(path: PathLike, batch_size: int = 16, shuffle: bool = True) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if not data:
        raise EmptyDatasetError(f"{path}: empty dataset file")
    stream = io.BytesIO(data)
    inputs = _read_record(stream, f"{path.name}:inputs")
    targets = _read_record(stream, f"{path.name}:targets")
    if targets is None:
        raise DatasetError(f"{path}: inputs without paired targets")
    if stream.read(1):
        raise DatasetError(f"{path}: trailing bytes after targets")
    return Dataset(inputs, targets, batch_size, shuffle)
