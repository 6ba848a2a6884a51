"""Versioned binary files: checkpoints (TVIT), datasets (TDAT) and parameter maps (PTQP).

All files share one framing::

    magic[4] | version:u16 | manifest_len:u32 | manifest (UTF-8 JSON) | body

Tensor records inside a body are::

    name_len:u16 | name | dtype:u8 | ndim:u8 | dims:u32[ndim] | data (little-endian)

Every integer is little-endian. Manifests are JSON with sorted keys so that
equal content always serializes to equal bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError
from .quant import TwinMode, TwinQuantParams, UniformQuantParams
from .vit import Model, ModelConfig, param_shapes

VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------


def write_header(f: BinaryIO, magic: bytes, manifest: dict) -> None:
    blob = dumps_json(manifest).encode()
    f.write(_PREFIX.pack(magic, VERSION, len(blob)))
    f.write(blob)


def read_header(f: BinaryIO, magic: bytes) -> dict:
    raw = f.read(_PREFIX.size)
    if len(raw) != _PREFIX.size:
        raise FormatError("truncated header")
    got, version, n = _PREFIX.unpack(raw)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError("truncated manifest")
    try:
        return json.loads(blob)
    except ValueError as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None


def tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
    enc = name.encode()
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated tensor record")
    return data


def read_tensor(f: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode()
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def write_bundle(path, magic: bytes, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_header(f, magic, manifest)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            f.write(tensor_bytes(name, arr))


def read_bundle(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from None
    with f:
        manifest = read_header(f, magic)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = dict(read_tensor(f) for _ in range(count))
        if f.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return manifest, tensors


# ---------------------------------------------------------------------------
# checkpoints and datasets
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TVIT"
DATASET_MAGIC = b"TDAT"


def model_hash(model) -> str:
    """Content hash of a model's config and parameters (independent of run metadata)."""
    h = hashlib.sha256(dumps_json(asdict(model.cfg)).encode())
    for name in sorted(model.params):
        h.update(tensor_bytes(name, model.params[name]))
    return h.hexdigest()


def save_checkpoint(path, model, run_manifest: dict | None = None) -> str:
    digest = model_hash(model)
    manifest = {"config": asdict(model.cfg), "model_hash": digest, "run": run_manifest or {}}
    write_bundle(path, CHECKPOINT_MAGIC, manifest, dict(sorted(model.params.items())))
    return digest


def load_checkpoint(path):
    manifest, tensors = read_bundle(path, CHECKPOINT_MAGIC)
    try:
        cfg = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad model config in {path}: {exc}") from None
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        raise FormatError(f"checkpoint {path} parameters do not match its config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
    model = Model(cfg, {k: tensors[k].astype(np.float64) for k in expected})
    if manifest.get("model_hash") not in (None, model_hash(model)):
        raise FormatError(f"checkpoint {path} content does not match its recorded hash")
    return model


def save_dataset(path, x: np.ndarray, y: np.ndarray | None = None, run_manifest: dict | None = None) -> None:
    tensors = {"x": np.asarray(x, dtype=np.float64)}
    if y is not None:
        tensors["y"] = np.asarray(y, dtype=np.int64)
    write_bundle(path, DATASET_MAGIC, {"run": run_manifest or {}}, tensors)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray | None]:
    _, tensors = read_bundle(path, DATASET_MAGIC)
    if "x" not in tensors:
        raise FormatError(f"dataset {path} has no 'x' tensor")
    return tensors["x"], tensors.get("y")


# ---------------------------------------------------------------------------
# parameter maps
# ---------------------------------------------------------------------------

PARAMS_MAGIC = b"PTQP"
_ENTRY = struct.Struct("<BBBBd")
_KIND_UNIFORM = 1
_KIND_TWIN = 2
_MODES = {TwinMode.POST_SOFTMAX: 0, TwinMode.POST_GELU: 1}


def params_to_bytes(params: dict, run_manifest: dict | None = None) -> bytes:
    buf = io.BytesIO()
    write_header(buf, PARAMS_MAGIC, {"run": run_manifest or {}})
    buf.write(struct.pack("<I", len(params)))
    for sid in params:
        p = params[sid]
        enc = sid.encode()
        buf.write(struct.pack("<H", len(enc)) + enc)
        if isinstance(p, TwinQuantParams):
            buf.write(_ENTRY.pack(_KIND_TWIN, p.k, p.m, _MODES[p.mode], p.delta_r1))
        elif isinstance(p, UniformQuantParams):
            buf.write(_ENTRY.pack(_KIND_UNIFORM, p.k, 0, 0, p.delta))
        else:
            raise TypeError(f"cannot serialize {type(p).__name__} for {sid}")
    return buf.getvalue()


def save_params(path, params: dict, run_manifest: dict | None = None) -> None:
    Path(path).write_bytes(params_to_bytes(params, run_manifest))


def load_params(path) -> tuple[dict, dict]:
    """Returns ``(params, manifest)``."""
    modes = {v: k for k, v in _MODES.items()}
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from None
    with f:
        manifest = read_header(f, PARAMS_MAGIC)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            sid = _read_exact(f, n).decode()
            kind, k, m, mode, delta = _ENTRY.unpack(_read_exact(f, _ENTRY.size))
            try:
                if kind == _KIND_UNIFORM:
                    params[sid] = UniformQuantParams(k, delta)
                elif kind == _KIND_TWIN:
                    params[sid] = TwinQuantParams(k, m, modes[mode], delta)
                else:
                    raise FormatError(f"unknown parameter kind {kind} for {sid}")
            except (KeyError, ValueError) as exc:
                raise FormatError(f"invalid parameters for {sid}: {exc}") from None
        if f.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return params, manifest
