"""Calibration phase: cache every layer's FP output, output gradient and operands.

Cache file layout (``PTQC``)::

    header (magic, version, JSON manifest)
    index:    count:u32, then per section  id_len:u16 | id | offset:u64 | length:u64
    sections: concatenated tensor records, offsets relative to the first section

Each layer section holds ``outputs``, ``grads``, ``a`` and ``b``; the
``__inputs__`` section holds the calibration samples and the FP model's
probabilities. Layers are read back one at a time with a seek, so a search
only needs one layer's data in memory.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats, vit
from .tensor import softmax_rows
from .errors import DimensionError, FormatError, StaleCacheError, UnknownSiteError

CACHE_MAGIC = b"PTQC"
INPUTS_SECTION = "__inputs__"
_INDEX_ENTRY = struct.Struct("<QQ")


@dataclass
class LayerRecord:
    layer_id: str
    outputs: np.ndarray
    grads: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.outputs.shape != self.grads.shape:
            raise DimensionError(
                f"{self.layer_id}: outputs {self.outputs.shape} vs grads {self.grads.shape}"
            )

    @property
    def num_samples(self) -> int:
        return self.outputs.shape[0]


def _section(tensors: dict[str, np.ndarray]) -> bytes:
    return b"".join(formats.tensor_bytes(k, v) for k, v in tensors.items())


class CalibrationCache:
    """Read-only handle on a PTQC file."""

    def __init__(self, path, manifest: dict, index: dict[str, tuple[int, int]], data_start: int):
        self.path = Path(path)
        self.manifest = manifest
        self._index = index
        self._data_start = data_start

    @property
    def layer_ids(self) -> list[str]:
        return [k for k in self._index if k != INPUTS_SECTION]

    @property
    def model_hash(self) -> str:
        return self.manifest["model_hash"]

    @property
    def num_samples(self) -> int:
        return self.manifest["num_samples"]

    def _read_section(self, name: str) -> dict[str, np.ndarray]:
        try:
            offset, length = self._index[name]
        except KeyError:
            raise UnknownSiteError(f"layer {name!r} is not in cache {self.path}") from None
        with open(self.path, "rb") as f:
            f.seek(self._data_start + offset)
            blob = f.read(length)
        if len(blob) != length:
            raise FormatError(f"cache section {name!r} is truncated")
        buf = io.BytesIO(blob)
        out = {}
        while buf.tell() < length:
            key, arr = formats.read_tensor(buf)
            out[key] = arr
        return out

    def load_layer(self, layer_id: str) -> LayerRecord:
        if layer_id == INPUTS_SECTION:
            raise UnknownSiteError(f"{layer_id!r} is not a layer")
        t = self._read_section(layer_id)
        return LayerRecord(layer_id, t["outputs"], t["grads"], t["a"], t["b"])

    def inputs(self) -> dict[str, np.ndarray]:
        """Calibration samples ``x`` and the FP model's probabilities ``y_fp``."""
        return self._read_section(INPUTS_SECTION)

    def check_model(self, model: vit.Model) -> None:
        digest = formats.model_hash(model)
        if digest != self.model_hash:
            raise StaleCacheError(
                f"cache {self.path} was built for model {self.model_hash[:12]}, "
                f"not {digest[:12]}"
            )


def fisher_grads(model: vit.Model, tr: vit.Trace) -> dict[str, np.ndarray]:
    """Per-element ``sqrt(sum_c p_c * (dL_c/dO)^2)`` for every layer output.

    ``L_c`` is the cross-entropy against class ``c`` and ``p`` the FP
    model's own softmax. Squared, this is the diagonal of the expected
    Fisher under the FP prediction, which equals the diagonal of the exact
    Hessian of the soft-target loss ``CE(softmax(logits), y_fp)`` at the FP
    point. The soft-target gradient itself is zero there, so it is this
    curvature, not the gradient, that the Hessian-guided metric needs.
    """
    p = softmax_rows(tr.logits)
    acc: dict[str, np.ndarray] = {}
    for c in range(p.shape[-1]):
        onehot = np.zeros_like(p)
        onehot[:, c] = 1.0
        grads, _ = vit.backward(model, tr, onehot)
        for lid, g in grads.items():
            w = p[:, c].reshape((-1,) + (1,) * (g.ndim - 1))
            term = w * g * g
            acc[lid] = term if c == 0 else acc[lid] + term
    return {lid: np.sqrt(a) for lid, a in acc.items()}


def collect(model: vit.Model, samples) -> tuple[dict[str, LayerRecord], dict[str, np.ndarray]]:
    """One FP forward plus one backward per class; returns records and input tensors."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1:
        raise DimensionError(f"calibration samples must be [S>=1, N, Dp], got {x.shape}")
    tr = vit.run(model, x)
    grads = fisher_grads(model, tr)
    records = {}
    for layer in model.layers:
        a, b = tr.operands[layer.id]
        records[layer.id] = LayerRecord(
            layer.id,
            np.ascontiguousarray(tr.taps[layer.id]),
            np.ascontiguousarray(grads[layer.id]),
            np.ascontiguousarray(a),
            np.ascontiguousarray(b),
        )
    inputs = {"x": x, "y_fp": softmax_rows(tr.logits)}
    return records, inputs


def write_cache(path, manifest: dict, records: dict[str, LayerRecord], inputs: dict) -> None:
    sections = {INPUTS_SECTION: _section(inputs)}
    for lid, r in records.items():
        sections[lid] = _section({"outputs": r.outputs, "grads": r.grads, "a": r.a, "b": r.b})
    index = io.BytesIO()
    index.write(struct.pack("<I", len(sections)))
    offset = 0
    for name, blob in sections.items():
        enc = name.encode()
        index.write(struct.pack("<H", len(enc)) + enc + _INDEX_ENTRY.pack(offset, len(blob)))
        offset += len(blob)
    try:
        with open(path, "wb") as f:
            formats.write_header(f, CACHE_MAGIC, manifest)
            f.write(index.getvalue())
            for blob in sections.values():
                f.write(blob)
    except OSError as exc:
        raise FormatError(f"cannot write cache {path}: {exc}") from None


def open_cache(path, model: vit.Model | None = None) -> CalibrationCache:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open cache {path}: {exc}") from None
    with f:
        manifest = formats.read_header(f, CACHE_MAGIC)
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated cache index")
        (count,) = struct.unpack("<I", raw)
        index = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", f.read(2))
            name = f.read(n).decode()
            index[name] = _INDEX_ENTRY.unpack(f.read(_INDEX_ENTRY.size))
        data_start = f.tell()
    cache = CalibrationCache(path, manifest, index, data_start)
    if model is not None:
        cache.check_model(model)
    return cache


def run_calibration(model: vit.Model, samples, cache_path, run_manifest: dict | None = None) -> CalibrationCache:
    """Cache FP outputs, gradients and operands of every layer for ``samples``."""
    records, inputs = collect(model, samples)
    manifest = {
        "model_hash": formats.model_hash(model),
        "num_samples": int(inputs["x"].shape[0]),
        "layers": list(records),
        "grads": "root of the expected squared output gradient under the FP prediction",
        "run": run_manifest or {},
    }
    write_cache(cache_path, manifest, records, inputs)
    return open_cache(cache_path)
