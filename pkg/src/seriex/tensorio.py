"""Tensor containers, the SQTF file format and model-manifest persistence.

SQTF layout::

    b"SQTF" | uint32 LE header length | JSON header (utf-8) | raw payload

The header carries ``dtype``, ``shape``, ``layout``, ``bits``, ``channel_axis``
and ``payload_bytes``. Float and int32 payloads are little-endian row-major.
Packed ints hold X-bit two's-complement fields, LSB-first within each byte:
element ``i`` lives at bit ``X*i mod 8`` of byte ``X*i // 8``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import kernels

MAGIC = b"SQTF"
PACKED_BITS = (2, 4, 8)
_DENSE = {"float64": "<f8", "float32": "<f4", "int32": "<i4"}
DTYPES = tuple(_DENSE) + tuple(f"int{b}" for b in PACKED_BITS)
LAYER_KINDS = ("linear", "conv2d", "relu", "flatten", "softmax")
MANIFEST_NAME = "manifest.json"


class TensorIOError(Exception):
    """Raised when a tensor file cannot be parsed or names an unsupported dtype."""


class ManifestError(Exception):
    """Dangling tensor reference or incomposable layer shapes."""


class UnsupportedLayerKind(ManifestError):
    pass


def int_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _check_bits(bits: int) -> None:
    if bits not in PACKED_BITS:
        raise ValueError(f"bits must be one of {PACKED_BITS}, got {bits}")


@dataclass(frozen=True, eq=False)
class PackedIntMatrix:
    """X-bit signed integers packed LSB-first. ``shape`` keeps the logical extents."""

    shape: tuple[int, ...]
    bits: int
    payload: bytes

    def __post_init__(self):
        _check_bits(self.bits)
        n = math.prod(self.shape)
        if len(self.payload) != -(-n * self.bits // 8):
            raise ValueError("payload length does not match shape and bits")

    @property
    def rows(self) -> int:
        return self.shape[0] if len(self.shape) > 1 else 1

    @property
    def cols(self) -> int:
        return math.prod(self.shape[1:]) if len(self.shape) > 1 else math.prod(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def unpack(self) -> np.ndarray:
        buf = np.frombuffer(self.payload, dtype=np.uint8)
        return kernels.unpack_bits(buf, self.bits, self.size).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, PackedIntMatrix):
            return NotImplemented
        return (self.shape, self.bits, self.payload) == (other.shape, other.bits, other.payload)


def pack_int(values, bits: int) -> PackedIntMatrix:
    """Pack an integer array into X-bit fields; raises ValueError when out of range."""
    _check_bits(bits)
    arr = np.asarray(values)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("pack_int needs integer values")
    lo, hi = int_range(bits)
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(f"value out of int{bits} range [{lo}, {hi}]")
    payload = kernels.pack_bits(arr.astype(np.int8), bits)
    return PackedIntMatrix(tuple(int(s) for s in arr.shape), bits, payload.tobytes())


@dataclass(frozen=True, eq=False)
class SparseCorrection:
    """Float corrections at flat positions of a dense tensor; zeros are omitted."""

    indices: np.ndarray
    values: np.ndarray
    dense_shape: tuple[int, ...]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "dense_shape", tuple(int(s) for s in self.dense_shape))
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d and equally long")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= math.prod(self.dense_shape):
                raise ValueError("index outside dense_shape")
            if np.any(val == 0):
                raise ValueError("zero values must be omitted")

    @classmethod
    def from_dense(cls, dense) -> "SparseCorrection":
        d = np.asarray(dense, dtype=np.float64)
        flat = d.ravel()
        idx = np.flatnonzero(flat)
        return cls(idx, flat[idx], d.shape)

    @classmethod
    def empty(cls, shape) -> "SparseCorrection":
        return cls(np.zeros(0, np.int64), np.zeros(0), tuple(shape))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(math.prod(self.dense_shape))
        out[self.indices] = self.values
        return out.reshape(self.dense_shape)

    def coords(self) -> tuple[np.ndarray, ...]:
        return np.unravel_index(self.indices, self.dense_shape)

    def scaled(self, factor) -> "SparseCorrection":
        """Multiply every value by a scalar or a per-row vector (axis 0)."""
        f = np.asarray(factor, dtype=np.float64)
        if f.ndim == 0:
            vals = self.values * f
        else:
            vals = self.values * f.ravel()[self.coords()[0]]
        keep = vals != 0
        return SparseCorrection(self.indices[keep], vals[keep], self.dense_shape)

    def reshaped(self, shape) -> "SparseCorrection":
        return SparseCorrection(self.indices, self.values, shape)

    def __eq__(self, other):
        if not isinstance(other, SparseCorrection):
            return NotImplemented
        return (self.dense_shape == other.dense_shape and np.array_equal(self.indices, other.indices)
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True, eq=False)
class Tensor:
    """An n-d array plus file metadata.

    ``dtype`` is one of :data:`DTYPES`; for ``int2``/``int4``/``int8`` the
    values are stored unpacked (int8) and packed on write.
    """

    data: np.ndarray
    dtype: str = "float64"
    channel_axis: int | None = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise TensorIOError(f"unsupported dtype {self.dtype!r}")
        if self.channel_axis is not None and not (0 <= self.channel_axis < max(self.data.ndim, 1)):
            raise ValueError("channel_axis is not an axis of shape")
        if self.bits is not None:
            lo, hi = int_range(self.bits)
            if self.data.size and (self.data.min() < lo or self.data.max() > hi):
                raise ValueError(f"value out of {self.dtype} range")

    @classmethod
    def from_array(cls, arr, dtype: str | None = None, channel_axis: int | None = None) -> "Tensor":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = {np.dtype(np.float32): "float32", np.dtype(np.int32): "int32"}.get(arr.dtype, "float64")
        if dtype in _DENSE:
            arr = arr.astype(np.dtype(_DENSE[dtype]).newbyteorder("="))
        elif dtype in DTYPES:
            lo, hi = int_range(int(dtype[3:]))
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise ValueError(f"value out of {dtype} range [{lo}, {hi}]")
            arr = arr.astype(np.int8)
        else:
            raise TensorIOError(f"unsupported dtype {dtype!r}")
        return cls(np.array(arr, order="C"), dtype, channel_axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def bits(self) -> int | None:
        return int(self.dtype[3:]) if self.dtype in ("int2", "int4", "int8") else None

    def payload(self) -> bytes:
        if self.bits is not None:
            return pack_int(self.data, self.bits).payload
        return np.ascontiguousarray(self.data, dtype=_DENSE[self.dtype]).tobytes()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.dtype, self.shape, self.channel_axis) == (other.dtype, other.shape, other.channel_axis) \
            and self.payload() == other.payload()


def _payload_len(dtype: str, shape) -> int:
    n = math.prod(shape)
    if dtype in _DENSE:
        return n * np.dtype(_DENSE[dtype]).itemsize
    return -(-n * int(dtype[3:]) // 8)


def write_tensor(t: Tensor, path) -> None:
    header = {
        "dtype": t.dtype,
        "shape": list(t.shape),
        "layout": "row-major",
        "bits": t.bits,
        "channel_axis": t.channel_axis,
        "payload_bytes": _payload_len(t.dtype, t.shape),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + t.payload())


def read_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorIOError(f"{path}: bad magic")
    if len(raw) < 8:
        raise TensorIOError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorIOError(f"{path}: unreadable header") from exc
    dtype = header.get("dtype")
    if dtype not in DTYPES:
        raise TensorIOError(f"{path}: unsupported dtype {dtype!r}")
    if header.get("layout", "row-major") != "row-major":
        raise TensorIOError(f"{path}: unsupported layout {header['layout']!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = raw[8 + hlen:]
    expected = _payload_len(dtype, shape)
    if len(payload) != expected or header.get("payload_bytes", expected) != expected:
        raise TensorIOError(f"{path}: payload length {len(payload)} != expected {expected}")
    if dtype in _DENSE:
        data = np.frombuffer(payload, dtype=_DENSE[dtype]).astype(np.dtype(_DENSE[dtype]).newbyteorder("="))
        data = data.reshape(shape)
    else:
        data = PackedIntMatrix(shape, int(dtype[3:]), payload).unpack()
    return Tensor(np.array(data, order="C"), dtype, header.get("channel_axis"))


@dataclass
class LayerSpec:
    """One layer of a model. ``params`` maps a role (``weight``, ``bias``) to a blob name."""

    kind: str
    params: dict[str, str] = field(default_factory=dict)
    attrs: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("params", {})), dict(d.get("attrs", {})))


@dataclass
class ModelManifest:
    """The layer list with metadata and the named tensors its layers reference.

    ``metadata["input_shape"]`` is the per-sample input shape (no batch axis).
    """

    layers: list[LayerSpec] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def param(self, layer: LayerSpec, role: str) -> np.ndarray | None:
        name = layer.params.get(role)
        return None if name is None else self.tensors[name].data

    def parameterized(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("linear", "conv2d")]

    def validate(self) -> list[tuple[int, ...]]:
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise UnsupportedLayerKind(f"layer {i}: unsupported kind {layer.kind!r}")
            for role, name in layer.params.items():
                if name not in self.tensors:
                    raise ManifestError(f"layer {i}: dangling reference {role}={name!r}")
        return infer_shapes(self)

    def __eq__(self, other):
        if not isinstance(other, ModelManifest):
            return NotImplemented
        return ([l.to_dict() for l in self.layers] == [l.to_dict() for l in other.layers]
                and self.metadata == other.metadata and self.tensors == other.tensors)


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def infer_shapes(m: ModelManifest) -> list[tuple[int, ...]]:
    """Per-sample shape after each layer; the first entry is the input shape."""
    if "input_shape" not in m.metadata:
        if m.layers:
            raise ManifestError("metadata lacks input_shape")
        return []
    shape = tuple(int(s) for s in m.metadata["input_shape"])
    shapes = [shape]
    for i, layer in enumerate(m.layers):
        if layer.kind == "linear":
            w = m.param(layer, "weight")
            if w is None or w.ndim != 2:
                raise ManifestError(f"layer {i}: linear needs a 2-d weight")
            if len(shape) != 1 or shape[0] != w.shape[1]:
                raise ManifestError(f"layer {i}: input {shape} does not compose with weight {w.shape}")
            shape = (w.shape[0],)
        elif layer.kind == "conv2d":
            w = m.param(layer, "weight")
            if w is None or w.ndim != 4:
                raise ManifestError(f"layer {i}: conv2d needs a 4-d weight")
            if len(shape) != 3 or shape[0] != w.shape[1]:
                raise ManifestError(f"layer {i}: input {shape} does not compose with weight {w.shape}")
            ho, wo = conv_out_hw(shape[1], shape[2], w.shape[2], w.shape[3],
                                 int(layer.attrs.get("stride", 1)), int(layer.attrs.get("padding", 0)))
            if ho < 1 or wo < 1:
                raise ManifestError(f"layer {i}: kernel larger than input")
            shape = (w.shape[0], ho, wo)
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind in ("relu", "softmax"):
            pass
        else:
            raise UnsupportedLayerKind(f"layer {i}: unsupported kind {layer.kind!r}")
        b = m.param(layer, "bias")
        if b is not None and b.shape != (shape[0],):
            raise ManifestError(f"layer {i}: bias shape {b.shape} does not match {shape[0]} outputs")
        shapes.append(shape)
    return shapes


def save_model(m: ModelManifest, directory) -> None:
    d = Path(directory)
    (d / "blobs").mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name in sorted(m.tensors):
        rel = f"blobs/{name}.sqtf"
        write_tensor(m.tensors[name], d / rel)
        blobs[name] = rel
    doc = {
        "format": "seriex-model",
        "version": 1,
        "metadata": m.metadata,
        "layers": [l.to_dict() for l in m.layers],
        "tensor_blobs": blobs,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> ModelManifest:
    d = Path(directory)
    doc = json.loads((d / MANIFEST_NAME).read_text())
    tensors = {}
    for name, rel in doc.get("tensor_blobs", {}).items():
        p = d / rel
        if not p.exists():
            raise ManifestError(f"dangling reference: blob {name!r} missing at {rel}")
        tensors[name] = read_tensor(p)
    m = ModelManifest([LayerSpec.from_dict(l) for l in doc.get("layers", [])], doc.get("metadata", {}), tensors)
    m.validate()
    return m
