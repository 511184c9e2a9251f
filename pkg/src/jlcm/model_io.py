"""Model container, calibration data and the reference forward pass.

On-disk layouts (all little-endian):

``JLCM`` container v1::

    magic "JLCM" | u8 version=1 | u8 dtype (0=f32, 1=f16) | u32 L
    L x (u32 n_o | u32 n_i | u8 activation | u8 has_bias)
    L x (row-major weight blob | bias blob if has_bias)

``JCAL`` calibration file::

    magic "JCAL" | u32 B | u32 width | row-major f32 blob
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import erf

CONTAINER_MAGIC = b"JLCM"
CALIB_MAGIC = b"JCAL"
CONTAINER_VERSION = 1

_HEADER = struct.Struct("<4sBBI")
_LAYER = struct.Struct("<IIBB")
_CALIB = struct.Struct("<4sII")


class ContainerError(ValueError):
    """Base class for container and calibration load failures."""


class MalformedHeaderError(ContainerError):
    pass


class BlobLengthError(ContainerError):
    pass


class DimensionError(ContainerError):
    pass


class NonFiniteError(ContainerError):
    pass


class Activation(enum.IntEnum):
    IDENTITY = 0
    RELU = 1
    GELU = 2


class StorageDtype(enum.IntEnum):
    F32 = 0
    F16 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is StorageDtype.F32 else np.dtype("<f2")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act == Activation.IDENTITY:
        return z
    if act == Activation.RELU:
        return np.maximum(z, 0)
    return (0.5 * z * (1.0 + erf(z * _SQRT_HALF))).astype(z.dtype, copy=False)


def activate_grad(z: np.ndarray, act: Activation) -> np.ndarray:
    """Derivative of ``activate`` at pre-activation ``z`` (relu'(0) = 0)."""
    if act == Activation.IDENTITY:
        return np.ones_like(z)
    if act == Activation.RELU:
        return (z > 0).astype(z.dtype)
    cdf = 0.5 * (1.0 + erf(z * _SQRT_HALF))
    return (cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)).astype(z.dtype, copy=False)


def _preact(x, weights, bias) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) @ np.asarray(weights, dtype=np.float64).T
    if bias is not None:
        z += np.asarray(bias, dtype=np.float64)
    return z


def dense(x: np.ndarray, weights: np.ndarray, bias, act: Activation) -> np.ndarray:
    """One layer in f32: products are summed in float64 and rounded once.

    Rounding once per output makes the result independent of summation
    order, so permuting hidden units leaves outputs bitwise unchanged in
    all but vanishingly rare rounding-boundary cases.
    """
    return activate(_preact(x, weights, bias), act).astype(np.float32)


@dataclass(frozen=True)
class LinearLayer:
    weights: np.ndarray
    bias: np.ndarray | None = None
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise DimensionError(f"weights must be a non-empty matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("non-finite weight value")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float32).ravel()
            if b.shape != (w.shape[0],):
                raise DimensionError(f"bias length {b.shape[0]} != n_o {w.shape[0]}")
            if not np.all(np.isfinite(b)):
                raise NonFiniteError("non-finite bias value")
            object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_o(self) -> int:
        return self.weights.shape[0]

    @property
    def n_i(self) -> int:
        return self.weights.shape[1]

    def preact(self, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Pre-activation ``x W^T + b`` accumulated in float64."""
        w = self.weights if weights is None else weights
        return _preact(x, w, self.bias)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return dense(x, self.weights, self.bias, self.activation)


@dataclass(frozen=True)
class ModelContainer:
    layers: tuple[LinearLayer, ...]
    name: str = "model"
    dtype_stored: StorageDtype = StorageDtype.F32

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionError("model has no layers")
        for l in range(len(layers) - 1):
            if layers[l].n_o != layers[l + 1].n_i:
                raise DimensionError(f"dimension incompatibility at layer {l + 1}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "dtype_stored", StorageDtype(self.dtype_stored))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(l.weights.size + (0 if l.bias is None else l.bias.size) for l in self.layers)

    def with_layer(self, index: int, layer: LinearLayer) -> "ModelContainer":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class CalibrationSet:
    inputs: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionError("calibration inputs must be a B x width matrix with B >= 1")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite calibration value")
        object.__setattr__(self, "inputs", x)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def save_container(model: ModelContainer, path, dtype: StorageDtype | str | None = None) -> None:
    if dtype is None:
        dtype = model.dtype_stored
    elif isinstance(dtype, str):
        dtype = StorageDtype[dtype.upper()]
    dtype = StorageDtype(dtype)
    npdt = dtype.numpy
    parts = [_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, int(dtype), len(model.layers))]
    for layer in model.layers:
        parts.append(_LAYER.pack(layer.n_o, layer.n_i, int(layer.activation), layer.bias is not None))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype=npdt).tobytes())
        if layer.bias is not None:
            parts.append(np.ascontiguousarray(layer.bias, dtype=npdt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_container(path) -> ModelContainer:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedHeaderError("file too short for a JLCM header")
    magic, version, dt, n_layers = _HEADER.unpack_from(data, 0)
    if magic != CONTAINER_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise MalformedHeaderError(f"unsupported container version {version}")
    try:
        dtype = StorageDtype(dt)
    except ValueError:
        raise MalformedHeaderError(f"unknown dtype code {dt}") from None
    off = _HEADER.size
    if len(data) < off + n_layers * _LAYER.size:
        raise MalformedHeaderError("truncated layer table")
    table = []
    for _ in range(n_layers):
        n_o, n_i, act, has_bias = _LAYER.unpack_from(data, off)
        off += _LAYER.size
        if act not in Activation._value2member_map_ or has_bias > 1:
            raise MalformedHeaderError(f"bad layer descriptor (activation={act}, has_bias={has_bias})")
        table.append((n_o, n_i, Activation(act), bool(has_bias)))

    item = dtype.numpy.itemsize
    expected = off + sum((n_o * n_i + (n_o if hb else 0)) * item for n_o, n_i, _, hb in table)
    if len(data) != expected:
        raise BlobLengthError(f"blob length mismatch: expected {expected} bytes, got {len(data)}")

    layers = []
    for n_o, n_i, act, has_bias in table:
        w = np.frombuffer(data, dtype=dtype.numpy, count=n_o * n_i, offset=off).reshape(n_o, n_i)
        off += w.nbytes
        b = None
        if has_bias:
            b = np.frombuffer(data, dtype=dtype.numpy, count=n_o, offset=off)
            off += b.nbytes
        layers.append(LinearLayer(w.astype(np.float32), None if b is None else b.astype(np.float32), act))
    return ModelContainer(tuple(layers), name=path.stem, dtype_stored=dtype)


def save_calibration(calib: CalibrationSet | np.ndarray, path) -> None:
    x = calib.inputs if isinstance(calib, CalibrationSet) else np.asarray(calib, dtype=np.float32)
    x = np.ascontiguousarray(x, dtype="<f4")
    Path(path).write_bytes(_CALIB.pack(CALIB_MAGIC, x.shape[0], x.shape[1]) + x.tobytes())


def load_calibration(path, width: int | None = None) -> CalibrationSet:
    data = Path(path).read_bytes()
    if len(data) < _CALIB.size:
        raise MalformedHeaderError("file too short for a JCAL header")
    magic, b, w = _CALIB.unpack_from(data, 0)
    if magic != CALIB_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if len(data) != _CALIB.size + 4 * b * w:
        raise BlobLengthError(f"blob length mismatch: expected {_CALIB.size + 4 * b * w} bytes, got {len(data)}")
    if width is not None and w != width:
        raise DimensionError(f"calibration width {w} != first layer n_i {width}")
    x = np.frombuffer(data, dtype="<f4", offset=_CALIB.size).reshape(b, w)
    return CalibrationSet(x.astype(np.float32))


def forward(model: ModelContainer, inputs: np.ndarray, upto_layer: int | None = None,
            capture: str = "output") -> np.ndarray:
    """Run the stack on ``inputs`` (B x n_i rows).

    ``capture="pre_layer_input"`` returns the features entering ``upto_layer``;
    ``capture="output"`` returns the post-activation output of ``upto_layer``
    (the last layer when ``upto_layer`` is None).
    """
    x = np.asarray(inputs, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.layers[0].n_i:
        raise DimensionError(f"input width {x.shape[1]} != first layer n_i {model.layers[0].n_i}")
    last = len(model.layers) - 1 if upto_layer is None else upto_layer
    if not 0 <= last < len(model.layers):
        raise IndexError(f"layer {last} out of range for {len(model.layers)} layers")
    if capture not in ("pre_layer_input", "output"):
        raise ValueError(f"unknown capture mode {capture!r}")
    stop = last if capture == "pre_layer_input" else last + 1
    for layer in model.layers[:stop]:
        x = layer(x)
    return x


def apply_permutation(model: ModelContainer, layer: int, sigma) -> ModelContainer:
    """Reorder the output neurons of ``layer`` and the inputs of its successor.

    ``sigma[old] = new`` position. The end-to-end function is unchanged.
    """
    if layer + 1 >= len(model.layers):
        raise DimensionError(f"layer {layer} has no successor to absorb a permutation")
    cur, nxt = model.layers[layer], model.layers[layer + 1]
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (cur.n_o,) or not np.array_equal(np.sort(sigma), np.arange(cur.n_o)):
        raise ValueError("sigma must be a permutation of range(n_o)")
    order = np.argsort(sigma)  # order[new] = old
    new_cur = LinearLayer(cur.weights[order], None if cur.bias is None else cur.bias[order], cur.activation)
    new_nxt = LinearLayer(nxt.weights[:, order], nxt.bias, nxt.activation)
    return model.with_layer(layer, new_cur).with_layer(layer + 1, new_nxt)
