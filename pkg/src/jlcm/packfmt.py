"""Compressed model format, index bit-packing and footprint accounting.

``JLCZ`` compressed format v1 (little-endian)::

    magic "JLCZ" | u8 version | u32 L
    per layer:
        u8 mode | u32 n_o | u32 n_i | u8 activation | u8 has_bias
        u16 codebook_size | u16 k | u32 num_scales
        k * codebook_size f16 codewords
        num_scales f16 scales
        n_o f16 bias (if has_bias)
        u32 bitstream byte length | bitstream

Indices are packed at log2(codebook_size) bits each, first index in the
lowest-order bits of byte 0, trailing pad bits zero. Mode 2 stores the
weights uncompressed: codebook_size = k = num_scales = 0 and the "bitstream"
is the row-major f16 weight matrix.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model_io import Activation, LinearLayer, ModelContainer, dense
from .planner import Mode
from .reorder import CodebookSet, HardMapping, group_boundaries, reconstruct

MAGIC = b"JLCZ"
VERSION = 1
MAX_INDEX_BITS = 16

_HEADER = struct.Struct("<4sBI")
_LAYER = struct.Struct("<BIIBBHHI")
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


class LayerMode(enum.IntEnum):
    MULTI_CODEBOOK = 0
    MULTI_SCALE = 1
    RAW = 2


def pack_indices(indices, bits: int) -> bytes:
    """Pack non-negative integers at ``bits`` bits each, little-endian bit order."""
    if not 1 <= bits <= MAX_INDEX_BITS:
        raise ValueError(f"bits must be in 1..{MAX_INDEX_BITS}, got {bits}")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise ValueError(f"index out of range for {bits}-bit packing")
    return kernels.pack_bits(idx, bits)


def unpack_indices(data: bytes, bits: int, count: int) -> np.ndarray:
    if not 1 <= bits <= MAX_INDEX_BITS:
        raise ValueError(f"bits must be in 1..{MAX_INDEX_BITS}, got {bits}")
    need = (count * bits + 7) // 8
    if len(data) < need:
        raise FormatError(f"insufficient bytes: {count} indices at {bits} bits need {need}, got {len(data)}")
    return kernels.unpack_bits(bytes(data[:need]), bits, count)


def _f16(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype("<f2")


@dataclass(frozen=True)
class CompressedLayer:
    mode: LayerMode
    n_o: int
    n_i: int
    activation: Activation
    codebooks: np.ndarray | None = None  # (k, codebook_size) f16
    scales: np.ndarray | None = None  # (num_scales,) f16
    indices: np.ndarray | None = None  # (n_o, n_i) int64
    raw: np.ndarray | None = None  # (n_o, n_i) f16, RAW mode only
    bias: np.ndarray | None = None  # (n_o,) f16

    @classmethod
    def from_codebooks(cls, cbs: CodebookSet, mapping: HardMapping, activation, bias=None) -> "CompressedLayer":
        idx = np.asarray(mapping.indices, dtype=np.int64)
        mode = LayerMode.MULTI_SCALE if cbs.mode is Mode.MULTI_SCALE else LayerMode.MULTI_CODEBOOK
        return cls(mode, idx.shape[0], idx.shape[1], Activation(activation),
                   codebooks=_f16(cbs.codebooks),
                   scales=None if cbs.scales is None else _f16(cbs.scales),
                   indices=idx, bias=None if bias is None else _f16(bias))

    @classmethod
    def passthrough(cls, layer: LinearLayer) -> "CompressedLayer":
        return cls(LayerMode.RAW, layer.n_o, layer.n_i, layer.activation, raw=_f16(layer.weights),
                   bias=None if layer.bias is None else _f16(layer.bias))

    @property
    def codebook_size(self) -> int:
        return 0 if self.codebooks is None else self.codebooks.shape[1]

    @property
    def num_codebooks(self) -> int:
        return 0 if self.codebooks is None else self.codebooks.shape[0]

    @property
    def num_scales(self) -> int:
        return 0 if self.scales is None else self.scales.size

    @property
    def bits_per_index(self) -> int:
        return max(self.codebook_size.bit_length() - 1, 0)

    def codebook_set(self) -> CodebookSet:
        if self.mode is LayerMode.RAW:
            raise FormatError("raw layers carry no codebooks")
        if self.mode is LayerMode.MULTI_SCALE:
            bounds = group_boundaries(self.n_o, self.num_scales)
            return CodebookSet(Mode.MULTI_SCALE, self.codebooks.astype(np.float64), bounds,
                               self.scales.astype(np.float64))
        bounds = group_boundaries(self.n_o, self.num_codebooks)
        return CodebookSet(Mode.MULTI_CODEBOOK, self.codebooks.astype(np.float64), bounds)

    def weights(self) -> np.ndarray:
        """Decoded f32 weight matrix."""
        if self.mode is LayerMode.RAW:
            return self.raw.astype(np.float32)
        return reconstruct(self.codebook_set(), HardMapping(self.indices)).astype(np.float32)

    def payload(self) -> bytes:
        if self.mode is LayerMode.RAW:
            return self.raw.astype("<f2").tobytes()
        return pack_indices(self.indices, self.bits_per_index)

    def to_linear(self) -> LinearLayer:
        return LinearLayer(self.weights(), None if self.bias is None else self.bias.astype(np.float32),
                           self.activation)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return dense(x, self.weights(), self.bias, self.activation)


@dataclass(frozen=True)
class CompressedModel:
    layers: tuple[CompressedLayer, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Evaluate, decoding each layer's weights when it is reached."""
        x = np.asarray(inputs, dtype=np.float32)
        for layer in self.layers:
            x = layer(x)
        return x

    def to_container(self, name: str = "decompressed") -> ModelContainer:
        return ModelContainer(tuple(l.to_linear() for l in self.layers), name=name)


def serialize_compressed(model: CompressedModel, path=None) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(_LAYER.pack(int(layer.mode), layer.n_o, layer.n_i, int(layer.activation),
                                 layer.bias is not None, layer.codebook_size, layer.num_codebooks,
                                 layer.num_scales))
        if layer.codebooks is not None:
            parts.append(layer.codebooks.astype("<f2").tobytes())
        if layer.scales is not None:
            parts.append(layer.scales.astype("<f2").tobytes())
        if layer.bias is not None:
            parts.append(layer.bias.astype("<f2").tobytes())
        stream = layer.payload()
        parts.append(_U32.pack(len(stream)))
        parts.append(stream)
    blob = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"truncated stream at byte {self.off}: need {n} more bytes")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def f16(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(2 * count), dtype="<f2").copy()


def deserialize_compressed(source) -> CompressedModel:
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    r = _Reader(bytes(data))
    magic, version, n_layers = r.unpack(_HEADER)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    layers = []
    for _ in range(n_layers):
        mode, n_o, n_i, act, has_bias, size, k, n_scales = r.unpack(_LAYER)
        try:
            mode = LayerMode(mode)
            act = Activation(act)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        books = r.f16(k * size).reshape(k, size) if k * size else None
        scales = r.f16(n_scales) if n_scales else None
        bias = r.f16(n_o) if has_bias else None
        (nbytes,) = r.unpack(_U32)
        stream = r.take(nbytes)
        if mode is LayerMode.RAW:
            if nbytes != 2 * n_o * n_i:
                raise FormatError("raw layer payload length mismatch")
            raw = np.frombuffer(stream, dtype="<f2").reshape(n_o, n_i).copy()
            layers.append(CompressedLayer(mode, n_o, n_i, act, raw=raw, bias=bias))
            continue
        if size < 2 or size & (size - 1):
            raise FormatError(f"codebook size {size} is not a power of two >= 2")
        bits = size.bit_length() - 1
        if mode is LayerMode.MULTI_SCALE and (k != 1 or not 1 <= n_scales <= n_o):
            raise FormatError("multi-scale layer needs one codebook and 1..n_o scales")
        if mode is LayerMode.MULTI_CODEBOOK and (not 1 <= k <= n_o or n_scales):
            raise FormatError("multi-codebook layer needs 1..n_o codebooks and no scales")
        count = n_o * n_i
        if nbytes != (count * bits + 7) // 8:
            raise FormatError("bitstream length mismatch")
        idx = unpack_indices(stream, bits, count)
        if idx.size and idx.max() >= size:
            raise FormatError("index out of range on decode")
        used = count * bits
        if used % 8 and stream[-1] >> (used % 8):
            raise FormatError("non-zero padding bits in bitstream")
        layers.append(CompressedLayer(mode, n_o, n_i, act, codebooks=books, scales=scales,
                                      indices=idx.reshape(n_o, n_i), bias=bias))
    if r.off != len(r.data):
        raise FormatError(f"{len(r.data) - r.off} trailing bytes after last layer")
    return CompressedModel(tuple(layers))


# --------------------------------------------------------------------------
# footprint


@dataclass(frozen=True)
class LayerFootprint:
    index: int
    codeword_bits: int
    scale_bits: int
    index_bits: int
    bias_bits: int
    reference_bits: int  # 16 bits per original weight (bias excluded)

    @property
    def weight_bits(self) -> int:
        return self.codeword_bits + self.scale_bits + self.index_bits

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.bias_bits

    @property
    def alpha(self) -> float:
        """Compression ratio of the weight matrix alone."""
        return self.reference_bits / self.weight_bits

    def to_dict(self) -> dict:
        return {
            "layer": self.index,
            "codeword_bits": self.codeword_bits,
            "scale_bits": self.scale_bits,
            "index_bits": self.index_bits,
            "bias_bits": self.bias_bits,
            "total_bits": self.total_bits,
            "alpha": self.alpha,
        }


@dataclass(frozen=True)
class FootprintReport:
    m_w: int
    m_a: int
    m_ref: int
    layers: tuple[LayerFootprint, ...] = field(default=())

    @property
    def m(self) -> int:
        return self.m_w + self.m_a

    @property
    def alpha_achieved(self) -> float:
        return self.m_ref / self.m

    @property
    def weight_share(self) -> float:
        return self.m_w / self.m

    def fits(self, capacity_bytes: float) -> bool:
        return self.m <= 8 * capacity_bytes

    def required_alpha(self, capacity_bytes: float) -> float:
        """Smallest compression ratio that fits ``capacity_bytes``."""
        return self.m_ref / (8 * capacity_bytes)

    def to_dict(self, capacity_bytes: float | None = None) -> dict:
        out = {
            "M_W_bits": self.m_w,
            "M_A_bits": self.m_a,
            "M_ref_bits": self.m_ref,
            "M_bits": self.m,
            "M_bytes": math.ceil(self.m / 8),
            "alpha_achieved": self.alpha_achieved,
            "weight_share": self.weight_share,
            "layers": [l.to_dict() for l in self.layers],
        }
        if capacity_bytes is not None:
            out["capacity_bytes"] = capacity_bytes
            out["required_alpha"] = self.required_alpha(capacity_bytes)
            out["fits"] = self.fits(capacity_bytes)
        return out


def layer_footprint(index: int, layer: CompressedLayer) -> LayerFootprint:
    n_w = layer.n_o * layer.n_i
    bias_bits = 0 if layer.bias is None else 16 * layer.n_o
    if layer.mode is LayerMode.RAW:
        return LayerFootprint(index, 0, 0, 16 * n_w, bias_bits, 16 * n_w)
    return LayerFootprint(index, 16 * layer.codebooks.size, 16 * layer.num_scales,
                          layer.bits_per_index * n_w, bias_bits, 16 * n_w)


def activation_bits(shapes) -> int:
    """Peak live features for sequential execution at f16: input plus output buffer."""
    return max(16 * (n_i + n_o) for n_o, n_i in shapes)


def measure_footprint(model: CompressedModel, original: ModelContainer | None = None) -> FootprintReport:
    layers = tuple(layer_footprint(i, l) for i, l in enumerate(model.layers))
    m_w = sum(l.total_bits for l in layers)
    m_a = activation_bits((l.n_o, l.n_i) for l in model.layers)
    if original is not None:
        m_ref = 16 * original.n_params
    else:
        m_ref = sum(l.reference_bits + l.bias_bits for l in layers)
    return FootprintReport(m_w, m_a, m_ref, layers)


def header_bytes(n_layers: int) -> int:
    """Format overhead not counted in M_W: file header, layer headers, length words."""
    return _HEADER.size + n_layers * (_LAYER.size + _U32.size)
