"""Binary model file format (``.kids``).

Layout, all integers little-endian::

    b"KIDS" | u16 version=1 | u8 endianness (1 = little) | u32 n_layers
    u32 input_dim
    per layer:
        u8 kind tag | u8 n_shape | u32 * n_shape      (shape header)
        u8 n_attr   | f32 * n_attr                    (eps, momentum, rate ...)
        u8 n_tensor
        per tensor:
            u8 dtype (0 = f32, 1 = i8) | u8 ndim | u32 * ndim | raw bytes
            [i8 only] f32 scale | i32 zero_point
    u32 CRC32 of every preceding byte

Tensors appear in the layer's parameter order followed by its buffers.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import FormatError
from ..quant import QuantTensor
from .layers import LAYER_TYPES, BatchNorm, Dense, Dropout, KronDense, Layer, Pad, ReLU
from .model import Model

MAGIC = b"KIDS"
VERSION = 1
LITTLE = 1
DT_F32, DT_I8 = 0, 1


def _tensor_bytes(arr: np.ndarray, qt: QuantTensor | None) -> bytes:
    out = bytearray()
    if qt is None:
        data = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<BB", DT_F32, data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    else:
        q = np.ascontiguousarray(qt.q, dtype=np.int8)
        out += struct.pack("<BB", DT_I8, q.ndim)
        out += struct.pack(f"<{q.ndim}I", *q.shape)
        out += q.tobytes()
        out += struct.pack("<fi", qt.scale, qt.zero_point)
    return bytes(out)


def serialize(model: Model) -> bytes:
    """Encode ``model``. Float tensors are stored as f32."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<HBI", VERSION, LITTLE, len(model.layers))
    buf += struct.pack("<I", model.in_dim)
    for layer in model.layers:
        shape = layer.shape_header()
        attrs = layer.attrs()
        tensors = [(k, v) for k, v in layer.params.items()] + [(k, v) for k, v in layer.buffers.items()]
        buf += struct.pack("<BB", layer.tag, len(shape))
        buf += struct.pack(f"<{len(shape)}I", *shape)
        buf += struct.pack("<B", len(attrs))
        buf += struct.pack(f"<{len(attrs)}f", *attrs)
        buf += struct.pack("<B", len(tensors))
        for name, arr in tensors:
            buf += _tensor_bytes(arr, layer.quant.get(name))
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("model file is truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("model file is truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def _make_layer(tag: int, shape: list[int], attrs: list[float]) -> Layer:
    if tag not in LAYER_TYPES:
        raise FormatError(f"unknown layer tag {tag}")
    cls = LAYER_TYPES[tag]
    if cls is Dense:
        return Dense(shape[0], shape[1])
    if cls is BatchNorm:
        return BatchNorm(shape[0], eps=attrs[0], momentum=attrs[1])
    if cls is Dropout:
        return Dropout(attrs[0])
    if cls is ReLU:
        return ReLU()
    if cls is KronDense:
        return KronDense((shape[2], shape[3]), (shape[4], shape[5]))
    if cls is Pad:
        return Pad(shape[0], shape[1])
    raise FormatError(f"unknown layer tag {tag}")  # pragma: no cover


def deserialize(data: bytes) -> Model:
    if len(data) < 4 + 2 + 1 + 4 + 4 + 4:
        raise FormatError("model file is truncated")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 4
    version, endian, n_layers = r.take("<HBI")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    if endian != LITTLE:
        raise FormatError("only little-endian model files are supported")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC32 mismatch: model file is corrupt or truncated")
    (in_dim,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        tag, n_shape = r.take("<BB")
        shape = list(r.take(f"<{n_shape}I"))
        (n_attr,) = r.take("<B")
        attrs = list(r.take(f"<{n_attr}f"))
        layer = _make_layer(tag, shape, attrs)
        names = list(layer.params) + list(layer.buffers)
        (n_tensor,) = r.take("<B")
        if n_tensor != len(names):
            raise FormatError(f"{layer.kind} layer stores {n_tensor} tensors, expected {len(names)}")
        for name in names:
            dt, ndim = r.take("<BB")
            dims = r.take(f"<{ndim}I")
            count = int(np.prod(dims)) if ndim else 1
            if dt == DT_F32:
                arr = np.frombuffer(r.raw(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
            elif dt == DT_I8:
                q = np.frombuffer(r.raw(count), dtype=np.int8).reshape(dims).copy()
                scale, zp = r.take("<fi")
                qt = QuantTensor(q, float(np.float32(scale)), int(zp))
                layer.quant[name] = qt
                arr = qt.dequantize()
            else:
                raise FormatError(f"unknown dtype tag {dt}")
            target = layer.params if name in layer.params else layer.buffers
            if target[name].shape != arr.shape:
                raise FormatError(f"tensor {name} has shape {arr.shape}, expected {target[name].shape}")
            target[name] = arr
        layers.append(layer)
    if r.pos != len(body):
        raise FormatError("trailing bytes after last layer")
    return Model(layers, in_dim).eval()


def save_model(model: Model, path) -> int:
    data = serialize(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
