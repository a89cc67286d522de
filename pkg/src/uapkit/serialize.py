"""Binary file formats for model checkpoints and perturbations.

Both formats are little-endian with a trailing CRC32 over all preceding
bytes. Checkpoints round-trip weights bit-exactly (raw float64).

Model checkpoint ("DNET"):
    magic "DNET" | version u32 | input rank u32, dims u32[] |
    pixel domain lo f64, hi f64 | num classes u32 | class weights f64[K] |
    layer count u32 | per layer: kind tag u8, kind params u32[],
    weights f64[] row-major | CRC32 u32

Perturbation file ("UAPF"):
    magic "UAPF" | version u32 | norm tag u8 (1, 2, 255=inf) | xi f64 |
    rank u32, dims u32[] | values f64[] row-major | CRC32 u32
"""

import math
import struct
import zlib

import numpy as np

from .attacks import AttackBudget, Perturbation
from .network import _LAYER_CLASSES, LayerSpec, Network

MODEL_MAGIC = b"DNET"
PERT_MAGIC = b"UAPF"
FORMAT_VERSION = 1

_KIND_TAGS = {"dense": 1, "conv2d": 2, "relu": 3, "maxpool2d": 4, "flatten": 5,
              "softmax": 6}
_TAG_KINDS = {tag: kind for kind, tag in _KIND_TAGS.items()}
_NORM_TAGS = {1.0: 1, 2.0: 2, math.inf: 255}
_TAG_NORMS = {tag: p for p, tag in _NORM_TAGS.items()}


class FileFormatError(ValueError):
    """Raised on malformed files; carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FileFormatError(
                f"truncated {self.what}: wanted {n} bytes, "
                f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, shape):
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def _u32(x):
    return struct.pack("<I", x)


def _f64(x):
    return struct.pack("<d", x)


def _f64_array(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _finish(path, payload):
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_u32(zlib.crc32(payload)))


def _open_checked(path, magic, what):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(magic) + 8:
        raise FileFormatError(f"{what} too short to be valid", len(data))
    if data[:len(magic)] != magic:
        raise FileFormatError(
            f"bad magic {data[:len(magic)]!r}, expected {magic!r}", 0)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise FileFormatError(
            f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}",
            len(data) - 4)
    rd = _Reader(data[:-4], what)
    rd.take(len(magic))
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported format version {version}", rd.pos - 4)
    return rd


def _layer_params(spec):
    if spec.kind == "dense":
        return [spec.units]
    if spec.kind == "conv2d":
        return [spec.filters, spec.kernel_size, spec.stride]
    if spec.kind == "maxpool2d":
        return [spec.kernel_size, spec.stride]
    return []


def _spec_from_params(kind, params):
    if kind == "dense":
        return LayerSpec("dense", units=params[0])
    if kind == "conv2d":
        return LayerSpec("conv2d", filters=params[0], kernel_size=params[1],
                         stride=params[2])
    if kind == "maxpool2d":
        return LayerSpec("maxpool2d", kernel_size=params[0], stride=params[1])
    return LayerSpec(kind)


_PARAM_COUNTS = {"dense": 1, "conv2d": 3, "maxpool2d": 2, "relu": 0,
                 "flatten": 0, "softmax": 0}


def save_model(net, path):
    """Write a Network to a DNET checkpoint; round-trips bit-exactly."""
    parts = [MODEL_MAGIC, _u32(FORMAT_VERSION), _u32(len(net.input_shape))]
    parts += [_u32(d) for d in net.input_shape]
    parts += [_f64(net.pixel_domain[0]), _f64(net.pixel_domain[1])]
    parts.append(_u32(net.num_classes))
    parts.append(_f64_array(net.class_weights))
    parts.append(_u32(len(net.layers)))
    for layer in net.layers:
        spec = layer.spec
        parts.append(bytes([_KIND_TAGS[spec.kind]]))
        parts += [_u32(v) for v in _layer_params(spec)]
        for arr in layer.params():
            parts.append(_f64_array(arr))
    _finish(path, b"".join(parts))


def load_model(path):
    """Read a DNET checkpoint back into a Network."""
    rd = _open_checked(path, MODEL_MAGIC, "model checkpoint")
    rank = rd.u32()
    if rank < 1 or rank > 8:
        raise FileFormatError(f"implausible input rank {rank}", rd.pos - 4)
    input_shape = tuple(rd.u32() for _ in range(rank))
    domain = (rd.f64(), rd.f64())
    num_classes = rd.u32()
    class_weights = rd.f64_array((num_classes,))
    n_layers = rd.u32()

    # Weight array sizes follow from shape propagation, so layers are parsed
    # incrementally: metadata first, then exactly the expected float block.
    try:
        specs, weights = [], []
        shape = input_shape
        rng = np.random.default_rng(0)
        for i in range(n_layers):
            pos = rd.pos
            tag = rd.u8()
            if tag not in _TAG_KINDS:
                raise FileFormatError(f"layer {i}: unknown kind tag {tag}", pos)
            kind = _TAG_KINDS[tag]
            spec = _spec_from_params(kind, [rd.u32() for _ in range(_PARAM_COUNTS[kind])])
            layer = _LAYER_CLASSES[spec.kind](spec, shape, i, rng)
            weights.append([rd.f64_array(arr.shape) for arr in layer.params()])
            shape = layer.out_shape
            specs.append(spec)
        net = Network(specs, input_shape, pixel_domain=domain,
                      class_weights=class_weights, seed=0)
    except ValueError as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"inconsistent layer metadata: {exc}", rd.pos) from exc

    for layer, arrs in zip(net.layers, weights):
        for target, arr in zip(layer.params(), arrs):
            target[...] = arr
    if rd.pos != len(rd.data):
        raise FileFormatError(
            f"{len(rd.data) - rd.pos} trailing bytes after last layer", rd.pos)
    return net


def save_perturbation(pert, path):
    """Write a Perturbation to a UAPF file."""
    p = float(pert.budget.p)
    if p not in _NORM_TAGS:
        raise ValueError(f"norm p={p} has no file tag (use 1, 2 or inf)")
    tensor = np.asarray(pert.tensor, dtype=float)
    parts = [PERT_MAGIC, _u32(FORMAT_VERSION), bytes([_NORM_TAGS[p]]),
             _f64(pert.budget.xi), _u32(tensor.ndim)]
    parts += [_u32(d) for d in tensor.shape]
    parts.append(_f64_array(tensor))
    _finish(path, b"".join(parts))


def load_perturbation(path):
    """Read a UAPF file; provenance of loaded perturbations is "file"."""
    rd = _open_checked(path, PERT_MAGIC, "perturbation file")
    tag = rd.u8()
    if tag not in _TAG_NORMS:
        raise FileFormatError(f"unknown norm tag {tag}", rd.pos - 1)
    xi = rd.f64()
    if not (xi > 0 and math.isfinite(xi)):
        raise FileFormatError(f"invalid budget xi={xi}", rd.pos - 8)
    rank = rd.u32()
    if rank < 1 or rank > 8:
        raise FileFormatError(f"implausible rank {rank}", rd.pos - 4)
    shape = tuple(rd.u32() for _ in range(rank))
    tensor = rd.f64_array(shape)
    if rd.pos != len(rd.data):
        raise FileFormatError(
            f"{len(rd.data) - rd.pos} trailing bytes after values", rd.pos)
    if not np.all(np.isfinite(tensor)):
        raise FileFormatError("perturbation contains non-finite values")
    return Perturbation(tensor, AttackBudget(_TAG_NORMS[tag], xi), "file")
