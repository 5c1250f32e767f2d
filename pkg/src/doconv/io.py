"""IDX dataset files and the ``DOCV`` binary model format.

``DOCV`` layout (all integers little-endian)::

    magic        4s   b"DOCV"
    version      u16
    dtype tag    u8   0 = float64, 1 = float32
    folded flag  u8
    input shape  3 x u32  (H, W, C)
    layer count  u32
    per layer:
      kind tag     u8
      geometry     8 x i32  (M, N, c_in, c_out, stride, pad, groups, d_mul)
      tensor count u8
      per tensor:  u8 ndim, ndim x u32 dims, raw little-endian values

Unfolded DO layers store ``D'`` then ``W``; a folded file stores ``W'`` in
their place. A bias, when present, is always the last tensor. Dense layers
keep ``(in, units)`` in ``c_in``/``c_out``. A JSON summary is written next to
every model file as ``<name>.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conv import ConvGeometry
from .errors import (
    BadMagicError,
    CountMismatchError,
    FormatError,
    GeometryError,
    ShapeError,
    TruncatedFileError,
    UnsupportedConfigError,
    VersionMismatchError,
)
from .nn import Conv, Dense, DepthwiseConv, DOConv, Flatten, MaxPool2, Network, ReLU
from .overparam import DO_CONV, DO_DCONV, DO_GCONV, DoConvParams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [count, H, W, 1] in [0, 1]
    labels: np.ndarray  # [count] integer classes

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, count: int, offset: int = 0) -> "Dataset":
        return Dataset(self.images[offset : offset + count], self.labels[offset : offset + count])


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float64) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    x = (images.astype(dtype) / 255.0)[..., None]
    return Dataset(x, labels.astype(np.int64))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``[count, H, W]`` and labels ``[count]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --- model files ---------------------------------------------------------

MAGIC = b"DOCV"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_KIND_TAGS = {
    "conv": 0,
    "dconv": 1,
    DO_CONV: 2,
    DO_GCONV: 3,
    DO_DCONV: 4,
    "relu": 5,
    "maxpool": 6,
    "flatten": 7,
    "dense": 8,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_HEADER = struct.Struct("<4sHBB3II")
_LAYER = struct.Struct("<B8iB")
_NO_GEOM = (0,) * 8


def _geom_tuple(g: ConvGeometry):
    return (g.M, g.N, g.c_in, g.c_out, g.stride, g.pad, g.groups, g.d_mul)


def _layer_record(layer, folded: bool):
    """``(kind, geometry, tensors)`` for one layer in the requested state."""
    if isinstance(layer, DOConv):
        p = layer.p
        if folded:
            f = layer.folded()
            tensors = [f.w]
        else:
            tensors = ([] if p.d_res is None else [p.d_res]) + [p.w]
        if p.bias is not None:
            tensors.append(p.bias)
        return p.kind, _geom_tuple(p.geom), tensors
    if isinstance(layer, Conv):  # also DepthwiseConv
        kind = layer.origin if layer.origin is not None else layer.kind
        geom = layer.geom
        if layer.origin is not None:
            if not folded:
                raise FormatError("cannot write a folded layer into an unfolded model file")
            geom = layer.do_geom
        tensors = [layer.w] + ([] if layer.bias is None else [layer.bias])
        return kind, _geom_tuple(geom), tensors
    if isinstance(layer, Dense):
        geom = (0, 0, layer.w.shape[0], layer.w.shape[1], 0, 0, 0, 0)
        return "dense", geom, [layer.w] + ([] if layer.bias is None else [layer.bias])
    return layer.kind, _NO_GEOM, []


def model_bytes(net: Network, folded: bool) -> bytes:
    dtypes = {v.dtype for v in net.params().values()}
    if len(dtypes) != 1 or next(iter(dtypes)) not in _DTYPE_TAGS:
        raise FormatError(f"model parameters must share one float dtype, found {dtypes}")
    dtype = next(iter(dtypes))
    tag = _DTYPE_TAGS[dtype]
    folded = bool(folded or net.is_folded)
    parts = [_HEADER.pack(MAGIC, VERSION, tag, int(folded), *net.input_shape, len(net.layers))]
    for layer in net.layers:
        kind, geom, tensors = _layer_record(layer, folded)
        parts.append(_LAYER.pack(_KIND_TAGS[kind], *geom, len(tensors)))
        for t in tensors:
            parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
            parts.append(np.ascontiguousarray(t, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def summary(net: Network, folded: bool) -> dict:
    folded = bool(folded or net.is_folded)
    rows = []
    for i, layer in enumerate(net.layers):
        kind, geom, tensors = _layer_record(layer, folded)
        row = {"index": i, "kind": kind, "tensors": [list(t.shape) for t in tensors]}
        if geom != _NO_GEOM:
            row["geometry"] = dict(zip(("M", "N", "c_in", "c_out", "stride", "pad", "groups", "d_mul"), geom))
        rows.append(row)
    return {
        "format": "DOCV",
        "version": VERSION,
        "folded": folded,
        "input_shape": list(net.input_shape),
        "layers": rows,
    }


def save_model(net: Network, path, folded: bool = False) -> Path:
    """Write ``net`` (folding DO layers first if ``folded``) plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(model_bytes(net, folded))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(summary(net, folded), indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if self.pos + s.size > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = s.unpack_from(self.raw, self.pos)
        self.pos += s.size
        return out

    def tensor(self, dtype):
        (ndim,) = self.take("<B")
        dims = self.take(f"<{ndim}I")
        nbytes = int(np.prod(dims)) * dtype.itemsize
        if self.pos + nbytes > len(self.raw):
            raise TruncatedFileError(f"{self.path}: tensor data runs past end of file")
        t = np.frombuffer(self.raw, dtype=dtype, count=int(np.prod(dims)), offset=self.pos)
        self.pos += nbytes
        return t.reshape(dims).astype(dtype.newbyteorder("="))


def load_model(path) -> Network:
    """Rebuild a network from a ``DOCV`` file; folded files give plain layers."""
    r = _Reader(Path(path).read_bytes(), path)
    magic, version, tag, folded, H, W, C, count = r.take(_HEADER)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: not a DOCV model file")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this reader handles {VERSION}")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    layers = []
    for _ in range(count):
        ktag, *geom, ntensors = r.take(_LAYER)
        if ktag not in _TAG_KINDS:
            raise FormatError(f"{path}: unknown layer kind tag {ktag}")
        kind = _TAG_KINDS[ktag]
        tensors = [r.tensor(dtype) for _ in range(ntensors)]
        try:
            layers.append(_build_layer(kind, geom, tensors, bool(folded), path))
        except (ShapeError, GeometryError, UnsupportedConfigError) as e:
            raise FormatError(f"{path}: inconsistent {kind} layer: {e}") from e
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Network(layers, (H, W, C))


def _build_layer(kind, geom, tensors, folded, path):
    if kind in ("relu", "maxpool", "flatten"):
        return {"relu": ReLU, "maxpool": MaxPool2, "flatten": Flatten}[kind]()
    if kind == "dense":
        if len(tensors) not in (1, 2):
            raise FormatError(f"{path}: dense layer with {len(tensors)} tensors")
        return Dense(tensors[0], tensors[1] if len(tensors) == 2 else None)
    g = ConvGeometry(*geom)
    if kind in ("conv", "dconv"):
        if len(tensors) not in (1, 2):
            raise FormatError(f"{path}: {kind} layer with {len(tensors)} tensors")
        cls = Conv if kind == "conv" else DepthwiseConv
        return cls(g, tensors[0], tensors[1] if len(tensors) == 2 else None)
    # kernels are 3-D, a bias is 1-D
    kernels = [t for t in tensors if t.ndim == 3]
    rest = [t for t in tensors if t.ndim != 3]
    if len(rest) > 1 or (rest and rest[0].ndim != 1) or any(t.ndim != 3 for t in tensors[: len(kernels)]):
        raise FormatError(f"{path}: malformed tensor list for {kind} layer")
    bias = rest[0] if rest else None
    if folded:
        if len(kernels) != 1:
            raise FormatError(f"{path}: folded {kind} layer must hold exactly one kernel")
        if kind == DO_DCONV:
            fg = g.with_(d_mul=g.c_out // g.c_in, groups=1)
            return DepthwiseConv(fg, kernels[0], bias, origin=kind, do_geom=g)
        return Conv(g.with_(d_mul=1), kernels[0], bias, origin=kind, do_geom=g)
    if len(kernels) not in (1, 2):
        raise FormatError(f"{path}: unfolded {kind} layer must hold D' and W")
    d_res = kernels[0] if len(kernels) == 2 else None
    p = DoConvParams(d_res, kernels[-1], g, kind, bias, separable=g.d_mul < g.MN)
    return DOConv(p)
