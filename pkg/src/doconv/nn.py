"""Layers and a sequential network with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
stores parameter gradients in ``self.grads`` during ``backward``. Parameters
are numpy arrays updated in place by the optimizer, so a network and its
layers always see the same values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import ConvGeometry, _add_bias, depthwise_apply, grouped_matmul
from .errors import ShapeError, UnsupportedConfigError
from .grads import (
    bias_backward,
    depthwise_apply_backward,
    fold_backward,
    grouped_matmul_backward,
)
from .overparam import (
    DO_CONV,
    DO_DCONV,
    DO_GCONV,
    FEATURE,
    KERNEL,
    DoConvParams,
    fold_kernel,
    he_normal,
    init_params,
)
from .tensor import extract_patches, scatter_patches


class Layer:
    kind = "layer"

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": self.kind}


class Conv(Layer):
    """Plain or grouped convolution with kernel ``[C_out, M*N, C_in/G]``.

    ``origin`` and ``do_geom`` record the DO layer this one was folded from,
    if any.
    """

    kind = "conv"

    def __init__(self, geom: ConvGeometry, w, bias=None, origin=None, do_geom=None):
        super().__init__()
        if tuple(w.shape) != geom.kernel_shape():
            raise ShapeError(f"kernel shape {w.shape} != {geom.kernel_shape()}")
        self.geom, self.w, self.bias = geom, w, bias
        self.origin, self.do_geom = origin, do_geom

    @property
    def params(self):
        p = {"w": self.w}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x):
        self._x_shape = x.shape
        self._patches = extract_patches(x, self.geom)
        out = grouped_matmul(self._patches, self.w, self.geom.groups)
        return _add_bias(out, self.bias, self.geom.c_out)

    def backward(self, grad):
        gp, self.grads["w"] = grouped_matmul_backward(
            self._patches, self.w, self.geom.groups, grad
        )
        if self.bias is not None:
            self.grads["bias"] = bias_backward(grad)
        return scatter_patches(gp, self._x_shape, self.geom)

    def describe(self):
        return {"type": self.kind, "geometry": self.geom.__dict__, "folded_from": self.origin}


class DepthwiseConv(Conv):
    """Depthwise convolution with kernel ``[M*N, D_mul, C_in]``."""

    kind = "dconv"

    def __init__(self, geom: ConvGeometry, w, bias=None, origin=None, do_geom=None):
        Layer.__init__(self)
        if tuple(w.shape) != geom.depthwise_shape():
            raise ShapeError(f"depthwise kernel shape {w.shape} != {geom.depthwise_shape()}")
        self.geom, self.w, self.bias = geom, w, bias
        self.origin, self.do_geom = origin, do_geom

    def forward(self, x):
        self._x_shape = x.shape
        self._patches = extract_patches(x, self.geom)
        out = depthwise_apply(self._patches, self.w)
        return _add_bias(out, self.bias, self.geom.c_in * self.geom.d_mul)

    def backward(self, grad):
        gp, self.grads["w"] = depthwise_apply_backward(self._patches, self.w, grad)
        if self.bias is not None:
            self.grads["bias"] = bias_backward(grad)
        return scatter_patches(gp, self._x_shape, self.geom)


class DOConv(Layer):
    """Any DO layer kind, trained through either composition mode."""

    def __init__(self, p: DoConvParams, mode: str = KERNEL):
        super().__init__()
        if mode not in (KERNEL, FEATURE):
            raise UnsupportedConfigError(f"unknown composition mode {mode!r}")
        self.p, self.mode = p, mode

    @property
    def kind(self):
        return {DO_CONV: "doconv", DO_GCONV: "doconv", DO_DCONV: "dodconv"}[self.p.kind]

    @property
    def geom(self):
        return self.p.geom

    @property
    def params(self):
        p = {"w": self.p.w}
        if self.p.d_res is not None:
            p["d_res"] = self.p.d_res
        if self.p.bias is not None:
            p["bias"] = self.p.bias
        return p

    def _apply(self, patches, w):
        if self.p.kind == DO_DCONV:
            return depthwise_apply(patches, w)
        return grouped_matmul(patches, w, self.p.geom.groups)

    def _apply_backward(self, patches, w, grad):
        if self.p.kind == DO_DCONV:
            return depthwise_apply_backward(patches, w, grad)
        return grouped_matmul_backward(patches, w, self.p.geom.groups, grad)

    def forward(self, x):
        p = self.p
        self._x_shape = x.shape
        self._patches = extract_patches(x, p.geom)
        self._d = p.d
        if self.mode == KERNEL:
            self._folded = fold_kernel(p)
            out = self._apply(self._patches, self._folded)
        else:
            self._transformed = np.einsum("...jc,jkc->...kc", self._patches, self._d)
            out = self._apply(self._transformed, p.w)
        return _add_bias(out, p.bias, p.geom.c_out)

    def backward(self, grad):
        p = self.p
        if self.mode == KERNEL:
            gp, gf = self._apply_backward(self._patches, self._folded, grad)
            gd, self.grads["w"] = fold_backward(self._d, p.w, p.kind, p.geom.groups, gf)
        else:
            gt, self.grads["w"] = self._apply_backward(self._transformed, p.w, grad)
            lead = gt.shape[:-2]
            rows = int(np.prod(lead)) if lead else 1
            gt2 = gt.reshape(rows, *gt.shape[-2:])
            pt2 = self._patches.reshape(rows, *self._patches.shape[-2:])
            gd = np.einsum("rjc,rkc->jkc", pt2, gt2, optimize=True)
            gp = np.einsum("...kc,jkc->...jc", gt, self._d)
        if p.d_res is not None:
            self.grads["d_res"] = gd
        if p.bias is not None:
            self.grads["bias"] = bias_backward(grad)
        return scatter_patches(gp, self._x_shape, p.geom)

    def folded(self) -> Conv:
        """Inference-time replacement holding ``W'`` (bias is carried over)."""
        w = fold_kernel(self.p)
        bias = None if self.p.bias is None else self.p.bias.copy()
        if self.p.kind == DO_DCONV:
            return DepthwiseConv(self.p.folded_geometry(), w, bias, self.p.kind, self.p.geom)
        return Conv(self.p.folded_geometry(), w, bias, self.p.kind, self.p.geom)

    def describe(self):
        return {"type": self.kind, "do_kind": self.p.kind, "geometry": self.geom.__dict__}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0).astype(grad.dtype, copy=False)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; an odd trailing row/column is dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """

    kind = "maxpool"

    def forward(self, x):
        B, H, W, C = x.shape
        Ho, Wo = H // 2, W // 2
        self._in_shape = x.shape
        win = x[:, : 2 * Ho, : 2 * Wo].reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(B, Ho, Wo, C, 4)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        B, H, W, C = self._in_shape
        Ho, Wo = H // 2, W // 2
        g = np.zeros((B, Ho, Wo, C, 4), dtype=grad.dtype)
        np.put_along_axis(g, self._arg[..., None], grad[..., None], axis=-1)
        g = g.reshape(B, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * Ho, 2 * Wo, C)
        out = np.zeros(self._in_shape, dtype=grad.dtype)
        out[:, : 2 * Ho, : 2 * Wo] = g
        return out


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, w, bias=None):
        super().__init__()
        self.w, self.bias = w, bias

    @property
    def params(self):
        p = {"w": self.w}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x):
        self._x = x
        out = x @ self.w
        return out if self.bias is None else out + self.bias

    def backward(self, grad):
        self.grads["w"] = self._x.T @ grad
        if self.bias is not None:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.w.T

    def describe(self):
        return {"type": self.kind, "in": self.w.shape[0], "units": self.w.shape[1]}


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# --- network description -------------------------------------------------

LAYER_TYPES = ("conv", "doconv", "dconv", "dodconv", "relu", "maxpool", "flatten", "dense", "softmax_ce")

_LAYER_KEYS = {
    "conv": {"type", "filters", "kernel", "stride", "pad", "groups", "bias"},
    "doconv": {"type", "filters", "kernel", "stride", "pad", "groups", "bias", "d_mul"},
    "dconv": {"type", "multiplier", "kernel", "stride", "pad", "bias"},
    "dodconv": {"type", "multiplier", "kernel", "stride", "pad", "bias", "d_mul"},
    "relu": {"type"},
    "maxpool": {"type"},
    "flatten": {"type"},
    "dense": {"type", "units", "bias"},
    "softmax_ce": {"type"},
}


def _kernel_hw(desc):
    k = desc.get("kernel", 3)
    return (k, k) if isinstance(k, int) else tuple(k)


@dataclass
class NetworkSpec:
    """Ordered layer descriptors ending in a single ``softmax_ce`` head.

    Descriptors are small dicts, e.g. ``{"type": "conv", "filters": 8,
    "kernel": 3, "pad": 1}``. Shapes are checked by :meth:`shapes`.
    """

    input_shape: tuple[int, int, int]
    layers: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if not self.layers or self.layers[-1].get("type") != "softmax_ce":
            raise ShapeError("network must end with exactly one softmax_ce head")
        for i, desc in enumerate(self.layers):
            t = desc.get("type")
            if t not in _LAYER_KEYS:
                raise ShapeError(f"layer {i}: unknown type {t!r}")
            extra = set(desc) - _LAYER_KEYS[t]
            if extra:
                raise ShapeError(f"layer {i} ({t}): unknown keys {sorted(extra)}")
            if t == "softmax_ce" and i != len(self.layers) - 1:
                raise ShapeError("softmax_ce must be the last layer")
        self.shapes()

    def geometry(self, desc: dict, c_in: int) -> ConvGeometry:
        M, N = _kernel_hw(desc)
        common = dict(M=M, N=N, c_in=c_in, stride=desc.get("stride", 1), pad=desc.get("pad", 0))
        t = desc["type"]
        if t in ("conv", "doconv"):
            d_mul = (desc.get("d_mul") or M * N) if t == "doconv" else 1
            return ConvGeometry(c_out=desc["filters"], groups=desc.get("groups", 1), d_mul=d_mul, **common)
        mult = desc.get("multiplier", 1)
        if t == "dconv":
            return ConvGeometry(c_out=c_in * mult, d_mul=mult, **common)
        return ConvGeometry(c_out=c_in * mult, d_mul=desc.get("d_mul") or M * N, **common)

    def shapes(self) -> list[tuple]:
        """Output shape (without batch axis) after every layer."""
        shape = self.input_shape
        out = []
        for i, desc in enumerate(self.layers):
            t = desc["type"]
            if t in ("conv", "doconv", "dconv", "dodconv"):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} ({t}) needs a [H,W,C] input, got {shape}")
                g = self.geometry(desc, shape[2])
                Ho, Wo = g.output_hw(shape[0], shape[1])
                if Ho < 1 or Wo < 1:
                    raise ShapeError(f"layer {i} ({t}) shrinks the map to nothing")
                shape = (Ho, Wo, g.c_out)
            elif t == "maxpool":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ShapeError(f"layer {i}: cannot pool shape {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif t == "flatten":
                shape = (int(np.prod(shape)),)
            elif t == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (desc["units"],)
            elif t == "softmax_ce" and len(shape) != 1:
                raise ShapeError("softmax_ce needs flat logits")
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def variant(self, name: str) -> "NetworkSpec":
        """``baseline`` as written, or ``doconv``: every non-1x1 conv becomes a DO layer.

        1x1 convolutions stay plain: there is no spatial patch to act on.
        """
        if name == "baseline":
            return NetworkSpec(self.input_shape, [dict(d) for d in self.layers])
        if name != "doconv":
            raise UnsupportedConfigError(f"unknown variant {name!r}")
        layers = []
        for d in self.layers:
            d = dict(d)
            M, N = _kernel_hw(d)
            if d["type"] in ("conv", "dconv") and M * N > 1:
                d["type"] = "doconv" if d["type"] == "conv" else "dodconv"
            layers.append(d)
        return NetworkSpec(self.input_shape, layers)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(d) for d in self.layers]}


REFERENCE_LAYERS = [
    {"type": "conv", "filters": 8, "kernel": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "conv", "filters": 16, "kernel": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "flatten"},
    {"type": "dense", "units": 10},
    {"type": "softmax_ce"},
]


def reference_spec(input_shape=(28, 28, 1)) -> NetworkSpec:
    """Two 3x3 convolutions, each followed by ReLU and 2x2 pooling, then a dense head."""
    return NetworkSpec(input_shape, [dict(d) for d in REFERENCE_LAYERS])


class Network:
    def __init__(self, layers: list[Layer], input_shape, spec: NetworkSpec | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.spec = spec

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy, its parameter gradients, and the logits."""
        logits = self.forward(x)
        loss, g = softmax_cross_entropy(logits, labels)
        self.backward(g)
        return loss, self.grads(), logits

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def do_layers(self) -> list[tuple[int, DOConv]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, DOConv)]

    def set_mode(self, mode: str) -> None:
        for _, layer in self.do_layers():
            layer.mode = mode

    def fold(self) -> "Network":
        """Inference network where every DO layer is replaced by its folded kernel.

        Non-DO layers are shared with ``self``.
        """
        layers = [l.folded() if isinstance(l, DOConv) else l for l in self.layers]
        return Network(layers, self.input_shape, self.spec)

    @property
    def dtype(self):
        params = self.params()
        return next(iter(params.values())).dtype if params else np.dtype(np.float64)

    @property
    def is_folded(self) -> bool:
        return not self.do_layers()

    def predict(self, x, batch_size: int = 500):
        return np.concatenate(
            [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        )


def build_network(
    spec: NetworkSpec,
    rng: np.random.Generator,
    d_rng: np.random.Generator | None = None,
    dtype=np.float64,
    d_init: str = "identity",
    mode: str = KERNEL,
) -> Network:
    """Instantiate ``spec`` drawing kernels in layer order from ``rng``.

    A DO layer with ``D_mul = M*N`` consumes exactly the draws the plain
    layer it replaces would, so baseline and DO networks built from equal
    generator states share every ``W``. Biases start at zero.
    """
    layers: list[Layer] = []
    shape = spec.input_shape
    for desc, out_shape in zip(spec.layers, spec.shapes()):
        t = desc["type"]
        bias = desc.get("bias", True)
        if t in ("conv", "dconv", "doconv", "dodconv"):
            g = spec.geometry(desc, shape[2])
            b = np.zeros(g.c_out, dtype=dtype) if bias else None
            if t == "conv":
                layers.append(Conv(g, he_normal(rng, g.kernel_shape(), g.MN * g.c_in // g.groups, dtype), b))
            elif t == "dconv":
                layers.append(DepthwiseConv(g, he_normal(rng, g.depthwise_shape(), g.MN, dtype), b))
            else:
                kind = DO_DCONV if t == "dodconv" else (DO_GCONV if g.groups > 1 else DO_CONV)
                p = init_params(g, rng, kind, d_init, dtype, d_rng=d_rng)
                p.bias = b
                layers.append(DOConv(p, mode))
        elif t == "relu":
            layers.append(ReLU())
        elif t == "maxpool":
            layers.append(MaxPool2())
        elif t == "flatten":
            layers.append(Flatten())
        elif t == "dense":
            w = he_normal(rng, (shape[0], desc["units"]), shape[0], dtype)
            layers.append(Dense(w, np.zeros(desc["units"], dtype=dtype) if bias else None))
        shape = out_shape
    return Network(layers, spec.input_shape, spec)
