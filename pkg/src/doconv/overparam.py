"""Depthwise over-parameterized convolution (DO-Conv and its variants).

A DO layer holds two trainable tensors: a depthwise kernel ``D`` of shape
``[M*N, D_mul, C_in]`` and a conventional kernel ``W``. ``D`` is never stored
directly; the trainable quantity is the residual ``D' = D - I`` where ``I`` is
the (block) identity from :func:`identity_fill`, so ``D' = 0`` makes the layer
compute exactly what a plain layer with kernel ``W`` computes.

Three kinds are supported:

``do-conv``
    ``W: [C_out, D_mul, C_in]``, folds to a ``[C_out, M*N, C_in]`` kernel.
``do-gconv``
    grouped variant, ``W: [C_out, D_mul, C_in/G]``.
``do-dconv``
    over a depthwise layer, ``W: [D_mul, Dw_mul, C_in]``, folds to a
    ``[M*N, Dw_mul, C_in]`` depthwise kernel; ``c_out = C_in * Dw_mul``.

Both execution orders are provided: *feature composition* transforms each
patch by ``D`` and then applies ``W``; *kernel composition* folds ``D`` into
``W`` once and runs a single convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import (
    ConvGeometry,
    _add_bias,
    depthwise_apply,
    depthwise_forward,
    grouped_conv_forward,
    grouped_matmul,
)
from .errors import ShapeError, UnsupportedConfigError
from .tensor import extract_patches

DO_CONV = "do-conv"
DO_GCONV = "do-gconv"
DO_DCONV = "do-dconv"
KINDS = (DO_CONV, DO_GCONV, DO_DCONV)

FEATURE = "feature"
KERNEL = "kernel"


def identity_fill(mn: int, d_mul: int, c_in: int, dtype=np.float64) -> np.ndarray:
    """Per-channel ``[I | I | ... | leading columns of I]`` of shape ``[mn, d_mul, c_in]``.

    With ``d_mul < mn`` only the first ``d_mul`` columns of one identity
    block are kept.
    """
    if mn < 1 or d_mul < 1 or c_in < 1:
        raise ShapeError(f"identity_fill needs positive sizes, got {(mn, d_mul, c_in)}")
    out = np.zeros((mn, d_mul, c_in), dtype=dtype)
    k = np.arange(d_mul)
    out[k % mn, k, :] = 1
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class DoConvParams:
    """Trainable state of one DO layer.

    ``separable=True`` admits ``D_mul < M*N`` (the depthwise-separable
    regime). ``d_res`` may be ``None`` only for a 1x1 layer with
    ``D_mul = 1``, where over-parameterization has nothing to act on.
    """

    d_res: np.ndarray | None
    w: np.ndarray
    geom: ConvGeometry
    kind: str = DO_CONV
    bias: np.ndarray | None = None
    separable: bool = False
    _fill: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        g = self.geom
        if self.kind not in KINDS:
            raise UnsupportedConfigError(f"unknown DO layer kind {self.kind!r}")
        if self.kind == DO_CONV and g.groups != 1:
            raise UnsupportedConfigError("do-conv requires groups=1; use do-gconv")
        if g.MN > 1 and g.d_mul < g.MN and not self.separable:
            raise UnsupportedConfigError(
                f"D_mul={g.d_mul} < M*N={g.MN}: the composite kernel cannot span "
                "all convolutions (pass separable=True to allow it)"
            )
        if self.d_res is None:
            if g.MN != 1 or g.d_mul != 1:
                raise ShapeError("d_res may only be omitted for 1x1 layers with D_mul=1")
        elif tuple(self.d_res.shape) != g.depthwise_shape():
            raise ShapeError(f"D' has shape {self.d_res.shape}, expected {g.depthwise_shape()}")
        if tuple(self.w.shape) != self.w_shape(g, self.kind):
            raise ShapeError(f"W has shape {self.w.shape}, expected {self.w_shape(g, self.kind)}")

    @staticmethod
    def w_shape(g: ConvGeometry, kind: str) -> tuple[int, int, int]:
        if kind == DO_DCONV:
            if g.c_out % g.c_in:
                raise ShapeError("do-dconv needs c_out to be a multiple of c_in")
            return (g.d_mul, g.c_out // g.c_in, g.c_in)
        return (g.c_out, g.d_mul, g.c_in // g.groups)

    @property
    def dw_mul(self) -> int:
        return self.geom.c_out // self.geom.c_in

    @property
    def identity(self) -> np.ndarray:
        if self._fill is None or self._fill.dtype != self.w.dtype:
            g = self.geom
            self._fill = identity_fill(g.MN, g.d_mul, g.c_in, dtype=self.w.dtype)
        return self._fill

    @property
    def d(self) -> np.ndarray:
        """Effective depthwise kernel ``D' + I``."""
        if self.d_res is None:
            return self.identity
        return self.d_res + self.identity

    def folded_geometry(self) -> ConvGeometry:
        """Geometry of the single layer this one folds into."""
        if self.kind == DO_DCONV:
            return self.geom.with_(d_mul=self.dw_mul, groups=1)
        return self.geom.with_(d_mul=1)


def fold_weights(d: np.ndarray, w: np.ndarray, kind: str, groups: int = 1) -> np.ndarray:
    """Compose ``D`` into ``W`` (kernel composition)."""
    if kind == DO_DCONV:
        # W'[j, e, c] = sum_k D[j, k, c] W[k, e, c]
        return np.einsum("jkc,kec->jec", d, w)
    mn, d_mul, c_in = d.shape
    c_out, _, cg = w.shape
    dg = d.reshape(mn, d_mul, groups, cg)
    wg = w.reshape(groups, c_out // groups, d_mul, cg)
    # W'[o, j, l] = sum_k D[j, k, lambda(o, l)] W[o, k, l]
    return np.einsum("jkgl,gokl->gojl", dg, wg).reshape(c_out, mn, cg)


def fold_kernel(p: DoConvParams) -> np.ndarray:
    """The single inference kernel ``W'`` equivalent to ``(D, W)``."""
    return fold_weights(p.d, p.w, p.kind, p.geom.groups)


def doconv_forward_feature(p: DoConvParams, x: np.ndarray) -> np.ndarray:
    """Feature composition: ``W * (D o P)`` at every window."""
    patches = extract_patches(x, p.geom)
    transformed = np.einsum("...jc,jkc->...kc", patches, p.d)
    if p.kind == DO_DCONV:
        out = depthwise_apply(transformed, p.w)
    else:
        out = grouped_matmul(transformed, p.w, p.geom.groups)
    return _add_bias(out, p.bias, p.geom.c_out)


def run_folded(kernel: np.ndarray, x: np.ndarray, geom: ConvGeometry, kind: str, bias=None):
    """Run a folded kernel through the matching plain layer."""
    if kind == DO_DCONV:
        return depthwise_forward(x, kernel, geom, bias)
    return grouped_conv_forward(x, kernel, geom, bias)


def doconv_forward_kernel(p: DoConvParams, x: np.ndarray) -> np.ndarray:
    """Kernel composition: fold once, then one plain convolution."""
    return run_folded(fold_kernel(p), x, p.folded_geometry(), p.kind, p.bias)


def doconv_forward(p: DoConvParams, x: np.ndarray, mode: str = KERNEL) -> np.ndarray:
    if mode == KERNEL:
        return doconv_forward_kernel(p, x)
    if mode == FEATURE:
        return doconv_forward_feature(p, x)
    raise UnsupportedConfigError(f"unknown composition mode {mode!r}")


def dodconv_forward(p: DoConvParams, x: np.ndarray, mode: str = KERNEL) -> np.ndarray:
    if p.kind != DO_DCONV:
        raise UnsupportedConfigError(f"dodconv_forward needs a do-dconv layer, got {p.kind}")
    return doconv_forward(p, x, mode)


def init_params(
    geom: ConvGeometry,
    rng: np.random.Generator,
    kind: str = DO_CONV,
    d_init: str = "identity",
    dtype=np.float64,
    bias: bool = False,
    separable: bool = False,
    d_rng: np.random.Generator | None = None,
) -> DoConvParams:
    """Fresh DO layer: He-scaled ``W`` and either ``D' = 0`` or a He-random ``D``.

    ``W`` is drawn first from ``rng`` so that, when ``D_mul = M*N``, a plain
    layer initialised from the same generator state gets the same kernel.
    A random ``D`` comes from ``d_rng`` (default: ``rng``); pass a separate
    generator to keep the ``W`` stream identical to a baseline network's.
    """
    w_shape = DoConvParams.w_shape(geom, kind)
    fan_in = w_shape[1] * w_shape[2] if kind != DO_DCONV else w_shape[0]
    w = he_normal(rng, w_shape, fan_in, dtype)
    if geom.MN == 1 and geom.d_mul == 1:
        d_res = None
    elif d_init == "identity":
        d_res = np.zeros(geom.depthwise_shape(), dtype=dtype)
    elif d_init == "random":
        d = (rng if d_rng is None else d_rng).standard_normal(geom.depthwise_shape()) * np.sqrt(2.0 / geom.MN)
        d_res = (d - identity_fill(geom.MN, geom.d_mul, geom.c_in)).astype(dtype)
    else:
        raise UnsupportedConfigError(f"unknown D initialisation {d_init!r}")
    b = np.zeros(geom.c_out, dtype=dtype) if bias else None
    return DoConvParams(d_res, w, geom, kind, b, separable)


@dataclass
class MaccReport:
    mode: str
    steps: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(c for _, c in self.steps)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "steps": [{"step": s, "macc": c} for s, c in self.steps],
            "total": self.total,
        }


def macc_estimate(geom: ConvGeometry, mode: str, H: int, W: int) -> MaccReport:
    """Multiply-accumulate counts for one training-time forward pass.

    ``H x W`` is the output map size; only ``stride = 1`` is modelled.
    """
    if geom.stride != 1:
        raise UnsupportedConfigError("MACC model assumes stride 1")
    if H < 1 or W < 1:
        raise ShapeError("feature map must be at least 1x1")
    mn, dm, cin, cout = geom.MN, geom.d_mul, geom.c_in // geom.groups, geom.c_out
    hw = H * W
    if mode == FEATURE:
        steps = [
            ("P' = D o P", dm * mn * geom.c_in * hw),
            ("O = W * P'", cout * cin * hw * dm),
        ]
    elif mode == KERNEL:
        steps = [
            ("W' = D^T o W", dm * mn * cin * cout),
            ("O = W' * P", cout * cin * hw * mn),
        ]
    else:
        raise UnsupportedConfigError(f"unknown composition mode {mode!r}")
    return MaccReport(mode, steps)


def conv_macc(geom: ConvGeometry, H: int, W: int) -> int:
    """Cost of a plain convolution, which is also the cost of a folded DO layer."""
    return geom.c_out * (geom.c_in // geom.groups) * H * W * geom.MN


def kernel_delta_H(p: DoConvParams) -> np.ndarray:
    """``H[m, n] = sum over (C_out, C_in) of |W' - W|`` at spatial offset ``(m, n)``."""
    g = p.geom
    if p.kind != DO_CONV or g.d_mul != g.MN:
        raise UnsupportedConfigError("kernel delta needs a do-conv layer with D_mul = M*N")
    diff = np.abs(fold_kernel(p) - p.w)
    return diff.sum(axis=(0, 2)).reshape(g.M, g.N)
