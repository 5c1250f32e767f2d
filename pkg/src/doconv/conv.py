"""Reference convolution, depthwise convolution and grouped convolution.

Kernels follow the patch view used throughout the package:

* conventional / grouped kernel: ``[C_out, M*N, C_in/G]``
* depthwise kernel: ``[M*N, D_mul, C_in]``; output channel ``c * D_mul + d``

Bias is an optional per-output-channel vector added after the sum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import GeometryError, ShapeError
from .tensor import extract_patches, output_size


@dataclass(frozen=True)
class ConvGeometry:
    M: int
    N: int
    c_in: int
    c_out: int
    stride: int = 1
    pad: int = 0
    groups: int = 1
    d_mul: int = 1

    def __post_init__(self):
        for name in ("M", "N", "c_in", "c_out", "stride", "groups", "d_mul"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pad < 0:
            raise GeometryError(f"pad must be >= 0, got {self.pad}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise GeometryError(
                f"channels ({self.c_in} in, {self.c_out} out) not divisible by {self.groups} groups"
            )

    @property
    def MN(self) -> int:
        return self.M * self.N

    def output_hw(self, H: int, W: int) -> tuple[int, int]:
        return (
            output_size(H, self.M, self.stride, self.pad),
            output_size(W, self.N, self.stride, self.pad),
        )

    def kernel_shape(self) -> tuple[int, int, int]:
        return (self.c_out, self.MN, self.c_in // self.groups)

    def depthwise_shape(self) -> tuple[int, int, int]:
        return (self.MN, self.d_mul, self.c_in)

    def with_(self, **changes) -> "ConvGeometry":
        return replace(self, **changes)


def _check(arr, shape, what):
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{what} has shape {arr.shape}, expected {shape}")


def _add_bias(out, bias, c_out):
    if bias is None:
        return out
    _check(bias, (c_out,), "bias")
    return out + bias


def grouped_matmul(patches: np.ndarray, kernel: np.ndarray, groups: int) -> np.ndarray:
    """Apply ``[C_out, K, C_in/G]`` kernels to patches ``[..., K, C_in]``.

    The patch axis ``K`` is whatever the kernel's middle axis indexes
    (spatial offsets for a plain convolution, depth multipliers for the
    feature-composition path).
    """
    *lead, K, C = patches.shape
    c_out = kernel.shape[0]
    cg, og = C // groups, c_out // groups
    rows = int(np.prod(lead)) if lead else 1
    outs = []
    for g in range(groups):
        pg = patches[..., g * cg : (g + 1) * cg].reshape(rows, K * cg)
        wg = kernel[g * og : (g + 1) * og].reshape(og, K * cg)
        outs.append(pg @ wg.T)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=-1)
    return out.reshape(*lead, c_out)


def grouped_conv_forward(x, k, geom: ConvGeometry, bias=None) -> np.ndarray:
    """Grouped convolution; group ``g`` sees only its own contiguous channel slice."""
    _check(k, geom.kernel_shape(), "kernel")
    patches = extract_patches(x, geom)
    return _add_bias(grouped_matmul(patches, k, geom.groups), bias, geom.c_out)


def conv_forward(x, k, geom: ConvGeometry, bias=None) -> np.ndarray:
    """Conventional convolution: ``O_c = sum_i W[c, i] * P[i]`` at every window."""
    if geom.groups != 1:
        raise GeometryError("conv_forward is the ungrouped path; use grouped_conv_forward")
    return grouped_conv_forward(x, k, geom, bias)


def depthwise_apply(patches: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-channel transform of patches ``[..., K, C]`` by ``[K, D, C]``.

    Returns ``[..., C * D]`` with the multipliers of each input channel
    contiguous.
    """
    out = np.einsum("...ic,idc->...cd", patches, k)
    return out.reshape(*out.shape[:-2], -1)


def depthwise_forward(x, k, geom: ConvGeometry, bias=None) -> np.ndarray:
    """Depthwise convolution: ``O[d, c] = sum_i W[i, d, c] * P[i, c]``."""
    _check(k, geom.depthwise_shape(), "depthwise kernel")
    patches = extract_patches(x, geom)
    return _add_bias(depthwise_apply(patches, k), bias, geom.c_in * geom.d_mul)
