"""Array primitives: checked reshape, axis swap and sliding-window patches.

Tensors are plain row-major ``numpy.ndarray`` objects. Feature maps are
channels-last, ``[H, W, C]`` or batched ``[B, H, W, C]``. Inside a patch the
spatial offset ``(m, n)`` is flattened to ``i = m * N + n``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import GeometryError, ShapeError


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    """Reshape keeping flat (C) order; no ``-1`` wildcards are accepted."""
    new_shape = tuple(int(d) for d in new_shape)
    if any(d < 1 for d in new_shape):
        raise ShapeError(f"extents must be >= 1, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.reshape(np.ascontiguousarray(t), new_shape)


def transpose_first_two(t: np.ndarray) -> np.ndarray:
    """``[A, B, C] -> [B, A, C]``."""
    if t.ndim != 3:
        raise ShapeError(f"expected a 3D tensor, got shape {t.shape}")
    return np.ascontiguousarray(t.transpose(1, 0, 2))


def output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def pad_map(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the two spatial axes of a batched map ``[B, H, W, C]``."""
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"feature map must be [H,W,C] or [B,H,W,C], got {x.shape}")


def extract_patches(x: np.ndarray, geom) -> np.ndarray:
    """Collect every sliding-window patch of ``x``.

    Returns ``[H', W', M*N, C]`` for an unbatched map and
    ``[B, H', W', M*N, C]`` for a batched one.
    """
    xb, single = _as_batch(x)
    M, N, s, p = geom.M, geom.N, geom.stride, geom.pad
    _, H, W, C = xb.shape
    if C != geom.c_in:
        raise ShapeError(f"input has {C} channels, geometry expects {geom.c_in}")
    Ho, Wo = output_size(H, M, s, p), output_size(W, N, s, p)
    if Ho < 1 or Wo < 1:
        raise GeometryError(
            f"{M}x{N} window does not fit a {H}x{W} map with pad {p}, stride {s}"
        )
    xp = pad_map(xb, p)
    # [B, H'', W'', C, M, N]; the stride is applied by slicing
    win = np.lib.stride_tricks.sliding_window_view(xp, (M, N), axis=(1, 2))
    win = win[:, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    patches = patches.reshape(xb.shape[0], Ho, Wo, M * N, C)
    return patches[0] if single else patches


def scatter_patches(grad_patches: np.ndarray, input_shape, geom) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: sum patch gradients back onto the map."""
    single = len(input_shape) == 3
    gp = grad_patches[None] if single else grad_patches
    B, Ho, Wo, _, C = gp.shape
    H, W = input_shape[-3], input_shape[-2]
    M, N, s, p = geom.M, geom.N, geom.stride, geom.pad
    out = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=gp.dtype)
    for m in range(M):
        for n in range(N):
            out[:, m : m + s * (Ho - 1) + 1 : s, n : n + s * (Wo - 1) + 1 : s] += gp[
                :, :, :, m * N + n
            ]
    if p:
        out = out[:, p : p + H, p : p + W]
    return out[0] if single else out
