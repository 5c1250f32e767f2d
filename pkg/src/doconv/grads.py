"""Reverse-mode adjoints of the convolution operators and of kernel folding."""

from __future__ import annotations

import numpy as np

from .conv import ConvGeometry, _check
from .overparam import DO_DCONV, DoConvParams, fold_kernel
from .tensor import extract_patches, scatter_patches


def grouped_matmul_backward(patches, kernel, groups, upstream):
    """Gradients of :func:`conv.grouped_matmul` w.r.t. patches and kernel."""
    *lead, K, C = patches.shape
    c_out = kernel.shape[0]
    cg, og = C // groups, c_out // groups
    rows = int(np.prod(lead)) if lead else 1
    up = upstream.reshape(rows, c_out)
    grad_k = np.empty_like(kernel)
    grad_p = np.empty((rows, K, C), dtype=np.result_type(patches, kernel))
    for g in range(groups):
        pg = patches[..., g * cg : (g + 1) * cg].reshape(rows, K * cg)
        ug = up[:, g * og : (g + 1) * og]
        wg = kernel[g * og : (g + 1) * og].reshape(og, K * cg)
        grad_k[g * og : (g + 1) * og] = (ug.T @ pg).reshape(og, K, cg)
        grad_p[:, :, g * cg : (g + 1) * cg] = (ug @ wg).reshape(rows, K, cg)
    return grad_p.reshape(*lead, K, C), grad_k


def depthwise_apply_backward(patches, kernel, upstream):
    """Gradients of :func:`conv.depthwise_apply` w.r.t. patches and kernel."""
    K, D, C = kernel.shape
    up = upstream.reshape(*upstream.shape[:-1], C, D)
    lead = up.shape[:-2]
    rows = int(np.prod(lead)) if lead else 1
    up2 = up.reshape(rows, C, D)
    p2 = patches.reshape(rows, K, C)
    grad_k = np.einsum("rcd,ric->idc", up2, p2, optimize=True)
    grad_p = np.einsum("rcd,idc->ric", up2, kernel, optimize=True)
    return grad_p.reshape(*lead, K, C), grad_k


def bias_backward(upstream):
    return upstream.reshape(-1, upstream.shape[-1]).sum(axis=0)


def grouped_conv_backward(x, k, geom: ConvGeometry, upstream):
    """Returns ``(grad_x, grad_k)`` for :func:`conv.grouped_conv_forward`."""
    _check(k, geom.kernel_shape(), "kernel")
    patches = extract_patches(x, geom)
    _check(upstream, patches.shape[:-2] + (geom.c_out,), "upstream gradient")
    grad_p, grad_k = grouped_matmul_backward(patches, k, geom.groups, upstream)
    return scatter_patches(grad_p, x.shape, geom), grad_k


conv_backward = grouped_conv_backward


def depthwise_backward(x, k, geom: ConvGeometry, upstream):
    """Returns ``(grad_x, grad_k)`` for :func:`conv.depthwise_forward`."""
    _check(k, geom.depthwise_shape(), "depthwise kernel")
    patches = extract_patches(x, geom)
    _check(upstream, patches.shape[:-2] + (geom.c_in * geom.d_mul,), "upstream gradient")
    grad_p, grad_k = depthwise_apply_backward(patches, k, upstream)
    return scatter_patches(grad_p, x.shape, geom), grad_k


def fold_backward(d, w, kind, groups, grad_folded):
    """Pull a gradient on ``W'`` back to ``(grad_D, grad_W)``."""
    if kind == DO_DCONV:
        grad_d = np.einsum("jec,kec->jkc", grad_folded, w)
        grad_w = np.einsum("jec,jkc->kec", grad_folded, d)
        return grad_d, grad_w
    mn, d_mul, c_in = d.shape
    c_out, _, cg = w.shape
    og = c_out // groups
    dg = d.reshape(mn, d_mul, groups, cg)
    wg = w.reshape(groups, og, d_mul, cg)
    gf = grad_folded.reshape(groups, og, mn, cg)
    grad_w = np.einsum("gojl,jkgl->gokl", gf, dg).reshape(w.shape)
    grad_d = np.einsum("gojl,gokl->jkgl", gf, wg).reshape(d.shape)
    return grad_d, grad_w


def doconv_backward(p: DoConvParams, x, upstream) -> dict[str, np.ndarray]:
    """Gradients of a DO layer (any kind) computed through kernel composition.

    Keys: ``x``, ``w``, ``d_res`` (absent for 1x1 layers without ``D'``) and
    ``bias`` when the layer has one. The identity part of ``D`` is constant,
    so the gradient on ``D'`` equals the gradient on ``D``.
    """
    folded = fold_kernel(p)
    fgeom = p.folded_geometry()
    if p.kind == DO_DCONV:
        grad_x, grad_f = depthwise_backward(x, folded, fgeom, upstream)
    else:
        grad_x, grad_f = grouped_conv_backward(x, folded, fgeom, upstream)
    grad_d, grad_w = fold_backward(p.d, p.w, p.kind, p.geom.groups, grad_f)
    out = {"x": grad_x, "w": grad_w}
    if p.d_res is not None:
        out["d_res"] = grad_d
    if p.bias is not None:
        out["bias"] = bias_backward(upstream)
    return out


dodconv_backward = doconv_backward
