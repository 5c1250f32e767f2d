"""Loop-level reference implementations used as test oracles.

Written straight from the defining sums with explicit index arithmetic;
none of them uses the package's patch extraction or einsum paths.
"""

import numpy as np


def padded_value(x, r, c, ch, pad):
    H, W = x.shape[0], x.shape[1]
    r, c = r - pad, c - pad
    if 0 <= r < H and 0 <= c < W:
        return x[r, c, ch]
    return 0.0


def out_hw(H, W, M, N, stride, pad):
    return (H + 2 * pad - M) // stride + 1, (W + 2 * pad - N) // stride + 1


def conv(x, k, M, N, stride=1, pad=0, groups=1):
    """k: [C_out, M*N, C_in/G]; x: [H, W, C_in]."""
    H, W, C = x.shape
    c_out, _, cg = k.shape
    og = c_out // groups
    Ho, Wo = out_hw(H, W, M, N, stride, pad)
    out = np.zeros((Ho, Wo, c_out))
    for h in range(Ho):
        for w in range(Wo):
            for o in range(c_out):
                g = o // og
                s = 0.0
                for m in range(M):
                    for n in range(N):
                        for l in range(cg):
                            s += k[o, m * N + n, l] * padded_value(x, h * stride + m, w * stride + n, g * cg + l, pad)
                out[h, w, o] = s
    return out


def depthwise(x, k, M, N, stride=1, pad=0):
    """k: [M*N, D, C]; output channel c*D + d."""
    H, W, C = x.shape
    _, D, _ = k.shape
    Ho, Wo = out_hw(H, W, M, N, stride, pad)
    out = np.zeros((Ho, Wo, C * D))
    for h in range(Ho):
        for w in range(Wo):
            for c in range(C):
                for d in range(D):
                    s = 0.0
                    for m in range(M):
                        for n in range(N):
                            s += k[m * N + n, d, c] * padded_value(x, h * stride + m, w * stride + n, c, pad)
                    out[h, w, c * D + d] = s
    return out


def fold(D, W, groups=1):
    """W'[o, j, l] = sum_k D[j, k, g(o)*Cg + l] W[o, k, l]."""
    mn, dm, _ = D.shape
    c_out, _, cg = W.shape
    og = c_out // groups
    out = np.zeros((c_out, mn, cg))
    for o in range(c_out):
        for j in range(mn):
            for l in range(cg):
                out[o, j, l] = sum(D[j, k, (o // og) * cg + l] * W[o, k, l] for k in range(dm))
    return out


def fold_depthwise(D, W):
    """W'[j, e, c] = sum_k D[j, k, c] W[k, e, c]."""
    mn, dm, C = D.shape
    _, E, _ = W.shape
    out = np.zeros((mn, E, C))
    for j in range(mn):
        for e in range(E):
            for c in range(C):
                out[j, e, c] = sum(D[j, k, c] * W[k, e, c] for k in range(dm))
    return out
