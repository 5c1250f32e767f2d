"""Two ways to run a DO-Conv layer, and folding it away for inference."""
import numpy as np

from doconv import ConvGeometry, DOConv, doconv_forward, fold_kernel, init_params

rng = np.random.default_rng(0)

# A 3x3 layer, 4 -> 8 channels, with a depth multiplier larger than M*N
geom = ConvGeometry(3, 3, 4, 8, pad=1, d_mul=12)
p = init_params(geom, rng, d_init="random")
print("D' shape", p.d_res.shape, " W shape", p.w.shape)

x = rng.standard_normal((2, 10, 10, 4))

# feature composition transforms every patch with D, then applies W
feat = doconv_forward(p, x, "feature")
# kernel composition folds D into W first, then does a single convolution
kern = doconv_forward(p, x, "kernel")
print("output shape", feat.shape)
print("max |feature - kernel| =", np.abs(feat - kern).max())

# the folded kernel has the shape of a plain 3x3 kernel
w_folded = fold_kernel(p)
print("folded kernel shape", w_folded.shape)

plain = DOConv(p).folded()
print("plain layer matches:", np.allclose(plain.forward(x), feat, atol=1e-12, rtol=0))

# at identity init with D_mul = M*N nothing is composed yet
fresh = init_params(geom.with_(d_mul=9), rng)
print("identity init, max |W' - W| =", np.abs(fold_kernel(fresh) - fresh.w).max())
