"""Self-verification suite behind ``doconv check``.

Each check returns a :class:`CheckResult`; none of them touch the disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .conv import ConvGeometry, conv_forward
from .gradcheck import finite_diff_check
from .nn import NetworkSpec, build_network, softmax_cross_entropy
from .overparam import (
    DO_CONV,
    DO_DCONV,
    DO_GCONV,
    FEATURE,
    KERNEL,
    conv_macc,
    doconv_forward,
    fold_kernel,
    init_params,
    macc_estimate,
    run_folded,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_config(rng: np.random.Generator):
    """A random small DO layer (any kind, any D_mul regime) and a matching input."""
    M, N = (int(v) for v in rng.integers(1, 4, size=2))
    mn = M * N
    choices = [d for d in (mn - 1, mn, mn + 2, 2 * mn) if d > 0]
    d_mul = int(rng.choice(choices))
    c_in = int(rng.integers(1, 5))
    kind = rng.choice([DO_CONV, DO_GCONV, DO_DCONV])
    if kind == DO_DCONV:
        c_out, groups = c_in * int(rng.integers(1, 3)), 1
    elif kind == DO_GCONV:
        groups = c_in
        c_out = c_in * int(rng.integers(1, 3))
    else:
        c_out, groups = int(rng.integers(1, 5)), 1
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    geom = ConvGeometry(M, N, c_in, c_out, stride, pad, groups, d_mul)
    p = init_params(geom, rng, str(kind), d_init="random", bias=True, separable=True)
    p.bias[:] = rng.standard_normal(c_out)
    H, W = int(rng.integers(M, 7)), int(rng.integers(N, 7))
    x = rng.standard_normal((int(rng.integers(1, 3)), H, W, c_in))
    return p, x


def check_equivalence(n: int = 200, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        p, x = random_config(rng)
        diff = np.abs(doconv_forward(p, x, FEATURE) - doconv_forward(p, x, KERNEL)).max()
        worst = max(worst, float(diff))
    return CheckResult("composition equivalence", worst <= tol, f"{n} configs, max |feature - kernel| = {worst:.3e}")


def check_fold(n: int = 50, seed: int = 1, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, exact = 0.0, True
    for _ in range(n):
        p, x = random_config(rng)
        folded = fold_kernel(p)
        via_fold = run_folded(folded, x, p.folded_geometry(), p.kind, p.bias)
        exact &= bool(np.array_equal(via_fold, doconv_forward(p, x, KERNEL)))
        worst = max(worst, float(np.abs(via_fold - doconv_forward(p, x, FEATURE)).max()))
    ok = exact and worst <= tol
    return CheckResult("fold correctness", ok, f"bit-exact={exact}, max |folded - feature| = {worst:.3e}")


_TINY = [
    {"type": "conv", "filters": 3, "kernel": 3, "pad": 1},
    {"type": "relu"},
    {"type": "dconv", "multiplier": 2, "kernel": 2},
    {"type": "flatten"},
    {"type": "dense", "units": 4},
    {"type": "softmax_ce"},
]


def check_identity_init(seed: int = 2, tol: float = 1e-12) -> CheckResult:
    spec = NetworkSpec((6, 6, 2), _TINY)
    base = build_network(spec, np.random.default_rng(seed))
    do = build_network(spec.variant("doconv"), np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).standard_normal((4, 6, 6, 2))
    y = np.array([0, 1, 2, 3])
    lb, gb, ob = base.loss_and_grads(x, y)
    ld, gd, od = do.loss_and_grads(x, y)
    out = float(np.abs(ob - od).max())
    gw = max(float(np.abs(gb[k] - gd[k]).max()) for k in gb)
    ok = out <= tol and gw <= 1e-10
    return CheckResult("identity-init neutrality", ok, f"max |logits diff| = {out:.1e}, max |dW diff| = {gw:.1e}")


def check_gradients(seeds: int = 5, tol: float = 1e-5) -> CheckResult:
    spec = NetworkSpec(
        (5, 5, 2),
        [
            {"type": "doconv", "filters": 3, "kernel": 3, "pad": 1, "d_mul": 11},
            {"type": "dodconv", "multiplier": 2, "kernel": 2, "d_mul": 4},
            {"type": "flatten"},
            {"type": "dense", "units": 3},
            {"type": "softmax_ce"},
        ],
    )
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(100 + s)
        net = build_network(spec, rng, d_init="random")
        for v in net.params().values():
            v += 0.1 * rng.standard_normal(v.shape)
        x = rng.standard_normal((3, 5, 5, 2))
        y = rng.integers(0, 3, size=3)
        _, grads, _ = net.loss_and_grads(x, y)
        grads = {k: v.copy() for k, v in grads.items()}
        params = net.params()
        f = lambda: softmax_cross_entropy(net.forward(x), y)[0]  # noqa: E731
        for k, p in params.items():
            worst = max(worst, finite_diff_check(f, p, grads[k], rng=rng))
    return CheckResult("gradient correctness", worst <= tol, f"max relative error = {worst:.2e}")


def check_receptive_field(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(3, 3, 2, 3, d_mul=9)
    p = init_params(geom, rng, d_init="random")
    x = rng.standard_normal((6, 6, 2))
    changed = 0
    for mode in (FEATURE, KERNEL):
        base = doconv_forward(p, x, mode)
        for i in range(6):
            for j in range(6):
                for c in range(2):
                    xp = x.copy()
                    xp[i, j, c] += 1.0
                    delta = doconv_forward(p, xp, mode) - base
                    for h in range(4):
                        for w in range(4):
                            inside = h <= i < h + 3 and w <= j < w + 3
                            if not inside and np.any(delta[h, w] != 0):
                                changed += 1
    return CheckResult("receptive field isolation", changed == 0, f"{changed} outputs moved by out-of-window pixels")


def check_expressiveness() -> CheckResult:
    from .overparam import identity_fill

    ranks = {}
    for d_mul in (4, 3):
        d = identity_fill(4, d_mul, 1)[:, :, 0]
        ranks[d_mul] = int(np.linalg.matrix_rank(d))
    ok = ranks[4] == 4 and ranks[3] < 4
    return CheckResult("expressiveness boundary", ok, f"rank(D_mul=4) = {ranks[4]}, rank(D_mul=3) = {ranks[3]}")


def check_macc() -> CheckResult:
    ok = True
    for M, N, ci, co, dm, H, W in [(3, 3, 16, 32, 9, 8, 8), (3, 3, 3, 5, 11, 7, 7), (1, 3, 2, 2, 5, 4, 9)]:
        g = ConvGeometry(M, N, ci, co, d_mul=dm)
        # a plain convolution producing an H x W map does one product per tap per output
        plain = g.with_(d_mul=1)
        out = conv_forward(np.zeros((H + M - 1, W + N - 1, ci)), np.zeros(plain.kernel_shape()), plain)
        ok &= out.size * M * N * ci == conv_macc(g, H, W) == macc_estimate(g, KERNEL, H, W).steps[1][1]
    return CheckResult("MACC model", bool(ok), "folded inference cost equals plain convolution cost")


ALL_CHECKS = (
    check_equivalence,
    check_fold,
    check_identity_init,
    check_gradients,
    check_receptive_field,
    check_expressiveness,
    check_macc,
)


def run_all() -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        t = time.perf_counter()
        r = fn()
        r.seconds = time.perf_counter() - t
        results.append(r)
    return results
