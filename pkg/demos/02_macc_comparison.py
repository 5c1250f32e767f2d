"""Which composition is cheaper to train with?"""
from doconv import ConvGeometry, conv_macc, macc_estimate

print(f"{'geometry':<32}{'feature':>14}{'kernel':>14}{'folded':>12}")
for M, c_in, c_out, hw in [(3, 16, 32, 8), (3, 16, 32, 56), (3, 64, 64, 14), (5, 8, 16, 32), (3, 3, 8, 2)]:
    g = ConvGeometry(M, M, c_in, c_out, d_mul=M * M)
    f = macc_estimate(g, "feature", hw, hw).total
    k = macc_estimate(g, "kernel", hw, hw).total
    label = f"{M}x{M} {c_in}->{c_out} at {hw}x{hw}"
    print(f"{label:<32}{f:>14,}{k:>14,}{conv_macc(g, hw, hw):>12,}")

# kernel composition pays once per layer for the fold, feature composition
# pays per pixel, so large maps favour folding the kernel first.
# Once folded, the layer costs exactly what a plain convolution costs.
