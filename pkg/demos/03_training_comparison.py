"""Baseline CNN against its DO-Conv twin on synthetic digits.

Needs opencv for the digit renderer. Takes a couple of minutes.
"""
import sys
import tempfile

import numpy as np

from doconv import TrainConfig, reference_spec, train_run
from doconv.digits import load_digit_split

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3

with tempfile.TemporaryDirectory() as tmp:
    train, test = load_digit_split(tmp, 10000, 2000, seed=0)
print("train", train.images.shape, " test", test.images.shape)

cfg = TrainConfig(epochs=epochs, dtype="float32")
spec = reference_spec()
final = {}
for variant in ("baseline", "doconv"):
    # same seed: same batch order and the same W draws in both runs
    report, net = train_run(spec.variant(variant), train, cfg, seed=0, test=test, variant=variant)
    for row in report.epochs:
        print(f"{variant:>9} epoch {row['epoch']}: loss {row['train_loss']:.4f}, "
              f"test {100 * row['test_accuracy']:.2f}%")
    final[variant] = report.final_train_loss

print("final loss ratio doconv/baseline:", round(final["doconv"] / final["baseline"], 4))

# fold the trained DO net; the plain network gives the same logits
folded = net.fold()
x = test.images[:200].astype(np.float32)
print("max logit change after folding:", float(np.abs(folded(x) - net(x)).max()))
