"""Where does training move the folded kernel away from W?"""
import tempfile

import numpy as np

from doconv import TrainConfig, kernel_delta_H, reference_spec, train_run
from doconv.digits import load_digit_split

with tempfile.TemporaryDirectory() as tmp:
    train, _ = load_digit_split(tmp, 4000, 10, seed=1)

_, net = train_run(reference_spec().variant("doconv"), train, TrainConfig(epochs=2), seed=0)

for i, layer in net.do_layers():
    h = kernel_delta_H(layer.p)
    norm = (h - h.min()) / (h.max() - h.min())
    print(f"layer {i}: sum over channels of |W' - W|, normalized")
    print(np.array2string(norm, precision=2))
