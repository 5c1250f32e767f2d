import numpy as np
import pytest

from doconv.errors import ShapeError, UnsupportedConfigError
from doconv.io import Dataset
from doconv.nn import DOConv, NetworkSpec, build_network, reference_spec
from doconv.train import TrainConfig, TrainingDiverged, seed_streams, train_run


def toy_data(n=96, seed=0, hw=12):
    # class-dependent blobs so the loss actually falls
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = 0.1 * rng.random((n, hw, hw, 1))
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 4)
        images[i, 3 * r : 3 * r + 3, 3 * c : 3 * c + 3, 0] += 0.8
    return Dataset(images, labels)


SPEC = reference_spec((12, 12, 1))
CFG = TrainConfig(epochs=2, batch_size=16)


def test_zero_lr_leaves_parameters_untouched():
    cfg = TrainConfig(lr=0.0, weight_decay=0.0, epochs=2, batch_size=96)
    data = toy_data()
    w_rng, d_rng, _ = seed_streams(3)
    before = {k: v.copy() for k, v in build_network(SPEC.variant("doconv"), w_rng, d_rng).params().items()}
    report, net = train_run(SPEC.variant("doconv"), data, cfg, seed=3)
    for k, v in net.params().items():
        np.testing.assert_array_equal(v, before[k])
    losses = [e["train_loss"] for e in report.epochs]
    assert losses[0] == losses[1]


def test_frozen_identity_d_tracks_baseline():
    data = toy_data()
    cfg = TrainConfig(epochs=3, batch_size=16, freeze_d=True)
    base, _ = train_run(SPEC.variant("baseline"), data, cfg, seed=1)
    do, net = train_run(SPEC.variant("doconv"), data, cfg, seed=1)
    for a, b in zip(base.epochs, do.epochs):
        assert abs(a["train_loss"] - b["train_loss"]) <= 1e-6
    for _, layer in net.do_layers():
        assert np.all(layer.p.d_res == 0)


def test_training_is_bit_reproducible():
    data = toy_data()
    r1, n1 = train_run(SPEC.variant("doconv"), data, CFG, seed=5, test=data)
    r2, n2 = train_run(SPEC.variant("doconv"), data, CFG, seed=5, test=data)
    assert r1.to_dict(timing=False) == r2.to_dict(timing=False)
    for k, v in n1.params().items():
        np.testing.assert_array_equal(v, n2.params()[k])


def test_seeds_differ():
    data = toy_data()
    r1, _ = train_run(SPEC, data, CFG, seed=0)
    r2, _ = train_run(SPEC, data, CFG, seed=1)
    assert r1.final_train_loss != r2.final_train_loss


def test_loss_decreases():
    data = toy_data(n=192)
    report, _ = train_run(SPEC.variant("doconv"), data, TrainConfig(epochs=5, batch_size=16, lr=0.02), seed=0)
    assert report.epochs[-1]["train_loss"] < 0.5 * report.epochs[0]["train_loss"]


@pytest.mark.parametrize("mode", ["kernel", "feature"])
def test_fold_after_training(mode):
    data = toy_data()
    cfg = TrainConfig(epochs=2, batch_size=16, mode=mode, d_init="random")
    _, net = train_run(SPEC.variant("doconv"), data, cfg, seed=2)
    assert all(isinstance(l, DOConv) for _, l in net.do_layers()) and net.do_layers()
    folded = net.fold()
    assert folded.is_folded
    np.testing.assert_allclose(folded(data.images), net(data.images), rtol=0, atol=1e-10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_report():
    data = toy_data()
    with pytest.raises(TrainingDiverged) as err:
        train_run(SPEC, data, TrainConfig(lr=1e6, epochs=3, batch_size=16), seed=0)
    assert err.value.report.diverged


def test_max_steps_and_cosine():
    data = toy_data()
    report, _ = train_run(SPEC, data, TrainConfig(epochs=4, batch_size=16, max_steps=9, schedule="cosine"), seed=0)
    assert report.steps == 9
    assert len(report.epochs) == 2


def test_float32_training_keeps_dtype():
    data = toy_data()
    _, net = train_run(SPEC.variant("doconv"), data, TrainConfig(epochs=1, batch_size=32, dtype="float32"), seed=0)
    assert all(v.dtype == np.float32 for v in net.params().values())
    assert net(data.images.astype(np.float32)).dtype == np.float32


def test_train_config_validation():
    with pytest.raises(UnsupportedConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(UnsupportedConfigError):
        TrainConfig.from_dict({"schedule": "step"})
    with pytest.raises(UnsupportedConfigError):
        TrainConfig.from_dict({"dtype": "float16"})
    assert TrainConfig.from_dict({"lr": 0.1}).lr == 0.1


def test_network_spec_validation():
    with pytest.raises(ShapeError):
        NetworkSpec((8, 8, 1), [{"type": "flatten"}])
    with pytest.raises(ShapeError):
        NetworkSpec((8, 8, 1), [{"type": "conv", "filters": 2, "size": 3}, {"type": "softmax_ce"}])
    with pytest.raises(ShapeError):
        NetworkSpec((8, 8, 1), [{"type": "softmax_ce"}, {"type": "softmax_ce"}])
    with pytest.raises(ShapeError):
        NetworkSpec((8, 8, 1), [{"type": "pool"}, {"type": "softmax_ce"}])


def test_spec_shapes_and_variant():
    spec = reference_spec()
    assert spec.shapes()[-2] == (10,)
    do = spec.variant("doconv")
    assert [d["type"] for d in do.layers][:4] == ["doconv", "relu", "maxpool", "doconv"]
    one = NetworkSpec((4, 4, 2), [{"type": "conv", "filters": 3, "kernel": 1}, {"type": "flatten"},
                                  {"type": "dense", "units": 2}, {"type": "softmax_ce"}])
    assert one.variant("doconv").layers[0]["type"] == "conv"
    with pytest.raises(UnsupportedConfigError):
        spec.variant("other")


def test_shared_w_between_variants():
    spec = reference_spec((12, 12, 1))
    base = build_network(spec, np.random.default_rng(9))
    do = build_network(spec.variant("doconv"), np.random.default_rng(9))
    x = toy_data(n=4).images
    np.testing.assert_allclose(do(x), base(x), rtol=0, atol=1e-12)
