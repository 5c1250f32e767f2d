"""SGD with momentum and the seeded training loop used for baseline/DO comparisons."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import NumericError, UnsupportedConfigError
from .nn import Network, NetworkSpec, build_network, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, opt: OptimizerState, frozen=()) -> dict:
    """In-place ``v <- mu*v - lr*(g + wd*p); p <- p + v`` for every gradient.

    Weight decay acts on the stored tensors, i.e. on ``D'`` and not on the
    effective ``D``. Names in ``frozen`` are left untouched.
    """
    updates = {}
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise NumericError(f"gradient shape {g.shape} != parameter shape {p.shape}", name)
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= opt.momentum
        v -= opt.lr * (g + opt.weight_decay * p)
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite update for parameter {name}", name.split(".")[0])
        updates[name] = v
    for name, v in updates.items():
        params[name] += v
    return params


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    schedule: str = "constant"
    dtype: str = "float64"
    d_init: str = "identity"
    mode: str = "kernel"
    freeze_d: bool = False
    max_steps: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise UnsupportedConfigError(f"unknown train config keys {sorted(extra)}")
        cfg = cls(**d)
        if cfg.schedule not in ("constant", "cosine"):
            raise UnsupportedConfigError(f"unknown schedule {cfg.schedule!r}")
        if cfg.dtype not in ("float64", "float32"):
            raise UnsupportedConfigError(f"unsupported dtype {cfg.dtype!r}")
        return cfg


@dataclass
class TrainReport:
    seed: int
    variant: str
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    diverged: bool = False

    @property
    def final_train_loss(self) -> float:
        return self.epochs[-1]["train_loss"]

    @property
    def final_test_accuracy(self) -> float | None:
        return self.epochs[-1]["test_accuracy"]

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


class TrainingDiverged(NumericError):
    def __init__(self, message, report, layer=None):
        super().__init__(message, layer)
        self.report = report


def accuracy(logits, labels) -> float:
    # argmax picks the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(net: Network, images, labels, batch_size: int = 500) -> dict:
    logits = net.predict(images, batch_size)
    loss, _ = softmax_cross_entropy(logits, labels)
    return {"loss": loss, "accuracy": accuracy(logits, labels)}


def seed_streams(seed: int):
    """Independent generators for ``W`` init, ``D`` init and data shuffling."""
    w_ss, d_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(w_ss), np.random.default_rng(d_ss), np.random.default_rng(shuffle_ss)


def train_run(
    spec: NetworkSpec,
    data,
    cfg: TrainConfig,
    seed: int,
    test=None,
    variant: str = "",
    net: Network | None = None,
) -> tuple[TrainReport, Network]:
    """Train ``spec`` on ``data`` (a :class:`~doconv.io.Dataset`).

    Everything random is derived from ``seed``: two calls with the same seed
    see the same batches in the same order and the same ``W`` draws, whatever
    the layer kinds. ``net`` may be passed to continue from existing weights.
    """
    dtype = np.dtype(cfg.dtype)
    w_rng, d_rng, shuffle_rng = seed_streams(seed)
    if net is None:
        net = build_network(spec, w_rng, d_rng, dtype=dtype, d_init=cfg.d_init, mode=cfg.mode)
    params = net.params()
    frozen = {k for k in params if k.endswith(".d_res")} if cfg.freeze_d else set()
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    images = data.images.astype(dtype, copy=False)
    labels = data.labels
    n = len(labels)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    report = TrainReport(seed=seed, variant=variant)
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total_steps:
            break
        order = shuffle_rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(batches_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads, logits = net.loss_and_grads(images[idx], labels[idx])
            if not math.isfinite(loss):
                report.diverged = True
                report.steps = step
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"loss became {loss} at step {step}", report)
            if cfg.schedule == "cosine":
                opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            try:
                sgd_step(params, grads, opt, frozen)
            except NumericError as e:
                report.diverged = True
                report.steps = step
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(str(e), report, e.layer) from e
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            seen += len(idx)
            step += 1
        row = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / seen,
            "train_accuracy": correct / seen,
            "test_accuracy": None,
        }
        if test is not None:
            row["test_accuracy"] = evaluate(net, test.images.astype(dtype, copy=False), test.labels)["accuracy"]
        report.epochs.append(row)
        log.info("seed %d %s epoch %d: %s", seed, variant, epoch + 1, row)
    report.steps = step
    report.wall_time = time.perf_counter() - start
    return report, net
