"""``doconv`` command line: train, eval, fold, macc, delta, check.

Exit codes: 0 success, 2 usage error, 3 runtime or numeric error (a JSON
error line is written to stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .conv import ConvGeometry
from .digits import write_digit_idx
from .errors import DoConvError, UnsupportedConfigError
from .io import load_idx, load_model, save_model
from .nn import DOConv, NetworkSpec, reference_spec
from .overparam import FEATURE, KERNEL, conv_macc, fold_kernel, kernel_delta_H, macc_estimate
from .train import TrainConfig, TrainingDiverged, evaluate, train_run

CONFIG_KEYS = {"network", "train", "data", "seeds", "output_dir"}
DATA_KEYS = {"train_images", "train_labels", "test_images", "test_labels", "train_count", "test_count", "synthetic"}
SYNTH_KEYS = {"dir", "n_train", "n_test", "seed"}


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def load_config(path) -> dict:
    """Read and validate a run config; relative paths resolve against its folder."""
    path = Path(path)
    cfg = json.loads(path.read_text())
    extra = set(cfg) - CONFIG_KEYS
    if extra:
        raise UnsupportedConfigError(f"unknown config keys {sorted(extra)}")
    base = path.parent.resolve()
    data = dict(cfg.get("data", {}))
    if set(data) - DATA_KEYS:
        raise UnsupportedConfigError(f"unknown data keys {sorted(set(data) - DATA_KEYS)}")
    if "synthetic" in data:
        synth = dict(data.pop("synthetic"))
        if set(synth) - SYNTH_KEYS:
            raise UnsupportedConfigError(f"unknown synthetic keys {sorted(set(synth) - SYNTH_KEYS)}")
        synth["dir"] = str((base / synth.get("dir", "data")).resolve())
        data["synthetic"] = synth
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key in data:
            data[key] = str((base / data[key]).resolve())
    net = cfg.get("network")
    spec = reference_spec() if net is None else NetworkSpec(tuple(net["input_shape"]), net["layers"])
    if net is not None and set(net) - {"input_shape", "layers"}:
        raise UnsupportedConfigError(f"unknown network keys {sorted(set(net) - {'input_shape', 'layers'})}")
    return {
        "spec": spec,
        "train": TrainConfig.from_dict(cfg.get("train", {})),
        "data": data,
        "seeds": list(cfg.get("seeds", [0])),
        "output_dir": (base / cfg.get("output_dir", "runs")).resolve(),
    }


def load_datasets(data: dict):
    if "synthetic" in data:
        s = data["synthetic"]
        paths = write_digit_idx(s["dir"], s.get("n_train", 10000), s.get("n_test", 2000), s.get("seed", 0))
    else:
        paths = data
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = None
    if "test_images" in paths:
        test = load_idx(paths["test_images"], paths["test_labels"])
    if data.get("train_count"):
        train = train.subset(data["train_count"])
    if test is not None and data.get("test_count"):
        test = test.subset(data["test_count"])
    return train, test


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train, test = load_datasets(cfg["data"])
    spec = cfg["spec"].variant(args.variant)
    seeds = cfg["seeds"] if args.seed is None else [args.seed]
    out_dir = cfg["output_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in seeds:
        stem = out_dir / f"{args.variant}-seed{seed}"
        try:
            report, net = train_run(spec, train, cfg["train"], seed, test=test, variant=args.variant)
        except TrainingDiverged as exc:
            Path(f"{stem}.report.json").write_text(_dump(exc.report.to_dict()) + "\n")
            raise
        save_model(net, f"{stem}.docv")
        Path(f"{stem}.report.json").write_text(_dump(report.to_dict()) + "\n")
        reports.append(report)
    if args.json:
        print(_dump([r.to_dict() for r in reports]))
    else:
        for r in reports:
            print(f"{r.variant} seed {r.seed}: {r.steps} steps in {r.wall_time:.1f}s")
            for e in r.epochs:
                acc = "-" if e["test_accuracy"] is None else f"{100 * e['test_accuracy']:.2f}%"
                print(f"  epoch {e['epoch']:3d}  loss {e['train_loss']:.4f}  "
                      f"train {100 * e['train_accuracy']:.2f}%  test {acc}")
    return 0


def cmd_eval(args) -> int:
    net = load_model(args.model)
    data = load_idx(*args.data)
    res = evaluate(net, data.images.astype(net.dtype), data.labels)
    res["count"] = len(data)
    print(_dump(res) if args.json else f"accuracy {100 * res['accuracy']:.2f}% on {len(data)} images (loss {res['loss']:.4f})")
    return 0


def cmd_fold(args) -> int:
    net = load_model(getattr(args, "in"))
    layers = []
    for i, layer in net.do_layers():
        p = layer.p
        wf = fold_kernel(p)
        change = float(np.abs(wf - p.w).max()) if wf.shape == p.w.shape else None
        layers.append({"layer": i, "kind": p.kind, "max_abs_change": change})
    save_model(net, args.out, folded=True)
    changes = [l["max_abs_change"] for l in layers if l["max_abs_change"] is not None]
    result = {"layers": layers, "max_abs_change": max(changes) if changes else None, "out": str(args.out)}
    if args.json:
        print(_dump(result))
    else:
        for l in layers:
            c = "n/a (W and W' differ in shape)" if l["max_abs_change"] is None else f"{l['max_abs_change']:.6g}"
            print(f"layer {l['layer']} ({l['kind']}): max |W' - W| = {c}")
        print(f"folded model written to {args.out}")
    return 0


def parse_geom(text: str):
    try:
        M, N, c_in, c_out, d_mul, H, W = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--geom expects 7 comma-separated integers M,N,Cin,Cout,Dmul,H,W, got {text!r}")
    return ConvGeometry(M, N, c_in, c_out, d_mul=d_mul), H, W


def macc_table(geom: ConvGeometry, H: int, W: int) -> dict:
    reports = {m: macc_estimate(geom, m, H, W) for m in (FEATURE, KERNEL)}
    return {
        "geometry": {"M": geom.M, "N": geom.N, "c_in": geom.c_in, "c_out": geom.c_out,
                     "d_mul": geom.d_mul, "H": H, "W": W},
        "feature": reports[FEATURE].to_dict(),
        "kernel": reports[KERNEL].to_dict(),
        "folded_inference": conv_macc(geom, H, W),
        "cheaper": KERNEL if reports[KERNEL].total < reports[FEATURE].total else FEATURE,
    }


def cmd_macc(args) -> int:
    geom, H, W = parse_geom(args.geom)
    t = macc_table(geom, H, W)
    if args.json:
        print(_dump(t))
        return 0
    print(f"{'mode':<9}{'step':<16}{'MACC':>16}")
    for mode in (FEATURE, KERNEL):
        for s in t[mode]["steps"]:
            print(f"{mode:<9}{s['step']:<16}{s['macc']:>16,}")
        print(f"{mode:<9}{'total':<16}{t[mode]['total']:>16,}")
    print(f"{'folded':<9}{'inference':<16}{t['folded_inference']:>16,}")
    print(f"cheaper for training: {t['cheaper']} composition")
    return 0


def normalize(h: np.ndarray) -> np.ndarray:
    lo, hi = h.min(), h.max()
    return np.zeros_like(h) if hi == lo else (h - lo) / (hi - lo)


def cmd_delta(args) -> int:
    net = load_model(args.model)
    if not 0 <= args.layer < len(net.layers) or not isinstance(net.layers[args.layer], DOConv):
        raise UsageError(f"layer {args.layer} is not a DO layer; DO layers: {[i for i, _ in net.do_layers()]}")
    h = kernel_delta_H(net.layers[args.layer].p)
    norm = normalize(h)
    if args.json:
        print(_dump({"layer": args.layer, "H": h.tolist(), "normalized": norm.tolist()}))
        return 0
    shades = " .:-=+*#%@"
    print(f"layer {args.layer}: H (raw)")
    for row in h:
        print("  " + " ".join(f"{v:10.4g}" for v in row))
    print("normalized")
    for row in norm:
        print("  " + " ".join(f"{v:5.2f}" for v in row) + "   " + "".join(shades[min(int(v * 10), 9)] * 2 for v in row))
    return 0


def cmd_check(args) -> int:
    results = checks.run_all()
    if args.json:
        print(_dump([{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline or DO-Conv network")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=("baseline", "doconv"), default="doconv")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model on IDX data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs=2, metavar=("IMAGES", "LABELS"), required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fold", help="fold every DO layer into a single kernel")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("macc", help="MACC cost of feature vs kernel composition")
    p.add_argument("--geom", required=True, help="M,N,Cin,Cout,Dmul,H,W")
    p.set_defaults(func=cmd_macc)

    p = sub.add_parser("delta", help="accumulated |W' - W| per kernel position")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("check", help="run the built-in invariant suite")
    p.set_defaults(func=cmd_check)

    for sp in sub.choices.values():
        sp.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (DoConvError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
