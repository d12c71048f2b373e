"""Command-line interface: ``modetreg {synth,train,register,evaluate,gradcheck,visualize}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .estimator import store_from_checkpoint
from .evalmetrics import aggregate, evaluate_pair
from .netcore import save_checkpoint
from .objective import TrainConfig, pipeline_gradcheck, train
from .pyramid import MICRO_CONFIG, MICRO_SHAPE, ModelConfig, init_model, register
from .synthbench import load_pair, read_manifest, write_dataset
from .volgrid import DisplacementField, LabelMap, Volume, center_crop, load_volume, save_volume

logger = logging.getLogger("modetreg")

GRADCHECK_TOL = 1e-4


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _shape(text: str) -> tuple:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"shape must be N or H,W,L, got {text!r}")
    return tuple(parts)


def _expect(obj, kind, path):
    if not isinstance(obj, kind):
        raise CLIError("bad_input", f"{path}: expected {kind.__name__}, found {type(obj).__name__}")
    return obj


def cmd_synth(args) -> None:
    try:
        manifest = write_dataset(args.out, args.count, args.shape, args.max_disp, args.smooth,
                                 args.seed, args.blobs)
    except OSError as exc:
        raise CLIError("io", f"cannot write to {args.out}: {exc.strerror or exc}") from None
    print(manifest)


def _load_training_pairs(manifest, crop=None):
    pairs = []
    for i, entry in enumerate(read_manifest(manifest)):
        fixed = _expect(load_volume(entry["fixed"]), Volume, entry["fixed"])
        moving = _expect(load_volume(entry["moving"]), Volume, entry["moving"])
        if crop is not None:
            fixed, moving = center_crop(fixed, crop), center_crop(moving, crop)
        pairs.append((Path(entry["fixed"]).stem.replace("_fixed", "") or str(i), fixed.data, moving.data))
    return pairs


def cmd_train(args) -> None:
    model_config = MICRO_CONFIG if args.micro else ModelConfig()
    try:
        pairs = _load_training_pairs(args.data, MICRO_SHAPE if args.micro else None)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError("bad_manifest", f"{args.data}: {exc}") from None
    config = TrainConfig(lam=args.lam, ncc_window=args.window, lr_init=args.lr, epochs=args.epochs,
                         seed=args.seed)
    store = init_model(model_config, args.seed)
    log_path = args.log or str(args.out) + ".losses.jsonl"
    train(pairs, store, model_config, config, log_path=log_path, checkpoint_path=args.out,
          progress=True)
    print(log_path)


def cmd_register(args) -> None:
    store, config = store_from_checkpoint(args.model)
    fixed = _expect(load_volume(args.fixed), Volume, args.fixed)
    moving = _expect(load_volume(args.moving), Volume, args.moving)
    with torch.no_grad():
        out = register(fixed.data, moving.data, store, config)
    save_volume(DisplacementField(out.phi.numpy()), args.out_field)
    save_volume(Volume(out.warped.numpy()), args.out_warped)
    if args.trace:
        trace_dir = Path(args.trace)
        trace_dir.mkdir(parents=True, exist_ok=True)
        for step, lt in enumerate(out.trace, start=1):
            save_volume(DisplacementField(lt.field.numpy()), trace_dir / f"phi{step}_level{lt.level}.vvol")
            if lt.weights is not None and lt.weights.shape[0] > 1:
                save_volume(Volume(lt.weights.numpy()), trace_dir / f"weights{step}_level{lt.level}.vvol")
    print(json.dumps({"max_abs_displacement": float(out.phi.abs().max())}))


def _evaluate_entry(store, config, entry, index):
    missing = [k for k in ("labels_fixed", "labels_moving") if k not in entry]
    if missing:
        raise CLIError("missing_labels", f"pair {index}: manifest entry lacks {', '.join(missing)}")
    data = load_pair(entry)
    for key in ("fixed", "moving"):
        _expect(data[key], Volume, entry[key])
    for key in ("labels_fixed", "labels_moving"):
        _expect(data[key], LabelMap, entry[key])
    with torch.no_grad():
        out = register(data["fixed"].data, data["moving"].data, store, config)
    gt = data.get("gt_field")
    return evaluate_pair(data["fixed"], data["moving"], data["labels_fixed"], data["labels_moving"],
                         out.phi.numpy(), gt.data if gt is not None else None,
                         name=Path(entry["fixed"]).name)


def cmd_evaluate(args) -> None:
    store, config = store_from_checkpoint(args.model)
    entries = read_manifest(args.pairs)
    threads = max(1, int(os.environ.get("MODET_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        reports = list(pool.map(lambda ie: _evaluate_entry(store, config, ie[1], ie[0]),
                                enumerate(entries)))
    report = {"pairs": [r.to_json() for r in reports], "aggregate": aggregate(reports)}
    Path(args.report).write_text(json.dumps(report, indent=1))
    print(json.dumps(report["aggregate"]))


def cmd_gradcheck(args) -> None:
    worst, per_param = pipeline_gradcheck(args.seed)
    print(json.dumps({"max_relative_error": worst, "tolerance": GRADCHECK_TOL,
                      "parameters": len(per_param), "pass": worst <= GRADCHECK_TOL}))
    if not worst <= GRADCHECK_TOL:
        raise CLIError("gradcheck_failed", f"max relative error {worst:.3g} exceeds {GRADCHECK_TOL:g}")


def cmd_visualize(args) -> None:
    from .viz import parse_slice, plot_field

    field = _expect(load_volume(args.field), DisplacementField, args.field)
    axis, index = parse_slice(args.slice)
    weights = None
    if args.weights:
        weights = _expect(load_volume(args.weights), Volume, args.weights).data
        if weights.shape[1:] != field.shape:
            raise CLIError("bad_input", f"weights shape {weights.shape[1:]} differs from field {field.shape}")
    plot_field(field.data, axis, index, args.out, weights)
    print(args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modetreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic registration pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--shape", type=_shape, default=(32, 32, 32))
    p.add_argument("--max-disp", type=float, default=3.0)
    p.add_argument("--smooth", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blobs", type=int, default=5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--micro", action="store_true", help="tiny model on 16^3 centre crops")
    p.add_argument("--window", type=int, default=9, help="local NCC window")
    p.add_argument("--log", help="loss log path (default: <out>.losses.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one image pair")
    p.add_argument("--model", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--trace", help="directory for per-level fields")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a model on labelled pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="plot one slice of a displacement field")
    p.add_argument("--field", required=True)
    p.add_argument("--slice", required=True, help="AXIS=IDX, e.g. 2=16")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="CWM weight volume at the field's resolution")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except CLIError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line failure for any other error
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
