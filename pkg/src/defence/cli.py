"""``defence`` command line entry point.

Failures print one JSON line ``{"error": <type>, "message": <text>}`` on
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import canny as canny_mod
from . import fencegen, pipeline, train
from .figures import save_panel
from .imagecore import TRAINING_SIZE, load_image, save_image, save_mask


def _canny_params(sigma, low, high) -> canny_mod.CannyParams | None:
    if sigma is None and low is None and high is None:
        return None
    d = canny_mod.CannyParams()
    return canny_mod.CannyParams(
        gaussian_sigma=d.gaussian_sigma if sigma is None else sigma,
        low_threshold=d.low_threshold if low is None else low,
        high_threshold=d.high_threshold if high is None else high,
    )


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def cmd_synth(args) -> None:
    manifest = fencegen.build_synthetic_dataset(
        args.corpus, args.config, args.out, seed=args.seed, size=args.size, workers=args.workers
    )
    _emit({"samples": len(manifest["samples"]), "out": str(args.out)})


_TRAINERS = {
    "train-mask": train.train_mask_generator,
    "train-recover": train.train_recovering_network,
    "train-single": train.train_single_stage,
}


def cmd_train(args) -> None:
    config = train.load_training_config(args.config) if args.config else train.TrainingConfig()
    dataset = train.load_dataset(args.data)
    result = _TRAINERS[args.command](dataset, config, args.out)
    _emit(
        {
            "checkpoint": str(result.checkpoint.ckpt_path),
            "steps": result.steps,
            "epochs": len(result.history),
            "stopped_by": result.stopped_by,
            "final_loss": result.history[-1],
            "log": str(result.log_path),
        }
    )


def cmd_run(args) -> None:
    image = load_image(args.inp)
    tags = [t for t in args.ckpt.split(",") if t]
    size = args.size if args.size > 0 else None
    panel = {}
    if args.mode == "two-stage":
        if len(tags) != 2:
            raise ValueError("two-stage mode needs --ckpt MASK_TAG,RECOVER_TAG")
        steps = pipeline.two_stage_steps(image, tags[0], tags[1], size=size)
        out = steps["output"]
        panel = {"input": steps["input"], "mask": steps["mask"], "masked": steps["masked"], "output": out}
        if args.mask_out:
            save_mask(steps["mask"], args.mask_out)
    else:
        if len(tags) != 1:
            raise ValueError("single mode needs exactly one --ckpt TAG")
        params = _canny_params(args.canny_sigma, args.canny_low, args.canny_high)
        out = pipeline.defence_single_stage(image, tags[0], params, size=size)
        panel = {"input": pipeline.prepare_input(image, size), "output": out}
    save_image(out, args.out)
    if args.figure:
        save_panel(panel, args.figure)
    _emit({"out": str(args.out), "shape": list(out.shape)})


def cmd_canny(args) -> None:
    params = _canny_params(args.sigma, args.low, args.high) or canny_mod.CannyParams()
    edges = canny_mod.canny(load_image(args.inp), params)
    save_mask(edges, args.out)
    _emit({"out": str(args.out), "edge_pixels": int(edges.sum())})


def cmd_eval(args) -> None:
    report = pipeline.evaluate(args.pred, args.gt, args.report)
    _emit({"report": str(args.report), "count": len(report.images), "mean": report.mean})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defence", description="Fence removal with conditional GANs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic fenced dataset from a corpus of clean images")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--config", type=Path, help="YAML file of fence sampling ranges")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=TRAINING_SIZE)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    for name in _TRAINERS:
        p = sub.add_parser(name, help=f"{name.split('-')[1]} network training")
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--config", type=Path, help="YAML training config")
        p.add_argument("--out", required=True, help="checkpoint tag (writes TAG.ckpt / TAG.json)")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="de-fence one image")
    p.add_argument("--mode", choices=("two-stage", "single"), required=True)
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--ckpt", required=True, help="TAG, or MASK_TAG,RECOVER_TAG for two-stage")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int, default=TRAINING_SIZE, help="inference side length; 0 keeps the input size")
    p.add_argument("--canny-sigma", type=float)
    p.add_argument("--canny-low", type=float)
    p.add_argument("--canny-high", type=float)
    p.add_argument("--mask-out", type=Path, help="two-stage only: also write the binary mask")
    p.add_argument("--figure", type=Path, help="write a side-by-side PNG panel")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("canny", help="write the Canny edge map of an image")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--sigma", type=float)
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.set_defaults(func=cmd_canny)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
