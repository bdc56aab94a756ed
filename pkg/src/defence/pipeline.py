"""Inference (two-stage and single-stage) and directory-level evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .canny import CannyParams, append_edge_channel
from .imagecore import (
    TRAINING_SIZE,
    ImageIOError,
    apply_mask,
    as_image,
    binarize_mask,
    from_tensor,
    load_image,
    resize_to_training_dims,
    to_tensor,
)
from .losses import psnr, ssim_index
from .nets import CheckpointMismatch, Generator, load_checkpoint

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _load_generator(ckpt, allowed: set[tuple[int, int]], role: str) -> tuple[Generator, dict]:
    if isinstance(ckpt, Generator):
        net, manifest = ckpt, {}
    else:
        net, manifest = load_checkpoint(ckpt)
        if not isinstance(net, Generator):
            raise CheckpointMismatch(f"{ckpt} holds a {manifest.get('kind')}, not a generator")
    channels = (net.spec.in_channels, net.spec.out_channels)
    if channels not in allowed:
        raise CheckpointMismatch(f"{role} generator must map {sorted(allowed)}, checkpoint maps {channels}")
    net.eval()
    return net, manifest


def prepare_input(image, size: int | None = TRAINING_SIZE) -> np.ndarray:
    """RGB at the inference resolution (``size=None`` keeps the input size)."""
    arr = as_image(image, check_side=False)[..., :3]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr if size is None else resize_to_training_dims(arr, size)


def _run(net: Generator, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return from_tensor(net(to_tensor(image)))


def two_stage_steps(image, ckpt_mask, ckpt_recover, size: int | None = TRAINING_SIZE) -> dict:
    """Every intermediate of the two-stage path, keyed by name."""
    mask_net, _ = _load_generator(ckpt_mask, {(3, 1)}, "mask")
    recover_net, _ = _load_generator(ckpt_recover, {(3, 3)}, "recovery")
    inp = prepare_input(image, size)
    soft = _run(mask_net, inp)
    mask = binarize_mask(soft)
    masked = apply_mask(inp, mask)
    return {"input": inp, "soft_mask": soft, "mask": mask, "masked": masked, "output": _run(recover_net, masked)}


def defence_two_stage(image, ckpt_mask, ckpt_recover, size: int | None = TRAINING_SIZE) -> np.ndarray:
    return two_stage_steps(image, ckpt_mask, ckpt_recover, size)["output"]


def defence_single_stage(
    image, ckpt, canny_params: CannyParams | None = None, size: int | None = TRAINING_SIZE
) -> np.ndarray:
    """Edge-conditioned single generator.  Edge parameters default to those it was trained with."""
    net, manifest = _load_generator(ckpt, {(4, 3), (3, 3)}, "single-stage")
    inp = prepare_input(image, size)
    if net.spec.in_channels == 3:
        return _run(net, inp)
    if canny_params is None:
        canny_params = CannyParams(**manifest["canny"]) if "canny" in manifest else CannyParams()
    return _run(net, append_edge_channel(inp, canny_params))


# ---------------------------------------------------------------------------
# Evaluation


def _rgb(arr: np.ndarray) -> np.ndarray:
    arr = arr[..., :3]
    return np.repeat(arr, 3, axis=2) if arr.shape[2] == 1 else arr


def image_metrics(pred, gt) -> dict:
    pred, gt = _rgb(as_image(pred, check_side=False)), _rgb(as_image(gt, check_side=False))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp, tg = to_tensor(pred, torch.float64), to_tensor(gt, torch.float64)
    return {
        "ssim": ssim_index(tp, tg),
        "psnr": psnr(tp, tg, cap=PSNR_CAP),
        "l1": float(np.mean(np.abs(pred - gt))),
    }


@dataclass
class EvalReport:
    images: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"images": self.images, "missing": self.missing, "mean": self.mean, "count": len(self.images)}


def _image_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise ImageIOError(f"not a directory: {directory}")
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate(pred_dir, gt_dir, report_path=None, figure: bool = True) -> EvalReport:
    """Compare same-named images in two directories; unmatched names are listed, not scored."""
    preds, gts = _image_files(Path(pred_dir)), _image_files(Path(gt_dir))
    report = EvalReport()
    for name in sorted(set(preds) | set(gts)):
        if name not in preds or name not in gts:
            report.missing.append({"name": name, "missing_from": "pred" if name not in preds else "gt"})
            continue
        try:
            metrics = image_metrics(load_image(preds[name]), load_image(gts[name]))
        except (ImageIOError, ValueError) as exc:
            log.warning("cannot score %s: %s", name, exc)
            report.missing.append({"name": name, "error": str(exc)})
            continue
        report.images.append({"name": name, **metrics})
    for key in ("ssim", "psnr", "l1"):
        vals = [r[key] for r in report.images]
        report.mean[key] = float(np.mean(vals)) if vals else None
    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report.to_dict(), indent=2))
        if figure and report.images:
            from .figures import plot_eval_report

            plot_eval_report(report.to_dict(), report_path.with_suffix(".png"))
    return report
