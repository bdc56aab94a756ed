"""Adversarial training for the mask generator, the recovery network and the
single-stage network.

Each step first updates the discriminator on a detached prediction, then the
generator against the freshly updated discriminator.  Training stops when the
epoch-mean generator loss changes by less than ``epsilon`` between two
successive epochs, or at ``max_epochs`` / ``max_steps``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from . import losses
from .canny import CannyParams, append_edge_channel
from .imagecore import ImageIOError, apply_mask, load_image, load_mask, to_tensor
from .losses import LossBundle, LossWeights
from .nets import (
    Checkpoint,
    DiscriminatorSpec,
    FeatureExtractorSpec,
    GeneratorSpec,
    build_discriminator,
    build_feature_extractor,
    build_generator,
    extract_features,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "adv", "l1", "perc", "style", "ssim", "total", "d_loss")
STAGES = ("mask", "recover", "single")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    max_epochs: int = 200
    max_steps: int | None = None
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    epsilon: float = 1e-3
    checkpoint_every: int = 0
    loss_weights: LossWeights | None = None
    base_width: int = 64
    disc_base_width: int = 64
    use_edges: bool = True
    canny: CannyParams = field(default_factory=CannyParams)
    features: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")

    def weights_for(self, stage: str) -> LossWeights:
        if self.loss_weights is not None:
            return self.loss_weights
        return losses.STAGE1_WEIGHTS if stage == "mask" else losses.STAGE2_WEIGHTS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"]["tap_layers"] = list(self.features.tap_layers)
        d["features"]["widths"] = list(self.features.widths)
        return d

    @classmethod
    def from_mapping(cls, d: dict | None) -> "TrainingConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if d.get("loss_weights") is not None:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if d.get("canny") is not None:
            d["canny"] = CannyParams(**d["canny"])
        if d.get("features") is not None:
            feat = dict(d["features"])
            for key in ("tap_layers", "widths"):
                if key in feat:
                    feat[key] = tuple(feat[key])
            d["features"] = FeatureExtractorSpec(**feat)
        return cls(**d)


def load_training_config(path) -> TrainingConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError("training config must be a mapping")
    return TrainingConfig.from_mapping(data)


def config_hash(config: TrainingConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


def convergence_check(history, epsilon: float = 1e-3) -> bool:
    """True once the last two epoch losses differ by less than ``epsilon``."""
    if len(history) < 2:
        return False
    return abs(history[-1] - history[-2]) < epsilon


# ---------------------------------------------------------------------------
# Data


@dataclass
class TrainingTriple:
    sample_id: str
    clean: np.ndarray
    mask: np.ndarray
    fenced: np.ndarray


def load_dataset(data_dir) -> list[TrainingTriple]:
    """Read the triples written by :func:`defence.fencegen.build_synthetic_dataset`."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.is_file():
        ids = [s["id"] for s in json.loads(manifest_path.read_text())["samples"]]
    elif data_dir.is_dir():
        ids = sorted(p.name for p in data_dir.iterdir() if (p / "fenced.png").is_file())
    else:
        raise ImageIOError(f"dataset directory not found: {data_dir}")
    triples = []
    for sample_id in ids:
        d = data_dir / sample_id
        triples.append(
            TrainingTriple(
                sample_id=sample_id,
                clean=load_image(d / "clean.png")[..., :3],
                mask=load_mask(d / "mask.png"),
                fenced=load_image(d / "fenced.png")[..., :3],
            )
        )
    return triples


def _require_data(dataset) -> None:
    if not dataset:
        raise TrainingError("dataset is empty; nothing to train on")


def _stack(arrays) -> torch.Tensor:
    return to_tensor(list(arrays))


def input_signature(stage: str, config: TrainingConfig) -> dict:
    if stage == "mask":
        sig = {"generator_input": ["fenced_rgb"]}
    elif stage == "recover":
        sig = {"generator_input": ["masked_fenced_rgb"]}
    elif config.use_edges:
        sig = {"generator_input": ["fenced_rgb", "canny_edges"], "canny": asdict(config.canny)}
    else:
        sig = {"generator_input": ["fenced_rgb"]}
    sig["hash"] = hashlib.sha256(json.dumps(sig, sort_keys=True).encode()).hexdigest()
    return sig


def stage_tensors(stage: str, dataset, config: TrainingConfig):
    """Generator input, discriminator condition and target for one stage."""
    _require_data(dataset)
    fenced = _stack(t.fenced for t in dataset)
    if stage == "mask":
        target = _stack(t.mask.astype(np.float64) for t in dataset)
        return fenced, fenced, target
    clean = _stack(t.clean for t in dataset)
    if stage == "recover":
        # Ground-truth masks here; predicted masks only meet this net at inference.
        masked = _stack(apply_mask(t.fenced, t.mask) for t in dataset)
        return masked, masked, clean
    if stage == "single":
        if config.use_edges:
            inputs = _stack(append_edge_channel(t.fenced, config.canny) for t in dataset)
        else:
            inputs = fenced
        return inputs, fenced, clean
    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# Objectives


Objective = Callable[[torch.Tensor, torch.Tensor], dict]


def mask_objective(pred: torch.Tensor, target: torch.Tensor) -> dict:
    return {"l1": losses.l1_loss(pred, target)}


def recovery_objective(extractor) -> Objective:
    def objective(pred: torch.Tensor, target: torch.Tensor) -> dict:
        acts_pred = extract_features(extractor, pred)
        with torch.no_grad():
            acts_gt = extract_features(extractor, target)
        return {
            "l1": losses.l1_loss(pred, target),
            "perc": losses.perceptual_loss(acts_pred, acts_gt),
            "style": losses.style_loss(acts_pred, acts_gt),
            "ssim": losses.ssim_loss(pred, target),
        }

    return objective


# ---------------------------------------------------------------------------
# Steps


def discriminator_step(disc, opt_d, fake, condition, target) -> torch.Tensor:
    opt_d.zero_grad(set_to_none=True)
    d_loss = losses.adversarial_loss_discriminator(disc(target, condition), disc(fake.detach(), condition))
    d_loss.backward()
    opt_d.step()
    return d_loss.detach()


def generator_step(disc, opt_g, fake, condition, target, objective: Objective, weights: LossWeights) -> LossBundle:
    opt_g.zero_grad(set_to_none=True)
    adv = losses.adversarial_loss_generator(disc(fake, condition))
    bundle = losses.combine(weights, adv=adv, **objective(fake, target))
    bundle.total.backward()
    opt_g.step()
    return bundle


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    discriminator: Checkpoint
    history: list
    steps: int
    stopped_by: str
    log_path: Path


def _row(step, epoch, bundle: LossBundle, d_loss) -> dict:
    row = {"step": step, "epoch": epoch, **bundle.as_floats(), "d_loss": float(d_loss)}
    return row


def fit(
    stage: str,
    inputs: torch.Tensor,
    condition: torch.Tensor,
    target: torch.Tensor,
    config: TrainingConfig,
    out_tag,
    objective: Objective,
    extra_manifest: dict | None = None,
) -> TrainResult:
    """Shared adversarial loop; writes checkpoints, a CSV loss log and a loss plot."""
    n = inputs.shape[0]
    if n == 0:
        raise TrainingError("dataset is empty; nothing to train on")
    weights = config.weights_for(stage)
    gen_spec = GeneratorSpec(inputs.shape[1], target.shape[1], config.base_width)
    disc_spec = DiscriminatorSpec(target.shape[1] + condition.shape[1], config.disc_base_width)

    torch.manual_seed(config.seed)
    gen = build_generator(gen_spec, config.seed)
    disc = build_discriminator(disc_spec, config.seed + 1)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=betas)
    gen.train()
    disc.train()

    out_tag = Path(out_tag)
    out_tag.parent.mkdir(parents=True, exist_ok=True)
    log_path = out_tag.with_name(out_tag.name + "_loss.csv")
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    step = 0
    stopped_by = "max_epochs"
    manifest = {
        "stage": stage,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "loss_weights": weights.as_dict(),
        "input_signature": input_signature(stage, config),
        "image_size": list(inputs.shape[-2:]),
        **(extra_manifest or {}),
    }

    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for epoch in range(config.max_epochs):
            order = rng.permutation(n)
            totals = []
            for start in range(0, n, config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size])
                x, c, y = inputs[idx], condition[idx], target[idx]
                fake = gen(x)
                d_loss = discriminator_step(disc, opt_d, fake, c, y)
                bundle = generator_step(disc, opt_g, fake, c, y, objective, weights)
                step += 1
                row = _row(step, epoch, bundle, d_loss)
                if not all(math.isfinite(v) for v in row.values()):
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}): {row}")
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                totals.append(row["total"])
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(gen, f"{out_tag}_step{step}", step=step, **manifest)
                if config.max_steps is not None and step >= config.max_steps:
                    break
            history.append(float(np.mean(totals)))
            log.info("%s epoch %d: generator loss %.6f", stage, epoch, history[-1])
            if config.max_steps is not None and step >= config.max_steps:
                stopped_by = "max_steps"
                break
            if convergence_check(history, config.epsilon):
                stopped_by = "converged"
                break

    gen.eval()
    disc.eval()
    summary = {"step": step, "epochs": len(history), "history": history, "stopped_by": stopped_by}
    ckpt = save_checkpoint(gen, out_tag, **manifest, **summary, log=log_path.name)
    dckpt = save_checkpoint(disc, f"{out_tag}_disc", **manifest, **summary)

    from .figures import plot_loss_log

    plot_loss_log(log_path, out_tag.with_name(out_tag.name + "_loss.png"))
    return TrainResult(ckpt, dckpt, history, step, stopped_by, log_path)


def train_mask_generator(dataset, config: TrainingConfig, out_tag) -> TrainResult:
    x, c, y = stage_tensors("mask", dataset, config)
    return fit("mask", x, c, y, config, out_tag, mask_objective)


def train_recovering_network(dataset, config: TrainingConfig, out_tag, feature_extractor=None) -> TrainResult:
    x, c, y = stage_tensors("recover", dataset, config)
    extractor = feature_extractor or build_feature_extractor(config.features)
    return fit("recover", x, c, y, config, out_tag, recovery_objective(extractor))


def train_single_stage(dataset, config: TrainingConfig, out_tag, feature_extractor=None) -> TrainResult:
    x, c, y = stage_tensors("single", dataset, config)
    extractor = feature_extractor or build_feature_extractor(config.features)
    return fit(
        "single",
        x,
        c,
        y,
        config,
        out_tag,
        recovery_objective(extractor),
        extra_manifest={"use_edges": config.use_edges, "canny": asdict(config.canny)},
    )


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]
