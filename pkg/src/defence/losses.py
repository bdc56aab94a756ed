"""Training objectives: adversarial, L1, perceptual, style, SSIM and the weighted totals.

Every function takes torch tensors and stays differentiable.  Image tensors are
``N x C x H x W`` (a single ``C x H x W`` image is also accepted where noted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossWeights:
    adv: float = 0.1
    l1: float = 10.0
    perc: float = 2.0
    style: float = 1.0
    ssim: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


STAGE1_WEIGHTS = LossWeights(adv=1.0, l1=10.0, perc=0.0, style=0.0, ssim=0.0)
STAGE2_WEIGHTS = LossWeights(adv=0.1, l1=10.0, perc=2.0, style=1.0, ssim=1.0)

COMPONENTS = ("adv", "l1", "perc", "style", "ssim")


@dataclass
class LossBundle:
    adv: torch.Tensor | float
    l1: torch.Tensor | float
    perc: torch.Tensor | float
    style: torch.Tensor | float
    ssim: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name in (*COMPONENTS, "total"):
            v = getattr(self, name)
            out[name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def combine(weights: LossWeights, adv=0.0, l1=0.0, perc=0.0, style=0.0, ssim=0.0) -> LossBundle:
    parts = {"adv": adv, "l1": l1, "perc": perc, "style": style, "ssim": ssim}
    total = 0.0
    for name in COMPONENTS:
        total = total + getattr(weights, name) * parts[name]
    return LossBundle(total=total, **parts)


def total_stage1_loss(adv_g, l1, weights: LossWeights = STAGE1_WEIGHTS):
    """Mask-generator objective: weighted adversarial plus L1."""
    return weights.adv * adv_g + weights.l1 * l1


def total_stage2_loss(adv_g, l1, perc, style, ssim, weights: LossWeights = STAGE2_WEIGHTS) -> LossBundle:
    """Recovery/single-stage objective; the bundle keeps every component."""
    return combine(weights, adv=adv_g, l1=l1, perc=perc, style=style, ssim=ssim)


# ---------------------------------------------------------------------------
# Pixel and adversarial terms


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b)
    return (a - b).abs().mean()


def _clamp_scores(scores: torch.Tensor) -> torch.Tensor:
    return scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def adversarial_loss_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Negated discriminator objective, averaged over the patch grid."""
    real = _clamp_scores(real_scores)
    fake = _clamp_scores(fake_scores)
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def adversarial_loss_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term ``-mean log D(fake)``."""
    return -torch.log(_clamp_scores(fake_scores)).mean()


# ---------------------------------------------------------------------------
# Feature-space terms


def _as_batched(act: torch.Tensor) -> torch.Tensor:
    if act.ndim == 3:
        return act.unsqueeze(0)
    if act.ndim != 4:
        raise ValueError(f"activations must be CxHxW or NxCxHxW, got {tuple(act.shape)}")
    return act


def gram_matrix(act: torch.Tensor) -> torch.Tensor:
    """Channel inner products normalized by C*H*W; returns N x C x C (or C x C)."""
    squeeze = act.ndim == 3
    a = _as_batched(act)
    n, c, h, w = a.shape
    flat = a.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g[0] if squeeze else g


def _check_aligned(acts_pred, acts_gt) -> None:
    if len(acts_pred) != len(acts_gt):
        raise ValueError(f"layer count mismatch: {len(acts_pred)} vs {len(acts_gt)}")
    if not acts_pred:
        raise ValueError("need at least one feature layer")
    for i, (p, g) in enumerate(zip(acts_pred, acts_gt)):
        if p.shape != g.shape:
            raise ValueError(f"layer {i} shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")


def perceptual_loss(acts_pred, acts_gt) -> torch.Tensor:
    """Sum over layers of the per-element mean absolute activation difference."""
    _check_aligned(acts_pred, acts_gt)
    return sum((g - p).abs().mean() for p, g in zip(acts_pred, acts_gt))


def style_loss(acts_pred, acts_gt) -> torch.Tensor:
    """Layer mean of the mean absolute Gram-matrix difference."""
    _check_aligned(acts_pred, acts_gt)
    terms = [(gram_matrix(p) - gram_matrix(g)).abs().mean() for p, g in zip(acts_pred, acts_gt)]
    return sum(terms) / len(terms)


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    k = torch.exp(-(x**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ValueError(f"expected an image tensor, got shape {tuple(x.shape)}")
    return x


def _local_mean(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    r = window.numel() // 2
    padded = F.pad(x, (r, r, r, r), mode="reflect")
    kh = window.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = window.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    return F.conv2d(F.conv2d(padded, kh, groups=c), kw, groups=c)


def ssim_map(x: torch.Tensor, y: torch.Tensor, params: SsimParams | None = None) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, shape ``N x 1 x H x W``.

    Local statistics use a Gaussian window with reflective borders, so the map
    has the input's spatial size.
    """
    p = params or SsimParams()
    _check_same_shape(x, y)
    x, y = _as_nchw(x), _as_nchw(y)
    r = p.window_size // 2
    if min(x.shape[-2:]) <= r:
        raise ValueError(f"images must be larger than {r} pixels per side for SSIM")
    window = gaussian_window(p.window_size, p.sigma, dtype=x.dtype).to(x.device)
    mu_x = _local_mean(x, window)
    mu_y = _local_mean(y, window)
    var_x = _local_mean(x * x, window) - mu_x * mu_x
    var_y = _local_mean(y * y, window) - mu_y * mu_y
    cov = _local_mean(x * y, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + p.c1) * (2 * cov + p.c2)
    den = (mu_x * mu_x + mu_y * mu_y + p.c1) * (var_x + var_y + p.c2)
    return (num / den).mean(dim=1, keepdim=True)


def ssim_loss(x: torch.Tensor, y: torch.Tensor, params: SsimParams | None = None) -> torch.Tensor:
    return (1.0 - ssim_map(x, y, params)).mean()


def ssim_index(x: torch.Tensor, y: torch.Tensor, params: SsimParams | None = None) -> float:
    """Mean SSIM as a plain float."""
    with torch.no_grad():
        return float(ssim_map(x.double(), y.double(), params).mean())


def psnr(x: torch.Tensor, y: torch.Tensor, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped for identical inputs."""
    mse = float(((x.double() - y.double()) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))
