"""Procedural fence lattices and synthetic training triples.

A fence is described by a :class:`LatticeSpec`: a periodic wire pattern in a
"lattice plane", rotated and then projected into the image by a homography.
Rasterization supersamples each pixel and thresholds coverage at 0.5 so the
emitted masks are strictly binary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .imagecore import (
    ImageIOError,
    ShapeError,
    apply_mask,
    as_image,
    as_mask,
    load_image,
    quantize,
    resize_to_training_dims,
    save_image,
    save_mask,
)

log = logging.getLogger(__name__)

PATTERNS = ("diamond", "rect", "bars")
MAX_COVERAGE = 0.6
SUPERSAMPLE = 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class FenceConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Appearance:
    solid_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    # Additive brightness offset realized for this sample.
    brightness_jitter: float = 0.0

    def color(self) -> np.ndarray:
        return np.clip(np.asarray(self.solid_color, dtype=np.float64) + self.brightness_jitter, 0.0, 1.0)


@dataclass(frozen=True)
class LatticeSpec:
    pattern: str = "diamond"
    spacing: float = 16.0
    wire_width: float = 2.0
    rotation: float = 0.0
    homography: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    appearance: Appearance = field(default_factory=Appearance)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise FenceConfigError(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if self.spacing < 4:
            raise FenceConfigError(f"spacing must be >= 4, got {self.spacing}")
        if not 1 <= self.wire_width < self.spacing:
            raise FenceConfigError(
                f"wire_width must satisfy 1 <= wire_width < spacing, got {self.wire_width} / {self.spacing}"
            )
        h = np.asarray(self.homography, dtype=np.float64)
        if h.shape != (3, 3) or abs(np.linalg.det(h)) <= 1e-9:
            raise FenceConfigError("homography must be an invertible 3x3 matrix")
        if self.appearance.brightness_jitter < 0:
            raise FenceConfigError("brightness_jitter must be >= 0")

    @property
    def nominal_coverage(self) -> float:
        """Coverage of the unwarped periodic pattern."""
        return pattern_coverage(self.pattern, self.spacing, self.wire_width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["homography"] = [list(row) for row in self.homography]
        d["appearance"]["solid_color"] = list(self.appearance.solid_color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeSpec":
        app = d.get("appearance", {})
        return cls(
            pattern=d["pattern"],
            spacing=float(d["spacing"]),
            wire_width=float(d["wire_width"]),
            rotation=float(d["rotation"]),
            homography=tuple(tuple(float(v) for v in row) for row in d["homography"]),
            appearance=Appearance(
                solid_color=tuple(float(c) for c in app.get("solid_color", (0.5, 0.5, 0.5))),
                brightness_jitter=float(app.get("brightness_jitter", 0.0)),
            ),
        )


def pattern_coverage(pattern: str, spacing: float, wire_width: float) -> float:
    f = wire_width / spacing
    if pattern == "bars":
        return f
    return 1.0 - (1.0 - f) ** 2


# ---------------------------------------------------------------------------
# Sampling


@dataclass
class FenceRanges:
    """Closed sampling ranges; each pair is (low, high)."""

    patterns: tuple = PATTERNS
    spacing: tuple = (12.0, 28.0)
    wire_width: tuple = (1.5, 4.0)
    rotation: tuple = (-30.0, 30.0)
    # Magnitudes of the homography perturbation in centred, size-normalized coordinates.
    shear: tuple = (0.0, 0.15)
    perspective: tuple = (0.0, 0.3)
    color: tuple = (0.0, 1.0)
    brightness_jitter: tuple = (0.0, 0.15)
    max_attempts: int = 64

    def __post_init__(self):
        self.patterns = tuple(self.patterns)
        for name in ("spacing", "wire_width", "rotation", "shear", "perspective", "color", "brightness_jitter"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise FenceConfigError(f"empty range for {name}: [{lo}, {hi}]")
            setattr(self, name, (lo, hi))
        if not self.patterns or any(p not in PATTERNS for p in self.patterns):
            raise FenceConfigError(f"patterns must be a nonempty subset of {PATTERNS}")
        if self.spacing[0] < 4:
            raise FenceConfigError("spacing range must start at >= 4")
        if self.wire_width[0] < 1:
            raise FenceConfigError("wire_width range must start at >= 1")
        if self.wire_width[0] >= self.spacing[1]:
            raise FenceConfigError(
                f"wire_width range {self.wire_width} cannot fit inside spacing range {self.spacing}"
            )
        if self.brightness_jitter[0] < 0:
            raise FenceConfigError("brightness_jitter range must be nonnegative")
        if self.color[0] < 0 or self.color[1] > 1:
            raise FenceConfigError("color range must lie in [0, 1]")
        best = min(pattern_coverage(p, self.spacing[1], self.wire_width[0]) for p in self.patterns)
        if best > MAX_COVERAGE:
            raise FenceConfigError(
                f"no spec in these ranges keeps coverage <= {MAX_COVERAGE} (best {best:.3f})"
            )

    @classmethod
    def from_mapping(cls, d: dict | None) -> "FenceRanges":
        d = dict(d or {})
        if "pattern" in d and "patterns" not in d:
            d["patterns"] = d.pop("pattern")
        if isinstance(d.get("patterns"), str):
            d["patterns"] = (d["patterns"],)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise FenceConfigError(f"unknown fence config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def load_fence_config(path) -> FenceRanges:
    """Read a YAML key/value file of sampling ranges (missing keys keep defaults)."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise FenceConfigError(f"cannot read fence config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise FenceConfigError("fence config must be a mapping")
    return FenceRanges.from_mapping(data.get("fence", data))


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _signed(rng: np.random.Generator, bounds) -> float:
    return _uniform(rng, bounds) * (1.0 if rng.random() < 0.5 else -1.0)


def sample_lattice(ranges: FenceRanges | dict | None = None, seed: int = 0) -> LatticeSpec:
    """Draw a random lattice; deterministic in ``seed``.

    Draws whose nominal coverage exceeds the cap are rejected and redrawn.
    """
    if not isinstance(ranges, FenceRanges):
        ranges = FenceRanges.from_mapping(ranges)
    rng = np.random.default_rng(seed)
    for _ in range(ranges.max_attempts):
        pattern = ranges.patterns[int(rng.integers(len(ranges.patterns)))]
        spacing = _uniform(rng, ranges.spacing)
        wire = _uniform(rng, ranges.wire_width)
        rotation = _uniform(rng, ranges.rotation)
        shx, shy = _signed(rng, ranges.shear), _signed(rng, ranges.shear)
        px, py = _signed(rng, ranges.perspective), _signed(rng, ranges.perspective)
        color = tuple(_uniform(rng, ranges.color) for _ in range(3))
        jitter = _uniform(rng, ranges.brightness_jitter)
        if wire >= spacing or pattern_coverage(pattern, spacing, wire) > MAX_COVERAGE:
            continue
        homography = ((1.0, shx, 0.0), (shy, 1.0, 0.0), (px, py, 1.0))
        if abs(np.linalg.det(np.asarray(homography))) <= 1e-9:
            continue
        return LatticeSpec(
            pattern=pattern,
            spacing=spacing,
            wire_width=wire,
            rotation=rotation,
            homography=homography,
            appearance=Appearance(solid_color=color, brightness_jitter=jitter),
        )
    raise FenceConfigError(f"no feasible lattice after {ranges.max_attempts} draws; tighten the ranges")


# ---------------------------------------------------------------------------
# Rasterization and compositing


def _lattice_coords(spec: LatticeSpec, height: int, width: int, ss: int):
    """Lattice-plane coordinates (u, v) of every subsample, shape (H*ss, W*ss)."""
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(height)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(width)[:, None] + offs[None, :]).ravel()
    x, y = np.meshgrid(xs, ys)

    # Homography acts on centred coordinates normalized by the longer side.
    scale = float(max(height, width))
    cx, cy = width / 2.0, height / 2.0
    qx, qy = (x - cx) / scale, (y - cy) / scale
    h = np.asarray(spec.homography, dtype=np.float64)
    denom = h[2, 0] * qx + h[2, 1] * qy + h[2, 2]
    sx = (h[0, 0] * qx + h[0, 1] * qy + h[0, 2]) / denom
    sy = (h[1, 0] * qx + h[1, 1] * qy + h[1, 2]) / denom
    px, py = sx * scale + cx, sy * scale + cy

    theta = math.radians(spec.rotation)
    c, s = math.cos(theta), math.sin(theta)
    return c * px + s * py, -s * px + c * py


def rasterize_fence(spec: LatticeSpec, height: int, width: int) -> np.ndarray:
    """Binary ``H x W`` fence mask for ``spec``."""
    if height < 16 or width < 16:
        raise ShapeError(f"fence masks need sides >= 16, got {height}x{width}")
    u, v = _lattice_coords(spec, height, width, SUPERSAMPLE)
    if spec.pattern == "diamond":
        u, v = (u + v) / math.sqrt(2.0), (v - u) / math.sqrt(2.0)
    on_u = np.mod(u, spec.spacing) < spec.wire_width
    if spec.pattern == "bars":
        wire = on_u
    else:
        wire = on_u | (np.mod(v, spec.spacing) < spec.wire_width)
    cover = wire.reshape(height, SUPERSAMPLE, width, SUPERSAMPLE).mean(axis=(1, 3))
    return (cover >= 0.5).astype(np.uint8)


def coverage(mask) -> float:
    return float(np.mean(as_mask(mask)))


def composite(clean, mask, appearance: Appearance) -> np.ndarray:
    """Paint the fence colour over ``clean`` wherever ``mask`` is 1."""
    clean = as_image(clean, check_side=False)
    mask = as_mask(mask)
    if clean.shape[:2] != mask.shape:
        raise ShapeError(f"image {clean.shape[:2]} and mask {mask.shape} differ in size")
    color = appearance.color()
    if clean.shape[2] == 1:
        fill = np.array([color @ np.array([0.299, 0.587, 0.114])])
    elif clean.shape[2] == 4:
        fill = np.append(color, 1.0)
    else:
        fill = color
    return apply_mask(clean, mask) + mask[..., None] * fill


# ---------------------------------------------------------------------------
# Dataset building


def sample_seed(global_seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def list_corpus(corpus_dir) -> list[Path]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise ImageIOError(f"corpus directory not found: {corpus_dir}")
    return sorted(p for p in corpus_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def make_triple(clean, spec: LatticeSpec, size: int):
    """Return (clean, mask, fenced) at ``size x size``; clean is 8-bit quantized first."""
    clean = quantize(resize_to_training_dims(as_image(clean, check_side=False)[..., :3], size))
    if clean.shape[2] == 1:
        clean = np.repeat(clean, 3, axis=2)
    mask = rasterize_fence(spec, size, size)
    return clean, mask, composite(clean, mask, spec.appearance)


def _build_one(path: Path, sample_id: str, ranges: FenceRanges, out_dir: Path, seed: int, size: int):
    try:
        source = load_image(path)
    except ImageIOError as exc:
        log.warning("skipping unreadable source image %s: %s", path, exc)
        return None
    if source.shape[2] == 1:
        source = np.repeat(source, 3, axis=2)
    # Homography and rotation can push real coverage outside (0, cap]; redraw.
    for attempt in range(ranges.max_attempts):
        spec = sample_lattice(ranges, seed + attempt)
        clean, mask, fenced = make_triple(source, spec, size)
        if 0.0 < mask.mean() <= MAX_COVERAGE:
            break
    else:
        log.warning("skipping %s: no lattice within the coverage cap", path)
        return None
    sample_dir = out_dir / sample_id
    save_image(clean, sample_dir / "clean.png")
    save_mask(mask, sample_dir / "mask.png")
    save_image(fenced, sample_dir / "fenced.png")
    return {
        "id": sample_id,
        "source": path.name,
        "seed": seed,
        "attempt": attempt,
        "coverage": float(mask.mean()),
        "lattice": spec.to_dict(),
    }


def build_synthetic_dataset(
    corpus_dir,
    fence_config: FenceRanges | dict | str | Path | None,
    out_dir,
    seed: int = 0,
    size: int = 256,
    workers: int = 1,
) -> dict:
    """Write ``<out>/<id>/{clean,mask,fenced}.png`` for every corpus image plus ``manifest.json``."""
    if isinstance(fence_config, (str, Path)):
        ranges = load_fence_config(fence_config)
    elif isinstance(fence_config, FenceRanges):
        ranges = fence_config
    else:
        ranges = FenceRanges.from_mapping(fence_config)
    sources = list_corpus(corpus_dir)
    if not sources:
        raise ImageIOError(f"corpus directory {corpus_dir} holds no images")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ImageIOError(f"output directory {out_dir} is not writable: {exc}") from exc

    jobs = []
    for i, path in enumerate(sources):
        sample_id = f"{i:05d}_{path.stem}"
        jobs.append((path, sample_id, ranges, out_dir, sample_seed(seed, sample_id), size))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(lambda job: _build_one(*job), jobs))
    else:
        entries = [_build_one(*job) for job in jobs]
    samples = [e for e in entries if e is not None]
    if not samples:
        raise ImageIOError(f"no readable images in corpus {corpus_dir}")

    manifest = {
        "seed": seed,
        "size": size,
        "fence_config": ranges.to_dict(),
        "samples": samples,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def write_toy_corpus(out_dir, count: int = 8, size: int = 64, seed: int = 0) -> list[Path]:
    """Write smooth, colourful procedural scenes; handy when no photo corpus is at hand."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    paths = []
    for i in range(count):
        base = rng.uniform(0.1, 0.9, 3)
        slope = rng.uniform(-0.4, 0.4, (2, 3))
        img = base + xx[..., None] * slope[0] + yy[..., None] * slope[1]
        for _ in range(3):
            cx, cy, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.25)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
            img += blob[..., None] * rng.uniform(-0.5, 0.5, 3)
        path = out_dir / f"scene_{i:03d}.png"
        save_image(np.clip(img, 0.0, 1.0), path)
        paths.append(path)
    return paths
