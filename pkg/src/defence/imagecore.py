"""Image and mask arrays, masking algebra, resizing and file I/O.

Images are ``H x W x C`` float arrays in ``[0, 1]`` (C in 1, 3, 4).  Masks are
``H x W`` arrays holding exactly 0 or 1, where 1 marks a fence pixel.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

TRAINING_SIZE = 256
MASK_THRESHOLD = 0.5
MIN_SIDE = 16

_FORMATS = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}


class ShapeError(ValueError):
    pass


class ImageIOError(OSError):
    pass


def as_image(data, *, check_side: bool = True) -> np.ndarray:
    """Coerce ``data`` to a float64 ``H x W x C`` image and validate it."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ShapeError(f"expected HxWxC image with C in (1, 3, 4), got shape {arr.shape}")
    if check_side and min(arr.shape[:2]) < MIN_SIDE:
        raise ShapeError(f"image sides must be >= {MIN_SIDE}, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def as_mask(data) -> np.ndarray:
    m = np.asarray(data)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise ShapeError(f"expected HxW mask, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be strictly binary")
    return m.astype(np.uint8)


def _check_same_dims(image: np.ndarray, mask: np.ndarray) -> None:
    if image.shape[:2] != mask.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")


def apply_mask(image, mask) -> np.ndarray:
    """Zero out fence pixels: ``image * (1 - mask)`` broadcast over channels."""
    image = as_image(image, check_side=False)
    mask = as_mask(mask)
    _check_same_dims(image, mask)
    return image * (1.0 - mask[..., None])


def invert_mask(mask) -> np.ndarray:
    return (1 - as_mask(mask)).astype(np.uint8)


def binarize_mask(soft, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Threshold a soft single-channel map; the boundary value maps to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim == 3:
        if soft.shape[2] != 1:
            raise ShapeError(f"soft mask must have one channel, got {soft.shape}")
        soft = soft[..., 0]
    if soft.ndim != 2:
        raise ShapeError(f"expected HxW soft mask, got shape {soft.shape}")
    return (soft >= threshold).astype(np.uint8)


def resize_to_training_dims(image, size: int = TRAINING_SIZE) -> np.ndarray:
    """Bilinear resize to ``size x size``; a no-op when already that size."""
    image = as_image(image, check_side=False)
    if image.shape[:2] == (size, size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return np.clip(out[0].numpy().transpose(1, 2, 0), 0.0, 1.0)


def to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """HxWxC array (or a list of them) -> NCHW tensor."""
    if isinstance(image, (list, tuple)):
        return torch.cat([to_tensor(im, dtype) for im in image])
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """First item of an NCHW (or CHW) tensor -> HxWxC float64 array."""
    t = t.detach().cpu()
    if t.ndim == 4:
        t = t[0]
    return t.to(torch.float64).clamp(0.0, 1.0).numpy().transpose(1, 2, 0)


def quantize(image) -> np.ndarray:
    """Snap values to the 8-bit grid used by the file codecs."""
    return np.round(np.asarray(image, dtype=np.float64) * 255.0) / 255.0


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return as_image(np.clip(arr, 0, 1), check_side=False)
            if im.mode in ("1", "L"):
                im = im.convert("L")
            elif im.mode in ("LA", "RGBA", "PA"):
                im = im.convert("RGBA")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return as_image(arr, check_side=False)


def _write_atomic(pil_image: Image.Image, path: Path, fmt: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        pil_image.save(tmp, format=fmt)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _format_for(path: Path) -> str:
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ImageIOError(f"unsupported image format {path.suffix!r} (use .png, .jpg or .jpeg)")
    return fmt


def save_image(image, path) -> None:
    path = Path(path)
    fmt = _format_for(path)
    arr = as_image(image, check_side=False)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        pil = Image.fromarray(u8[..., 0], mode="L")
    else:
        if fmt == "JPEG" and u8.shape[2] == 4:
            u8 = u8[..., :3]
        pil = Image.fromarray(u8)
    try:
        _write_atomic(pil, path, fmt)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def save_mask(mask, path) -> None:
    """Masks are stored as 8-bit single-channel PNG, 255 for fence pixels."""
    path = Path(path)
    if _format_for(path) != "PNG":
        raise ImageIOError("masks must be stored as PNG")
    save_image(as_mask(mask).astype(np.float64), path)


def load_mask(path) -> np.ndarray:
    arr = load_image(path)
    if arr.shape[2] != 1:
        arr = arr[..., :3].mean(axis=2, keepdims=True)
    return binarize_mask(arr[..., 0], MASK_THRESHOLD)
