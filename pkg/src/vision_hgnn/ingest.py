"""Image-folder loading and patch tokenization."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Micrograph:
    pixels: np.ndarray  # h x w x c
    label_index: int = -1
    source_path: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass
class PatchGrid:
    features: np.ndarray  # n x (p*p*c)
    n: int
    p: int


def worker_count() -> int:
    raw = os.environ.get("VHGNN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


def decode_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as h x w x 3 floats in [0, 1]. Grayscale is replicated."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def load_dataset(root_dir: str | Path) -> tuple[list[Micrograph], list[str]]:
    """Load ``root/<class_name>/<image>`` into micrographs plus the class table.

    Ordering is by class name, then file name; class indices follow the sorted
    class names.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_names:
        raise DataError(f"no classes found in {root}")
    entries: list[tuple[Path, int]] = []
    for idx, name in enumerate(class_names):
        files = sorted(
            f for f in (root / name).iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise DataError(f"class directory {root / name} holds no PNG/JPEG/BMP images")
        entries.extend((f, idx) for f in files)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        pixels = list(pool.map(lambda e: decode_image(e[0]), entries))
    micrographs = [Micrograph(px, label, str(path)) for px, (path, label) in zip(pixels, entries)]
    return micrographs, class_names


def normalize(m: Micrograph) -> Micrograph:
    """Map [0, 1] intensities to [-1, 1] with mean 0.5 and scale 0.5 per channel."""
    return replace(m, pixels=(m.pixels - 0.5) / 0.5)


def denormalize(m: Micrograph) -> Micrograph:
    return replace(m, pixels=m.pixels * 0.5 + 0.5)


def _resize_axis(arr: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    in_size = arr.shape[axis]
    if in_size == out_size:
        return arr
    # half-pixel centres (align_corners=False), edge clamped
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    shape = [1] * arr.ndim
    shape[axis] = out_size
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resize(m: Micrograph, target_h: int, target_w: int) -> Micrograph:
    """Bilinear resize without antialiasing."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resize targets must be >= 1, got {target_h}x{target_w}")
    out = _resize_axis(m.pixels, target_h, 0)
    out = _resize_axis(out, target_w, 1)
    return replace(m, pixels=out)


def patchify(m: Micrograph, p: int) -> PatchGrid:
    """Split into non-overlapping p x p patches in raster order, one flattened row each."""
    h, w, c = m.pixels.shape
    if p < 1 or h % p or w % p:
        raise DataError(f"image {h}x{w} is not divisible into {p}x{p} patches; resize first")
    rows, cols = h // p, w // p
    blocks = m.pixels.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(np.ascontiguousarray(blocks.reshape(rows * cols, p * p * c)), rows * cols, p)


def unpatchify(grid: PatchGrid, h: int, w: int, c: int) -> np.ndarray:
    p = grid.p
    rows, cols = h // p, w // p
    blocks = grid.features.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(h, w, c)


def preprocess(m: Micrograph, image_size: int, p: int) -> PatchGrid:
    """Resize to a square ``image_size``, normalize, then patchify."""
    return patchify(normalize(resize(m, image_size, image_size)), p)


def preprocess_all(micrographs: list[Micrograph], image_size: int, p: int, dtype=np.float32) -> np.ndarray:
    """Stack the patch grids of a collection as N x n x (p*p*c)."""
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        grids = list(pool.map(lambda m: preprocess(m, image_size, p).features, micrographs))
    return np.stack(grids).astype(dtype)
