"""Generated oriented-texture images for smoke tests and small experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def oriented_textures(
    per_class: int = 32,
    num_classes: int = 4,
    size: int = 64,
    noise: float = 0.25,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal gratings whose orientation encodes the class.

    Class c uses angle c * pi / num_classes. Frequency, phase, contrast and
    per-channel tint are drawn at random per image, plus Gaussian pixel noise.
    Returns N x size x size x 3 images in [0, 1] and the labels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for c in range(num_classes):
        theta = c * np.pi / num_classes
        for _ in range(per_class):
            freq = rng.uniform(0.08, 0.16)
            phase = rng.uniform(0, 2 * np.pi)
            contrast = rng.uniform(0.25, 0.45)
            wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            tint = rng.uniform(0.8, 1.0, size=3)
            img = 0.5 + contrast * wave[..., None] * tint
            img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    return np.stack(images), np.asarray(labels)


def write_image_folder(root, images: np.ndarray, labels: np.ndarray, class_names=None) -> list[str]:
    """Save images as PNG under ``root/<class>/img_XXXX.png``; returns the class names."""
    root = Path(root)
    num_classes = int(labels.max()) + 1
    names = list(class_names or [f"class_{c}" for c in range(num_classes)])
    for i, (img, y) in enumerate(zip(images, labels)):
        folder = root / names[int(y)]
        folder.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(folder / f"img_{i:04d}.png")
    return names
