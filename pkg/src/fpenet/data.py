"""Synthetic segmentation scenes for desk-scale training."""
from __future__ import annotations

import colorsys

import numpy as np

from .errors import ConfigError


def class_colors(num_classes):
    """Fixed RGB color per class; class 0 (background) is mid grey."""
    colors = [(0.5, 0.5, 0.5)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
    return np.array(colors, dtype=np.float32)


def _size(size):
    return (size, size) if np.isscalar(size) else tuple(size)


def make_toy_dataset(seed, n_images, size=64, num_classes=3, noise=0.08):
    """List of ``(image[3,h,w] float32, labels[h,w] int64)`` pairs.

    Each scene is a textured class-0 background with one to three
    rectangles and discs of distinct foreground classes painted over it.
    """
    if num_classes < 2:
        raise ConfigError(f"toy dataset needs at least 2 classes, got {num_classes}")
    h, w = _size(size)
    if h % 8 or w % 8:
        raise ConfigError(f"toy image size {h}x{w} must be divisible by 8")
    rng = np.random.default_rng(seed)
    palette = class_colors(num_classes)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    samples = []
    for _ in range(n_images):
        labels = np.zeros((h, w), dtype=np.int64)
        k = int(rng.integers(1, min(3, num_classes - 1) + 1))
        classes = rng.choice(np.arange(1, num_classes), size=k, replace=False)
        for c in classes:
            if rng.random() < 0.5:
                bh = int(rng.integers(h // 6, h // 2 + 1))
                bw = int(rng.integers(w // 6, w // 2 + 1))
                y0 = int(rng.integers(0, h - bh + 1))
                x0 = int(rng.integers(0, w - bw + 1))
                labels[y0 : y0 + bh, x0 : x0 + bw] = c
            else:
                r = rng.uniform(min(h, w) / 10, min(h, w) / 4)
                cy = rng.uniform(r, h - r)
                cx = rng.uniform(r, w - r)
                labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = c

        fx, fy, phase = rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0, 2 * np.pi)
        texture = 0.08 * np.sin(fx * xx + fy * yy + phase)
        jitter = rng.uniform(-0.05, 0.05, size=(num_classes, 3)).astype(np.float32)
        image = (palette + jitter)[labels].transpose(2, 0, 1)
        image = image + np.where(labels == 0, texture, 0)[None]
        image = image + rng.normal(0, noise, size=image.shape)
        samples.append((image.astype(np.float32), labels))
    return samples


def channel_means(samples):
    return np.mean([img.mean(axis=(1, 2)) for img, _ in samples], axis=0).astype(np.float32)
