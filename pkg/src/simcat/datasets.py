"""Procedural toy image datasets and raw tensor ingestion.

``make_shapes`` renders ten classes of soft-edged shapes on smooth colored
backgrounds, a stand-in for small natural-image datasets that trains in
seconds on a CPU.
"""
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "hstripes", "vstripes", "cross", "diagonal",
               "checker", "dots")


def _soft(signed_distance, sharpness):
    return 1.0 / (1.0 + np.exp(-sharpness * signed_distance))


def _mask(kind, yy, xx, cy, cx, r, angle, sharp):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return _soft(r - np.hypot(dy, dx), sharp)
    if kind == "square":
        ca, sa = np.cos(angle), np.sin(angle)
        u, v = ca * dx + sa * dy, -sa * dx + ca * dy
        return _soft(r * 0.85 - np.maximum(np.abs(u), np.abs(v)), sharp)
    if kind == "triangle":
        d = np.full_like(xx, np.inf)
        for k in range(3):
            a = angle + 2 * np.pi * k / 3
            d = np.minimum(d, r * 0.5 - (np.cos(a) * dx + np.sin(a) * dy))
        return _soft(d, sharp)
    if kind == "ring":
        return _soft(r * 0.3 - np.abs(np.hypot(dy, dx) - r * 0.75), sharp)
    if kind == "hstripes":
        return _soft(np.cos(2 * np.pi * yy / (r * 0.9) + angle) * 2, sharp / 2) * _soft(r * 1.3 - np.hypot(dy, dx), sharp)
    if kind == "vstripes":
        return _soft(np.cos(2 * np.pi * xx / (r * 0.9) + angle) * 2, sharp / 2) * _soft(r * 1.3 - np.hypot(dy, dx), sharp)
    if kind == "cross":
        arm = np.maximum(_soft(r * 0.3 - np.abs(dx), sharp) * _soft(r - np.abs(dy), sharp),
                         _soft(r * 0.3 - np.abs(dy), sharp) * _soft(r - np.abs(dx), sharp))
        return arm
    if kind == "diagonal":
        return _soft(np.cos(2 * np.pi * (xx + yy) / (r * 1.2) + angle) * 2, sharp / 2) * _soft(r * 1.3 - np.hypot(dy, dx), sharp)
    if kind == "checker":
        period = r * 0.8
        s = np.cos(np.pi * dx / period) * np.cos(np.pi * dy / period)
        return _soft(s * 2, sharp / 2) * _soft(r * 1.2 - np.maximum(np.abs(dx), np.abs(dy)), sharp)
    if kind == "dots":
        off = r * 0.6
        ca, sa = np.cos(angle) * off, np.sin(angle) * off
        return np.maximum(_soft(r * 0.4 - np.hypot(dy - sa, dx - ca), sharp),
                          _soft(r * 0.4 - np.hypot(dy + sa, dx + ca), sharp))
    raise InvalidInputError(f"unknown shape {kind!r}")


def make_shapes(n_per_class, n_classes=10, size=32, noise=(0.0, 0.05), seed=0, dtype=np.float32):
    """Return ``(images NHWC in [0, 1], labels)`` with classes interleaved.

    ``noise`` is the standard deviation of per-pixel Gaussian grain, either a
    constant or a ``(low, high)`` range drawn uniformly per image so texture
    varies across the dataset.
    """
    lo, hi = (noise, noise) if np.isscalar(noise) else noise
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise InvalidInputError(f"n_classes must be in [2, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.tile(np.arange(n_classes), n_per_class)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, size, size, 3), dtype=np.float64)
    sharp = 8.0 * 32 / size
    for i, c in enumerate(labels):
        bg0, bg1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        theta = rng.uniform(0, 2 * np.pi)
        t = ((np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) / size + 0.5).clip(0, 1)
        bg = bg0 * (1 - t[..., None]) + bg1 * t[..., None]
        fg = rng.uniform(0.0, 1.0, 3)
        while np.abs(fg - bg.mean(axis=(0, 1))).max() < 0.3:
            fg = rng.uniform(0.0, 1.0, 3)
        r = size * rng.uniform(0.22, 0.32)
        cy, cx = size / 2 + rng.uniform(-0.12, 0.12, 2) * size
        m = _mask(SHAPE_NAMES[c], yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi), sharp / (size / 32))
        img = bg * (1 - m[..., None]) + fg * m[..., None]
        sigma = rng.uniform(lo, hi)
        if sigma > 0:
            img = img + rng.normal(0, sigma, img.shape)
        images[i] = img
    return np.clip(images, 0, 1).astype(dtype), labels


def load_image_tensor(path):
    """Load an NHWC image tensor from ``.npy`` or ``.npz`` (keys ``images`` and optional ``labels``).

    Integer tensors are scaled from [0, 255] to [0, 1].
    """
    path = Path(path)
    try:
        if path.suffix == ".npz":
            data = np.load(path)
            images = data["images"]
            labels = data["labels"] if "labels" in data else None
        else:
            images, labels = np.load(path), None
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read image tensor {path}: {exc}") from exc
    if images.ndim != 4:
        raise FormatError(f"{path}: expected an NHWC tensor, got shape {images.shape}")
    if np.issubdtype(images.dtype, np.integer):
        images = images.astype(np.float32) / 255.0
    return images.astype(np.float32), labels
