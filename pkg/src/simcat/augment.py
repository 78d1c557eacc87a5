"""Batched image augmentations on NHWC tensors with pixels in [0, 1].

All randomness is drawn from a ``numpy.random.Generator`` so a seed fully
determines the output.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple = (0.5, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: float = 0.0
    grayscale_prob: float = 0.0
    interpolation: str = "bilinear"

    def to_dict(self):
        return {
            "interpolation": self.interpolation,
            "crop_scale": list(self.crop_scale),
            "crop_ratio": list(self.crop_ratio),
            "flip_prob": self.flip_prob,
            "jitter": self.jitter,
            "grayscale_prob": self.grayscale_prob,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("crop_scale", "crop_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# random resized crop -> flip, as used for the clean copies during adversarial training
AT_POLICY = AugmentPolicy()
CONTRASTIVE_POLICY = AugmentPolicy(crop_scale=(0.3, 1.0), flip_prob=0.5, jitter=0.4, grayscale_prob=0.2,
                                   interpolation="nearest")


def _as_nchw(images):
    x = torch.as_tensor(images)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2)


def random_resized_crop(x, scale, ratio, rng, mode="bilinear"):
    """Crop a random box of relative area in ``scale`` and resize back (bilinear)."""
    n = x.shape[0]
    area = rng.uniform(scale[0], scale[1], size=n)
    log_r = rng.uniform(np.log(ratio[0]), np.log(ratio[1]), size=n)
    r = np.exp(log_r)
    w = np.minimum(np.sqrt(area * r), 1.0)
    h = np.minimum(np.sqrt(area / r), 1.0)
    cx = rng.uniform(-1.0, 1.0, size=n) * (1.0 - w)
    cy = rng.uniform(-1.0, 1.0, size=n) * (1.0 - h)
    full = (w >= 1.0) & (h >= 1.0)
    if full.all():
        return x
    theta = np.zeros((n, 2, 3))
    theta[:, 0, 0] = w
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    theta = torch.as_tensor(theta, dtype=x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode=mode, padding_mode="border", align_corners=False)
    keep = torch.as_tensor(full)
    out[keep] = x[keep]
    return out


def horizontal_flip(x, prob, rng):
    flip = torch.as_tensor(rng.random(x.shape[0]) < prob)
    if not flip.any():
        return x
    out = x.clone()
    out[flip] = x[flip].flip(-1)
    return out


def color_jitter(x, strength, rng):
    n = x.shape[0]
    shape = (n, 1, 1, 1)
    b = torch.as_tensor(rng.uniform(1 - strength, 1 + strength, n), dtype=x.dtype).view(shape)
    c = torch.as_tensor(rng.uniform(1 - strength, 1 + strength, n), dtype=x.dtype).view(shape)
    s = torch.as_tensor(rng.uniform(1 - strength, 1 + strength, n), dtype=x.dtype).view(shape)
    x = (x * b).clamp(0, 1)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = ((x - mean) * c + mean).clamp(0, 1)
    if x.shape[1] == 3:
        gray = _gray(x)
        x = ((x - gray) * s + gray).clamp(0, 1)
    return x


def _gray(x):
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * weights).sum(dim=1, keepdim=True)


def random_grayscale(x, prob, rng):
    if x.shape[1] != 3:
        return x
    pick = torch.as_tensor(rng.random(x.shape[0]) < prob)
    if not pick.any():
        return x
    out = x.clone()
    out[pick] = _gray(x[pick]).expand(-1, 3, -1, -1)
    return out


def augment(images, policy, rng):
    """Apply ``policy`` to a batch of NHWC images; returns a tensor of the same shape.

    The order is crop, flip, jitter, grayscale. Identity parameters
    (scale and ratio pinned to 1, zero probabilities) return the input values
    unchanged.
    """
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    squeeze = torch.as_tensor(images).ndim == 3
    x = _as_nchw(images)
    x = random_resized_crop(x, policy.crop_scale, policy.crop_ratio, rng, policy.interpolation)
    x = horizontal_flip(x, policy.flip_prob, rng)
    if policy.jitter > 0:
        x = color_jitter(x, policy.jitter, rng)
    if policy.grayscale_prob > 0:
        x = random_grayscale(x, policy.grayscale_prob, rng)
    x = x.clamp(0, 1).permute(0, 2, 3, 1)
    return x[0] if squeeze else x
