"""Datasets: a synthetic shape corpus plus loaders for external data.

The synthetic generator draws one of ten geometric figures over a color
gradient background. Figure color is forced away from the local
background so every class is separable at 32x32, and a small amount of
pixel noise keeps the classifier from keying on exact byte values.
Everything is driven by one numpy Generator, so a (seed, n) pair always
produces the same tensors.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError, StateError

CLASS_NAMES = (
    "disc", "ring", "square", "diamond", "triangle",
    "plus", "cross", "hbar", "vbar", "checker",
)


@dataclass
class LabeledDataset:
    """Images (B, H, W, C) float32 in [0, 1] with int64 labels."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be (B, H, W, C), got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputError("labels must be one per image")
        if self.num_classes < 2:
            raise InputError("need at least two classes")
        lo = int(self.labels.min().item()) if len(self) else 0
        hi = int(self.labels.max().item()) if len(self) else 0
        if len(self) and (lo < 0 or hi >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes}), saw [{lo}, {hi}]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def _shape_mask(label, u, v):
    """Boolean mask for class `label` in centered unit coordinates."""
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    if label == 0:                                   # disc
        return r <= 1.0
    if label == 1:                                   # ring
        return (r <= 1.0) & (r >= 0.55)
    if label == 2:                                   # square
        return (au <= 0.82) & (av <= 0.82)
    if label == 3:                                   # diamond
        return au + av <= 1.05
    if label == 4:                                   # triangle, apex up
        return (v <= 0.85) & (v >= -0.85 + 1.9 * au)
    if label == 5:                                   # plus
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if label == 6:                                   # diagonal cross
        return (np.abs(u - v) <= 0.38) | (np.abs(u + v) <= 0.38)
    if label == 7:                                   # horizontal bar
        return (av <= 0.32) & (au <= 0.95)
    if label == 8:                                   # vertical bar
        return (au <= 0.32) & (av <= 0.95)
    if label == 9:                                   # checker quadrants
        return ((u > 0) ^ (v > 0)) & (au <= 0.9) & (av <= 0.9)
    raise InputError(f"no shape for label {label}")


def make_synthetic(n, num_classes=10, image_size=32, channels=3, seed=0, noise=0.02,
                   background="gradient"):
    """Deterministic labeled dataset of `n` shape images.

    background "gradient" blends two random colors across the image;
    "solid" fills with one. Either way the class signal lives purely in
    the shape, never in the colors.
    """
    if n < 1:
        raise InputError("need at least one sample")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise InputError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
    if background not in ("solid", "gradient"):
        raise InputError(f"unknown background {background!r}")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    # pixel centers in [-1, 1]
    gx = 2.0 * xs / (image_size - 1) - 1.0
    gy = 2.0 * ys / (image_size - 1) - 1.0

    images = np.empty((n, image_size, image_size, channels), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        t = (gx * np.cos(theta) + gy * np.sin(theta) + 1.0) / 2.0
        c0 = rng.uniform(0.0, 1.0, size=channels)
        c1 = rng.uniform(0.0, 1.0, size=channels)
        if background == "solid":
            c1 = c0
        bg = c0 + t[..., None] * (c1 - c0)

        fg = rng.uniform(0.0, 1.0, size=channels)
        mid = (c0 + c1) / 2.0
        tries = 0
        while np.linalg.norm(fg - mid) < 0.6 and tries < 32:
            fg = rng.uniform(0.0, 1.0, size=channels)
            tries += 1
        if np.linalg.norm(fg - mid) < 0.6:
            fg = 1.0 - mid                           # guaranteed contrast

        scale = rng.uniform(0.55, 0.8)
        cx = rng.uniform(-0.15, 0.15)
        cy = rng.uniform(-0.15, 0.15)
        mask = _shape_mask(int(labels[i]), (gx - cx) / scale, (gy - cy) / scale)

        img = np.where(mask[..., None], fg, bg)
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    return LabeledDataset(torch.from_numpy(images),
                          torch.from_numpy(labels.astype(np.int64)),
                          num_classes)


def split(dataset, sizes, seed=0):
    """Shuffle once and cut into consecutive chunks of the given sizes."""
    total = int(sum(sizes))
    if total > len(dataset):
        raise InputError(f"split sizes sum to {total} but dataset has {len(dataset)}")
    order = torch.randperm(len(dataset),
                           generator=torch.Generator().manual_seed(seed))
    parts, start = [], 0
    for size in sizes:
        parts.append(dataset.subset(order[start:start + size]))
        start += size
    return parts


def save_npz(path, dataset):
    np.savez(path,
             images=dataset.images.numpy(),
             labels=dataset.labels.numpy(),
             num_classes=np.int64(dataset.num_classes))


def load_npz(path):
    if not os.path.exists(path):
        raise StateError(f"dataset {path!r} does not exist")
    try:
        data = np.load(path)
        images = torch.from_numpy(np.array(data["images"], dtype=np.float32))
        labels = torch.from_numpy(np.array(data["labels"], dtype=np.int64))
        k = int(data["num_classes"])
    except (OSError, ValueError, KeyError) as exc:
        raise StateError(f"cannot read dataset {path!r}: {exc}") from exc
    return LabeledDataset(images, labels, k)


def load_manifest(path):
    """JSON manifest: {"num_classes": K, "samples": [{"path": .., "label": ..}]}.

    Image files must be .npy arrays (H, W, C) in [0, 1]; labels must be
    dense in [0, K).
    """
    if not os.path.exists(path):
        raise StateError(f"manifest {path!r} does not exist")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise StateError(f"cannot read manifest {path!r}: {exc}") from exc
    if "num_classes" not in manifest or "samples" not in manifest:
        raise StateError("manifest needs 'num_classes' and 'samples'")
    k = int(manifest["num_classes"])
    base = os.path.dirname(os.path.abspath(path))
    images, labels = [], []
    for entry in manifest["samples"]:
        file_path = entry["path"]
        if not os.path.isabs(file_path):
            file_path = os.path.join(base, file_path)
        try:
            arr = np.load(file_path)
        except (OSError, ValueError) as exc:
            raise StateError(f"cannot read sample {file_path!r}: {exc}") from exc
        images.append(np.asarray(arr, dtype=np.float32))
        labels.append(int(entry["label"]))
    seen = set(labels)
    if seen and seen != set(range(k)):
        missing = sorted(set(range(k)) - seen)
        raise InputError(f"manifest labels are not dense in [0, {k}): missing {missing}")
    return LabeledDataset(torch.from_numpy(np.stack(images)),
                          torch.tensor(labels, dtype=torch.int64),
                          k)
