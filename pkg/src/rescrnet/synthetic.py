"""Bundled synthetic dataset: two 32x48 three-class images (background,
disks, stripes) used by the acceptance suite and the CLI smoke paths."""

from pathlib import Path

import numpy as np

from .data import ClassPalette, SegDataset, encode_mask, save_png

HEIGHT, WIDTH = 32, 48
NUM_CLASSES = 3

PALETTE = ClassPalette((("background", (255, 0, 0)),
                        ("disks", (0, 255, 0)),
                        ("stripes", (0, 0, 255))))


def _disk(labels, cy, cx, r, cls):
    yy, xx = np.mgrid[0:labels.shape[0], 0:labels.shape[1]]
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def _texture(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return 0.04 * np.sin(0.7 * xx) * np.cos(0.5 * yy)


def make_synthetic_dataset():
    h, w = HEIGHT, WIDTH
    intensity = np.array([0.12, 0.82, 0.48])

    labels_a = np.zeros((h, w), dtype=int)
    _disk(labels_a, 10, 12, 6, 1)
    _disk(labels_a, 22, 34, 7, 1)
    _disk(labels_a, 6, 40, 3, 2)

    labels_b = np.zeros((h, w), dtype=int)
    for x0 in range(0, w, 12):
        labels_b[:, x0:x0 + 5] = 2
    _disk(labels_b, 16, 24, 5, 1)

    items = []
    for name, labels in (("disks", labels_a), ("stripes", labels_b)):
        image = (intensity[labels] + _texture(h, w))[..., None]
        mask = np.eye(NUM_CLASSES)[labels]
        items.append((image, mask, name))
    return SegDataset(items=items, palette=PALETTE)


def write_synthetic_dataset(root):
    """Write the synthetic pairs as PNGs under root/images and root/masks."""
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    ds = make_synthetic_dataset()
    for image, mask, name in ds.items:
        save_png(img_dir / f"{name}.png", image)
        save_png(mask_dir / f"{name}.png", encode_mask(mask, ds.palette))
    return img_dir, mask_dir
