"""Paired geometric augmentation of image/mask tensors.

One composed affine map (flips, then shear, rotate, scale, translate about
the image center) is applied to both image and mask, so the pair always
receives identical geometry.  Out-of-bounds samples are filled by mirror
reflection without edge repetition (index -1 maps to 1).
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentParams:
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    shift_frac: tuple = (0.0, 0.0)
    scale: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    seed: int = 0

    def is_identity(self):
        return (self.rotation_deg == 0.0 and self.shear_deg == 0.0
                and self.shift_frac == (0.0, 0.0) and self.scale == 1.0
                and not self.flip_h and not self.flip_v)


@dataclass
class AugmentRanges:
    rotation_deg: tuple = (-30.0, 30.0)
    shear_deg: tuple = (-15.0, 15.0)
    shift_frac: tuple = (-0.1, 0.1)
    scale: tuple = (0.8, 1.25)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5

    @classmethod
    def identity(cls):
        return cls(rotation_deg=(0.0, 0.0), shear_deg=(0.0, 0.0), shift_frac=(0.0, 0.0),
                   scale=(1.0, 1.0), flip_h_prob=0.0, flip_v_prob=0.0)

    def validate(self):
        for name in ("rotation_deg", "shear_deg", "shift_frac", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"augment range {name} is inverted: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        for name in ("flip_h_prob", "flip_v_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must lie in [0,1]")


def sample_params(ranges, rng):
    """Uniform draw inside the configured ranges; deterministic under seed."""
    ranges.validate()

    def u(lo, hi):
        return lo if lo == hi else float(rng.uniform(lo, hi))

    return AugmentParams(
        rotation_deg=u(*ranges.rotation_deg),
        shear_deg=u(*ranges.shear_deg),
        shift_frac=(u(*ranges.shift_frac), u(*ranges.shift_frac)),
        scale=u(*ranges.scale),
        flip_h=bool(rng.random() < ranges.flip_h_prob),
        flip_v=bool(rng.random() < ranges.flip_v_prob),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _forward_matrix(p, h, w):
    """3x3 homogeneous matrix in (row, col) coordinates mapping source
    positions to output positions."""
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0

    def mat(a):
        return np.asarray(a, dtype=np.float64)

    m = mat([[1, 0, -cr], [0, 1, -cc], [0, 0, 1]])
    if p.flip_v:
        m = mat([[-1, 0, 0], [0, 1, 0], [0, 0, 1]]) @ m
    if p.flip_h:
        m = mat([[1, 0, 0], [0, -1, 0], [0, 0, 1]]) @ m
    phi = np.deg2rad(p.shear_deg)
    m = mat([[1, 0, 0], [np.tan(phi), 1, 0], [0, 0, 1]]) @ m
    th = np.deg2rad(p.rotation_deg)
    m = mat([[np.cos(th), np.sin(th), 0], [-np.sin(th), np.cos(th), 0], [0, 0, 1]]) @ m
    m = mat([[p.scale, 0, 0], [0, p.scale, 0], [0, 0, 1]]) @ m
    dr, dc = p.shift_frac[0] * h, p.shift_frac[1] * w
    m = mat([[1, 0, cr + dr], [0, 1, cc + dc], [0, 0, 1]]) @ m
    return m


def source_coords(shape, p):
    """For each output pixel, the source coordinate it samples from."""
    h, w = shape
    fwd = _forward_matrix(p, h, w)
    det = np.linalg.det(fwd)
    if abs(det) < 1e-12:
        raise ValueError("degenerate (non-invertible) affine transform")
    inv = np.linalg.inv(fwd)
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sr = inv[0, 0] * ii + inv[0, 1] * jj + inv[0, 2]
    sc = inv[1, 0] * ii + inv[1, 1] * jj + inv[1, 2]
    return np.stack([sr, sc])


def warp_bilinear(image, coords):
    image = np.asarray(image, dtype=np.float64)
    out = np.empty_like(image)
    for c in range(image.shape[-1]):
        out[..., c] = ndimage.map_coordinates(image[..., c], coords, order=1, mode="mirror")
    return out


def warp_nearest(image, coords):
    image = np.asarray(image, dtype=np.float64)
    out = np.empty_like(image)
    for c in range(image.shape[-1]):
        out[..., c] = ndimage.map_coordinates(image[..., c], coords, order=0, mode="mirror")
    return out


def apply_affine(image, mask, p):
    """Transform an image (bilinear) and its one-hot mask (nearest) with one
    shared affine map; the mask is re-one-hotted by per-pixel argmax."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or mask.ndim != 3:
        raise ValueError("image and mask must be rank 3 [H,W,C]")
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} disagree on H,W")
    if p.is_identity():
        return image.copy(), mask.copy()
    coords = source_coords(image.shape[:2], p)
    image_out = warp_bilinear(image, coords)
    mask_out = warp_nearest(mask, coords)
    k = mask.shape[-1]
    mask_out = np.eye(k)[mask_out.argmax(axis=-1)]
    return image_out, mask_out


def epoch_stream(dataset, steps, rng, ranges=None):
    """Yield `steps` batches per epoch; each batch re-augments every pair.

    `dataset` is a list of (image, mask) pairs with uniform H,W.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not dataset:
        raise ValueError("empty dataset")
    ranges = ranges or AugmentRanges()
    shapes = {img.shape[:2] for img, _ in dataset}
    if len(shapes) > 1:
        raise ValueError(f"batching requires uniform image sizes, got {sorted(shapes)}")
    for _ in range(steps):
        images, masks = [], []
        for img, msk in dataset:
            p = sample_params(ranges, rng)
            img_a, msk_a = apply_affine(img, msk, p)
            images.append(img_a)
            masks.append(msk_a)
        yield np.stack(images), np.stack(masks)
