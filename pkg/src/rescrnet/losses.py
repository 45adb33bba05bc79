"""Dice/Tanimoto overlap family and the differentiable training loss.

The plain-numpy coefficients here double as independent oracles for the
tape-based `tanimoto_loss`, which is what actually drives training.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T


@dataclass
class LossConfig:
    smooth_s: float = 1.0
    class_weights: tuple | None = None
    contour_weighting: bool = False
    contour_sigma: float = 5.0
    contour_w0: float = 10.0

    def validate(self, num_classes=None):
        if self.smooth_s < 0:
            raise ValueError("smooth_s must be >= 0")
        if self.class_weights is not None:
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class_weights must be positive")
            if num_classes is not None and len(self.class_weights) != num_classes:
                raise ValueError(f"class_weights has {len(self.class_weights)} entries, "
                                 f"expected {num_classes}")
        if self.contour_sigma <= 0:
            raise ValueError("contour_sigma must be > 0")
        if self.contour_w0 < 0:
            raise ValueError("contour_w0 must be >= 0")


def _as_bpk(a):
    """Normalize to [batch, pixels, classes]."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a.reshape(1, -1, 1)
    if a.ndim == 2:
        return a.reshape(1, -1, 1)
    if a.ndim == 3:
        h, w, k = a.shape
        return a.reshape(1, h * w, k)
    if a.ndim == 4:
        b, h, w, k = a.shape
        return a.reshape(b, h * w, k)
    raise ValueError(f"rank {a.ndim} input not supported")


def _check_pair(yhat, y):
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    if yhat.min() < -1e-12 or yhat.max() > 1 + 1e-12:
        raise ValueError("predicted probabilities must lie in [0,1]")


def dice_coefficient(yhat, y, s=1.0):
    """(2*sum(yhat*y)+s)/(sum(yhat)+sum(y)+s), per class, averaged."""
    p, t = _as_bpk(yhat), _as_bpk(y)
    _check_pair(p, t)
    inter = (p * t).sum(axis=1)
    num = 2.0 * inter + s
    den = p.sum(axis=1) + t.sum(axis=1) + s
    # den == 0 only when both masks are empty and s == 0: perfect agreement
    d = np.where(den == 0, 1.0, num / np.where(den == 0, 1.0, den))
    return float(d.mean())


def tanimoto(yhat, y, s=1.0, weights=None):
    """(sum(yhat*y)+s)/(sum(yhat^2+y^2)-sum(yhat*y)+s), per class, averaged."""
    p, t = _as_bpk(yhat), _as_bpk(y)
    _check_pair(p, t)
    w = np.ones_like(p) if weights is None else _as_bpk(weights) * np.ones_like(p)
    inter = (w * p * t).sum(axis=1)
    sq = (w * (p * p + t * t)).sum(axis=1)
    num = inter + s
    den = sq - inter + s
    coeff = np.where(den == 0, 1.0, num / np.where(den == 0, 1.0, den))
    return float(coeff.mean())


def tanimoto_with_complement(yhat, y, s=1.0, weights=None):
    return 0.5 * (tanimoto(yhat, y, s, weights)
                  + tanimoto(1.0 - np.asarray(yhat, dtype=np.float64),
                             1.0 - np.asarray(y, dtype=np.float64), s, weights))


def _tanimoto_term(p, y_const, w_const, s, pixel_axes):
    """Differentiable T(p, y) with per-element weights, reduced per class."""
    wy = y_const if w_const is None else w_const * y_const
    inter = T.sum_axes(T.mul_const(p, wy), pixel_axes)
    if w_const is None:
        psq = T.sum_axes(T.multiply(p, p), pixel_axes)
        ysq = (y_const * y_const).sum(axis=pixel_axes)
    else:
        psq = T.sum_axes(T.mul_const(T.multiply(p, p), w_const), pixel_axes)
        ysq = (w_const * y_const * y_const).sum(axis=pixel_axes)
    num = T.add_const(inter, s)
    den = T.add_const(T.sub(psq, inter), ysq + s)
    return T.divide(num, den)


def tanimoto_loss(yhat, y, cfg=None, weight_map=None):
    """1 - weighted Tanimoto-with-complement, as a differentiable scalar.

    `yhat` is the softmax output on the tape ([H,W,K] or [B,H,W,K]); `y` is
    the one-hot ground truth.  `weight_map` carries per-pixel weights (e.g.
    from `contour_weight_map`); class weights come from `cfg`.
    """
    cfg = cfg or LossConfig()
    p = T.as_tensor(yhat)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    if p.ndim == 3:
        pixel_axes = (0, 1)
    elif p.ndim == 4:
        pixel_axes = (1, 2)
    else:
        raise ValueError(f"tanimoto_loss expects rank 3 or 4, got rank {p.ndim}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("ground truth must be one-hot (values in {0,1})")
    k = p.shape[-1]
    cfg.validate(num_classes=k)
    s = float(cfg.smooth_s)

    w = None
    if weight_map is not None:
        wm = np.asarray(weight_map, dtype=np.float64)
        if wm.shape != p.shape[:-1]:
            raise ValueError(f"weight map shape {wm.shape} does not match pixels {p.shape[:-1]}")
        w = wm[..., None]
    if cfg.class_weights is not None:
        cw = np.asarray(cfg.class_weights, dtype=np.float64)
        w = cw if w is None else w * cw
    if w is not None:
        w = np.broadcast_to(w, p.shape).astype(np.float64)

    t_direct = _tanimoto_term(p, y, w, s, pixel_axes)
    t_compl = _tanimoto_term(T.rsub_const(1.0, p), 1.0 - y, w, s, pixel_axes)
    t_tilde = T.mul_const(T.add(t_direct, t_compl), 0.5)
    mean = T.mul_const(T.tsum(t_tilde), 1.0 / t_tilde.size)
    return T.rsub_const(1.0, mean)


def contour_weight_map(y, cfg=None, foreground_classes=None):
    """Per-pixel loss weights: class-balance baseline plus, when enabled, a
    contour term that grows in the gaps between nearby foreground components.

    w(p) = w_class(p) + w0 * exp(-(d1(p)+d2(p))^2 / (2 sigma^2)), with d1,d2
    the Euclidean distances to the nearest and second-nearest foreground
    components.  With contour weighting off only the baseline is returned.
    """
    cfg = cfg or LossConfig()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError(f"expected a one-hot mask [H,W,K], got rank {y.ndim}")
    if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ValueError("mask must be strictly one-hot")
    h, w_, k = y.shape
    labels = y.argmax(axis=-1)

    counts = np.bincount(labels.ravel(), minlength=k).astype(np.float64)
    per_class = np.ones(k)
    present = counts > 0
    per_class[present] = (h * w_) / (k * counts[present])
    weights = per_class[labels]
    weights /= weights.mean()

    if not cfg.contour_weighting or cfg.contour_w0 == 0:
        return weights

    if foreground_classes is None:
        foreground_classes = range(1, k)
    component_masks = []
    for c in foreground_classes:
        lab, n = ndimage.label(y[..., c] > 0)
        for i in range(1, n + 1):
            component_masks.append(lab == i)
    if len(component_masks) < 2:
        return weights

    dists = np.stack([ndimage.distance_transform_edt(~m) for m in component_masks])
    dists.sort(axis=0)
    d1, d2 = dists[0], dists[1]
    weights = weights + cfg.contour_w0 * np.exp(-((d1 + d2) ** 2) / (2.0 * cfg.contour_sigma ** 2))
    return weights
