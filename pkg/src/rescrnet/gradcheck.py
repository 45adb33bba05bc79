"""Finite-difference verification of analytic gradients.

Every differentiable primitive gets checked against central differences on
randomized small tensors, and the whole network gets a parameter-by-parameter
sweep through the Tanimoto loss.
"""

import numpy as np

from . import tensor as T
from .layers import NetworkConfig, ResCRNet
from .losses import LossConfig, tanimoto_loss

FD_STEP = 1e-6


def max_rel_err(analytic, numeric, floor=1e-6):
    """Max elementwise relative error, falling back to absolute error where
    both gradients are near zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(denom > floor, err / np.maximum(denom, floor), err)
    return float(rel.max()) if rel.size else 0.0


def numeric_grad(f, x, h=FD_STEP):
    """Central-difference gradient of scalar f with respect to array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, inputs, rng, h=FD_STEP):
    """Compare analytic vs numeric gradients of sum(w * op(inputs)).

    `build` maps a list of Tensors to the op output Tensor; gradients are
    checked with respect to every input.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = build([T.Tensor(x) for x in inputs])
    w = rng.standard_normal(probe.shape)

    tensors = [T.Tensor(x, requires_grad=True) for x in inputs]
    with T.record():
        out = build(tensors)
        loss = T.tsum(T.mul_const(out, w))
        T.backward(loss)

    worst = 0.0
    for idx, x in enumerate(inputs):
        def f(xi, idx=idx):
            args = [T.Tensor(v) for v in inputs]
            args[idx] = T.Tensor(xi)
            return float((build(args).data * w).sum())

        num = numeric_grad(f, x.copy(), h)
        ana = tensors[idx].grad
        ana = np.zeros_like(x) if ana is None else ana
        worst = max(worst, max_rel_err(ana, num))
    return worst


def op_gradient_suite(seeds=20, h=FD_STEP):
    """Per-op finite-difference check over `seeds` random instances each."""

    def dropout_build(rng_seed):
        def build(ts):
            rng = np.random.default_rng(rng_seed)
            return T.spatial_dropout(ts[0], 0.4, training=True, rng=rng)
        return build

    def cases(rng):
        a4 = rng.standard_normal((2, 4, 5, 3))
        b4 = rng.standard_normal((2, 4, 5, 3))
        # denominators bounded away from zero so the FD quotient is well conditioned
        pos = np.abs(rng.standard_normal((2, 4, 5, 3))) + 1.0
        k_full = rng.standard_normal((3, 3, 3, 2))
        k_dw = rng.standard_normal((3, 3, 3))
        k_pw = rng.standard_normal((3, 4))
        bias2 = rng.standard_normal(2)
        x5 = rng.standard_normal((2, 3, 4, 2, 1))
        d = int(rng.integers(1, 4))
        return {
            "add": (lambda ts: T.add(ts[0], ts[1]), [a4, b4]),
            "sub": (lambda ts: T.sub(ts[0], ts[1]), [a4, b4]),
            "multiply": (lambda ts: T.multiply(ts[0], ts[1]), [a4, b4]),
            "divide": (lambda ts: T.divide(ts[0], ts[1]), [a4, pos]),
            "leaky_relu": (lambda ts: T.leaky_relu(ts[0], 0.3), [a4 + 0.05]),
            "sigmoid": (lambda ts: T.sigmoid(ts[0]), [a4]),
            "tanh": (lambda ts: T.tanh(ts[0]), [a4]),
            "softmax_channels": (lambda ts: T.softmax_channels(ts[0]), [a4]),
            "concat_channels": (lambda ts: T.concat_channels(ts), [a4, b4]),
            "slice_channels": (lambda ts: T.slice_channels(ts[0], 1, 3), [a4]),
            "transpose_axes": (lambda ts: T.transpose_axes(ts[0], (0, 2, 1, 3)), [a4]),
            "expand_last_dim": (lambda ts: T.expand_last_dim(ts[0]), [a4]),
            "sum_last_dim": (lambda ts: T.sum_last_dim(ts[0]), [a4]),
            "sum_axes": (lambda ts: T.sum_axes(ts[0], (1, 2)), [a4]),
            "conv2d": (lambda ts: T.conv2d(ts[0], ts[1], bias=ts[2], dilation=d),
                       [a4, k_full, bias2]),
            "depthwise_conv2d": (lambda ts: T.depthwise_conv2d(ts[0], ts[1], dilation=d),
                                 [a4, k_dw]),
            "pointwise_conv": (lambda ts: T.pointwise_conv(ts[0], ts[1]), [a4, k_pw]),
            "separable_atrous_conv": (
                lambda ts: T.separable_atrous_conv(ts[0], ts[1], ts[2], dilation=d),
                [a4, k_dw, k_pw]),
            "spatial_dropout": (dropout_build(int(rng.integers(0, 1 << 30))), [a4]),
            "slice_axis1": (lambda ts: T.slice_axis1(ts[0], 1), [x5]),
            "stack_axis1": (lambda ts: T.stack_axis1(ts), [a4, b4]),
        }

    results = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, (build, inputs) in cases(rng).items():
            err = check_op(build, inputs, rng, h)
            results[name] = max(results.get(name, 0.0), err)
    return results


def model_gradcheck(cfg=None, spatial=(8, 8), seed=0, h=FD_STEP):
    """End-to-end sweep: every parameter gradient of the Tanimoto loss vs
    central finite differences.  Returns the max relative error."""
    cfg = cfg or NetworkConfig(n_conv_blocks=1, n_lstm_blocks=1, filters_per_branch=2,
                               num_classes=2, input_channels=1, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    model = ResCRNet(cfg, rng=rng)
    hgt, wid = spatial
    x = rng.standard_normal((1, hgt, wid, cfg.input_channels))
    labels = rng.integers(0, cfg.num_classes, size=(1, hgt, wid))
    y = np.eye(cfg.num_classes)[labels]
    loss_cfg = LossConfig(smooth_s=1.0)

    def loss_value():
        probs = model.forward(x)
        return tanimoto_loss(probs, y, loss_cfg).item()

    with T.record():
        probs = model.forward(x)
        loss = tanimoto_loss(probs, y, loss_cfg)
        T.backward(loss)

    worst = 0.0
    worst_name = None
    for name in sorted(model.params):
        p = model.params[name]
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        err = max_rel_err(ana, num)
        if err > worst:
            worst, worst_name = err, name
    model.zero_grad()
    return worst, worst_name
