"""Res-CR-Net building blocks and full-network assembly.

The network is: STEM -> n CONV RES BLOCKs -> 1x1 projection to class width
-> m LSTM RES BLOCKs -> per-pixel softmax.  Every block preserves spatial
dimensions, so one built model runs on images of any size.
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class NetworkConfig:
    n_conv_blocks: int = 6
    n_lstm_blocks: int = 1
    filters_per_branch: int = 4
    kernel_sizes: tuple = (3, 3, 3)
    dilation_rates: tuple = (1, 3, 5)
    branch_merge: str = "concat"
    dropout_rate: float = 0.2
    num_classes: int = 3
    leaky_alpha: float = 0.3
    input_channels: int = 1

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.validate()

    def validate(self):
        if self.n_conv_blocks < 1:
            raise ValueError("n_conv_blocks must be >= 1")
        if self.n_lstm_blocks < 0:
            raise ValueError("n_lstm_blocks must be >= 0")
        if len(self.kernel_sizes) != 3 or len(self.dilation_rates) != 3:
            raise ValueError("kernel_sizes and dilation_rates must each have 3 entries "
                             "(three parallel branches)")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel_sizes}")
        if any(d < 1 for d in self.dilation_rates):
            raise ValueError(f"dilation rates must be >= 1, got {self.dilation_rates}")
        if self.branch_merge not in ("concat", "add"):
            raise ValueError(f"branch_merge must be 'concat' or 'add', got {self.branch_merge!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0,1)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not (0.0 < self.leaky_alpha < 1.0):
            raise ValueError("leaky_alpha must lie in (0,1)")
        if self.filters_per_branch < 1 or self.input_channels < 1:
            raise ValueError("filters_per_branch and input_channels must be >= 1")

    @property
    def feature_width(self):
        """Channel width flowing between CONV RES BLOCKs."""
        if self.branch_merge == "concat":
            return 3 * self.filters_per_branch
        return self.filters_per_branch


@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor


# gate order in the fused gate convolution
_GATES = ("input", "forget", "output", "candidate")


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(rng, shape, fan_in, fan_out):
    return Tensor(_glorot(rng, shape, fan_in, fan_out), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_branch_params(rng, k, in_width, filters):
    """One separable atrous branch: depthwise + pointwise + bias."""
    return {
        "depthwise": _param(rng, (k, k, in_width), k * k, k * k),
        "pointwise": _param(rng, (in_width, filters), in_width, filters),
        "bias": _zeros((filters,)),
    }


def init_conv_res_block_params(cfg, in_width, rng):
    params = {}
    for i, k in enumerate(cfg.kernel_sizes):
        params[f"branch{i}"] = init_branch_params(rng, k, in_width, cfg.filters_per_branch)
    residual_width = cfg.feature_width
    if in_width != residual_width:
        params["shortcut"] = {
            "weight": _param(rng, (in_width, residual_width), in_width, residual_width),
            "bias": _zeros((residual_width,)),
        }
    return params


def init_lstm_pass_params(rng):
    """One direction of one ConvLSTM pass: fused 4-gate kernel + bias.

    The slice seen at each step has 1 channel; concatenated with the hidden
    state that makes 2 input channels, and the 4 gates share one [3,3,2,4]
    kernel.  Forget-gate bias starts at +1.
    """
    kernel = _param(rng, (3, 3, 2, 4), 3 * 3 * 2, 3 * 3 * 4)
    bias = np.zeros(4)
    bias[_GATES.index("forget")] = 1.0
    return {"kernel": kernel, "bias": Tensor(bias, requires_grad=True)}


def init_lstm_res_block_params(rng):
    return {
        "row": {"fwd": init_lstm_pass_params(rng), "bwd": init_lstm_pass_params(rng)},
        "col": {"fwd": init_lstm_pass_params(rng), "bwd": init_lstm_pass_params(rng)},
    }


def _branch(x, p, dilation):
    return T.separable_atrous_conv(x, p["depthwise"], p["pointwise"], bias=p["bias"],
                                   dilation=dilation)


def _merge(branches, mode):
    if mode == "concat":
        return T.concat_channels(branches)
    out = branches[0]
    for b in branches[1:]:
        out = T.add(out, b)
    return out


def stem_block(x, cfg, params):
    """Adapt raw input channels to the internal feature width."""
    x = T.as_tensor(x)
    if x.shape[-1] != cfg.input_channels:
        raise ValueError(f"stem expects {cfg.input_channels} input channels, got {x.shape[-1]}")
    branches = [_branch(x, params[f"branch{i}"], cfg.dilation_rates[i]) for i in range(3)]
    return T.leaky_relu(_merge(branches, cfg.branch_merge), cfg.leaky_alpha)


def conv_res_block(x, cfg, params, training=False, rng=None):
    """Three parallel separable atrous branches + shortcut, then spatial dropout."""
    x = T.as_tensor(x)
    branches = [T.leaky_relu(_branch(x, params[f"branch{i}"], cfg.dilation_rates[i]),
                             cfg.leaky_alpha)
                for i in range(3)]
    residual = _merge(branches, cfg.branch_merge)
    if "shortcut" in params:
        shortcut = T.pointwise_conv(x, params["shortcut"]["weight"], bias=params["shortcut"]["bias"])
    else:
        if x.shape[-1] != residual.shape[-1]:
            raise ValueError(f"block width {residual.shape[-1]} != input width {x.shape[-1]} "
                             "and no shortcut projection was initialized")
        shortcut = x
    out = T.add(shortcut, residual)
    return T.spatial_dropout(out, cfg.dropout_rate, training, rng)


def init_zero_state(batch, s, c):
    z = np.zeros((batch, s, c, 1))
    return ConvLSTMState(hidden=Tensor(z), cell=Tensor(z.copy()))


def conv_lstm_step(slice_t, state, params):
    """One ConvLSTM step on a [B,S,C,1] slice with a single 3x3 filter per gate."""
    slice_t = T.as_tensor(slice_t)
    if slice_t.shape != state.hidden.shape:
        raise ValueError(f"slice shape {slice_t.shape} != state shape {state.hidden.shape}")
    z = T.concat_channels([slice_t, state.hidden])
    gates = T.conv2d(z, params["kernel"], bias=params["bias"], dilation=1)
    i = T.sigmoid(T.slice_channels(gates, 0, 1))
    f = T.sigmoid(T.slice_channels(gates, 1, 2))
    o = T.sigmoid(T.slice_channels(gates, 2, 3))
    g = T.tanh(T.slice_channels(gates, 3, 4))
    cell = T.add(T.multiply(f, state.cell), T.multiply(i, g))
    hidden = T.multiply(o, T.tanh(cell))
    return hidden, ConvLSTMState(hidden=hidden, cell=cell)


def _run_direction(x5, params, reverse):
    b, t, s, c, _ = x5.shape
    state = init_zero_state(b, s, c)
    order = range(t - 1, -1, -1) if reverse else range(t)
    outputs = [None] * t
    for ti in order:
        out, state = conv_lstm_step(T.slice_axis1(x5, ti), state, params)
        outputs[ti] = out
    return T.stack_axis1(outputs)


def bidirectional_conv_lstm(x5, params):
    """Forward and backward ConvLSTM over axis 1, outputs concatenated on the
    trailing axis: [B,T,S,C,1] -> [B,T,S,C,2]."""
    x5 = T.as_tensor(x5)
    if x5.ndim != 5 or x5.shape[-1] != 1:
        raise ValueError(f"expected a rank-5 tensor [B,T,S,C,1], got shape {x5.shape}")
    fwd = _run_direction(x5, params["fwd"], reverse=False)   # [B,T,S,C,1]
    bwd = _run_direction(x5, params["bwd"], reverse=True)    # [B,T,S,C,1]
    return T.concat_channels([fwd, bwd])


def lstm_res_block(x, params, training=False, trace=None):
    """Two orthogonal bidirectional ConvLSTM passes; their sum forms the residual.

    Row pass treats rows as time; column pass transposes axes 1,2 and treats
    columns as time.  The trailing direction axis is collapsed by summing.
    """
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"lstm_res_block expects a rank-4 tensor, got rank {x.ndim}")
    x5 = T.expand_last_dim(x)                                 # [B,H,W,C,1]
    if trace is not None:
        trace.append(x5.shape)
    rows = bidirectional_conv_lstm(x5, params["row"])          # [B,H,W,C,2]
    if trace is not None:
        trace.append(rows.shape)
    xt = T.transpose_axes(x5, (0, 2, 1, 3, 4))                 # [B,W,H,C,1]
    if trace is not None:
        trace.append(xt.shape)
    cols = bidirectional_conv_lstm(xt, params["col"])          # [B,W,H,C,2]
    if trace is not None:
        trace.append(cols.shape)
    cols = T.transpose_axes(cols, (0, 2, 1, 3, 4))             # [B,H,W,C,2]
    residual = T.sum_last_dim(T.add(rows, cols))               # [B,H,W,C]
    out = T.add(x, residual)
    if trace is not None:
        trace.append(out.shape)
    return out


def _flatten_params(tree, prefix, out):
    for key, val in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            _flatten_params(val, name, out)
        else:
            out[name] = val
    return out


class ResCRNet:
    """Built network: parameter tree plus the forward pass."""

    CHECKPOINT_MAGIC = b"RCRN"
    CHECKPOINT_VERSION = 1

    def __init__(self, cfg, rng=None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        width = cfg.feature_width
        tree = {"stem": {f"branch{i}": init_branch_params(rng, cfg.kernel_sizes[i],
                                                          cfg.input_channels,
                                                          cfg.filters_per_branch)
                         for i in range(3)}}
        for j in range(cfg.n_conv_blocks):
            tree[f"conv{j}"] = init_conv_res_block_params(cfg, width, rng)
        tree["proj"] = {
            "weight": _param(rng, (width, cfg.num_classes), width, cfg.num_classes),
            "bias": _zeros((cfg.num_classes,)),
        }
        for j in range(cfg.n_lstm_blocks):
            tree[f"lstm{j}"] = init_lstm_res_block_params(rng)
        self.tree = tree
        self.params = _flatten_params(tree, "", {})

    def forward(self, x, training=False, rng=None, trace=None):
        cfg = self.cfg
        x = T.as_tensor(x)
        if x.ndim != 4:
            raise ValueError(f"input must be rank 4 [B,H,W,C], got rank {x.ndim}")
        h = stem_block(x, cfg, self.tree["stem"])
        for j in range(cfg.n_conv_blocks):
            h = conv_res_block(h, cfg, self.tree[f"conv{j}"], training=training, rng=rng)
        h = T.leaky_relu(T.pointwise_conv(h, self.tree["proj"]["weight"],
                                          bias=self.tree["proj"]["bias"]), cfg.leaky_alpha)
        for j in range(cfg.n_lstm_blocks):
            h = lstm_res_block(h, self.tree[f"lstm{j}"], training=training, trace=trace)
        return T.softmax_channels(h)

    __call__ = forward

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @staticmethod
    def expected_param_count(cfg):
        """Closed-form parameter count; depends only on cfg, never on image size."""
        f = cfg.filters_per_branch
        width = cfg.feature_width
        stem = sum(k * k * cfg.input_channels + cfg.input_channels * f + f
                   for k in cfg.kernel_sizes)
        block = sum(k * k * width + width * f + f for k in cfg.kernel_sizes)
        proj = width * cfg.num_classes + cfg.num_classes
        lstm = 4 * (3 * 3 * 2 * 4 + 4)   # 2 passes x 2 directions, fused 4-gate kernel
        return stem + cfg.n_conv_blocks * block + proj + cfg.n_lstm_blocks * lstm

    # -- checkpoint format: little-endian, versioned, flat name->tensor ------

    _DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
    _CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}

    def save(self, path):
        buf = io.BytesIO()
        buf.write(self.CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", self.CHECKPOINT_VERSION))
        cfg_json = json.dumps(asdict(self.cfg), sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(cfg_json)))
        buf.write(cfg_json)
        names = sorted(self.params)
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            p = self.params[name]
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", self._DTYPE_CODES[p.data.dtype]))
            buf.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                buf.write(struct.pack("<I", dim))
            buf.write(np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        buf = io.BytesIO(raw)
        if buf.read(4) != cls.CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a Res-CR-Net checkpoint")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != cls.CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", buf.read(4))
        cfg_dict = json.loads(buf.read(cfg_len).decode("utf-8"))
        cfg = NetworkConfig(**cfg_dict)
        model = cls(cfg, rng=np.random.default_rng(0))
        (count,) = struct.unpack("<I", buf.read(4))
        loaded = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode("utf-8")
            (code,) = struct.unpack("<B", buf.read(1))
            (rank,) = struct.unpack("<B", buf.read(1))
            shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(rank))
            dtype = cls._CODE_DTYPES[code]
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
            loaded[name] = arr
        if set(loaded) != set(model.params):
            raise ValueError(f"{path}: parameter names do not match the configuration")
        for name, arr in loaded.items():
            p = model.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {name}: "
                                 f"{arr.shape} vs expected {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)
        return model


def build_network(cfg, rng=None):
    return ResCRNet(cfg, rng=rng)
