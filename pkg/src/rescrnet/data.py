"""PNG dataset loading, the color<->class mask codec, and run configuration."""

import configparser
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AugmentRanges
from .layers import NetworkConfig
from .losses import LossConfig

DEFAULT_PALETTE = (("class0", (255, 0, 0)), ("class1", (0, 255, 0)), ("class2", (0, 0, 255)))


@dataclass
class ClassPalette:
    names: tuple
    colors: np.ndarray  # [K,3] uint8

    def __init__(self, entries):
        entries = list(entries)
        if not entries:
            raise ValueError("empty palette")
        self.names = tuple(name for name, _ in entries)
        self.colors = np.asarray([color for _, color in entries], dtype=np.uint8)
        if self.colors.shape != (len(entries), 3):
            raise ValueError("palette colors must be RGB triples")
        if len({tuple(c) for c in self.colors}) != len(entries):
            raise ValueError("palette colors must be pairwise distinct")

    def __len__(self):
        return len(self.names)


@dataclass
class SegDataset:
    items: list  # (image [H,W,C], mask one-hot [H,W,K], identifier)
    palette: ClassPalette

    def __len__(self):
        return len(self.items)

    def pairs(self):
        return [(img, msk) for img, msk, _ in self.items]

    def ids(self):
        return [ident for _, _, ident in self.items]


def decode_mask(png_rgb, palette, max_distance=64.0, exact_only=False):
    """Assign each pixel to the nearest palette color; strictly one-hot output."""
    rgb = np.asarray(png_rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"mask must be [H,W,3] RGB, got shape {rgb.shape}")
    k = len(palette)
    diffs = rgb[..., None, :].astype(np.float64) - palette.colors.astype(np.float64)
    dist = np.sqrt((diffs ** 2).sum(axis=-1))  # [H,W,K]
    nearest = dist.argmin(axis=-1)
    min_dist = dist.min(axis=-1)
    if exact_only and min_dist.max() > 0:
        raise ValueError("mask contains colors not present in the palette")
    frac_far = float((min_dist > max_distance).mean())
    if frac_far > 0.01:
        warnings.warn(f"{frac_far:.1%} of mask pixels are farther than {max_distance} "
                      "from every palette color", stacklevel=2)
    return np.eye(k)[nearest]


def encode_mask(one_hot, palette):
    one_hot = np.asarray(one_hot)
    if one_hot.shape[-1] != len(palette):
        raise ValueError(f"mask has {one_hot.shape[-1]} classes, palette has {len(palette)}")
    return palette.colors[one_hot.argmax(axis=-1)]


def encode_prediction(probs, palette):
    """Color image of the per-pixel argmax class (ties break to lowest index)."""
    return encode_mask(probs, palette)


def load_image(path):
    """PNG -> float array in [0,1]; grayscale [H,W,1], color [H,W,3]."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"{path}: undecodable PNG ({exc})") from exc
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode == "L":
        arr = np.asarray(img, dtype=np.float64) / 255.0
    elif img.mode in ("RGB", "RGBA"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    else:
        raise ValueError(f"{path}: unsupported PNG mode {img.mode}")
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_mask_rgb(path):
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"{path}: undecodable PNG ({exc})") from exc
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_png(path, array):
    """Write a uint8 RGB/gray array or a [0,1] float array as PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_dataset(images_dir, masks_dir, palette):
    """Pair images with masks by filename stem, in lexicographic stem order."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise ValueError(f"{d}: not a directory")
    image_files = {p.stem: p for p in images_dir.iterdir() if p.suffix.lower() == ".png"}
    mask_files = {p.stem: p for p in masks_dir.iterdir() if p.suffix.lower() == ".png"}
    if not image_files:
        raise ValueError(f"{images_dir}: no PNG images found (empty dataset)")
    items = []
    for stem in sorted(image_files):
        if stem not in mask_files:
            raise ValueError(f"image {image_files[stem].name} has no mask with the same stem")
        image = load_image(image_files[stem])
        mask = decode_mask(load_mask_rgb(mask_files[stem]), palette)
        if image.shape[:2] != mask.shape[:2]:
            raise ValueError(f"{stem}: image {image.shape[:2]} and mask {mask.shape[:2]} "
                             "dimensions differ")
        items.append((image, mask, stem))
    return SegDataset(items=items, palette=palette)


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    palette: ClassPalette = field(default_factory=lambda: ClassPalette(DEFAULT_PALETTE))
    train_images: str = ""
    train_masks: str = ""
    val_images: str = ""
    val_masks: str = ""
    epochs: int = 90
    steps_per_epoch: int = 15
    seed: int = 0
    output_dir: str = "run"
    early_stop_tanimoto: float | None = None


def _get(cfg, section, key, conv, default, path):
    if not cfg.has_option(section, key):
        return default
    raw = cfg.get(section, key)
    try:
        return conv(raw)
    except Exception as exc:
        raise ValueError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from exc


def _bool(raw):
    val = raw.strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw):
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _ints(raw):
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _pair(raw):
    vals = _floats(raw)
    if len(vals) != 2:
        raise ValueError("expected two numbers")
    return vals


def parse_run_config(path):
    """Parse the key=value / sectioned run configuration file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValueError(f"{path}: unreadable config file")
    path = str(path)
    rc = RunConfig()

    net = {}
    for key, conv in (("n_conv_blocks", int), ("n_lstm_blocks", int),
                      ("filters_per_branch", int), ("kernel_sizes", _ints),
                      ("dilation_rates", _ints), ("branch_merge", str.strip),
                      ("dropout_rate", float), ("num_classes", int),
                      ("leaky_alpha", float), ("input_channels", int)):
        val = _get(parser, "network", key, conv, None, path)
        if val is not None:
            net[key] = val
    try:
        rc.network = NetworkConfig(**net)
    except ValueError as exc:
        raise ValueError(f"{path}: [network]: {exc}") from exc

    loss = {}
    for key, conv in (("smooth_s", float), ("class_weights", _floats),
                      ("contour_weighting", _bool), ("contour_sigma", float),
                      ("contour_w0", float)):
        val = _get(parser, "loss", key, conv, None, path)
        if val is not None:
            loss[key] = val
    rc.loss = LossConfig(**loss)
    try:
        rc.loss.validate(num_classes=rc.network.num_classes)
    except ValueError as exc:
        raise ValueError(f"{path}: [loss]: {exc}") from exc

    aug = {}
    for key, conv in (("rotation_deg", _pair), ("shear_deg", _pair), ("shift_frac", _pair),
                      ("scale", _pair), ("flip_h_prob", float), ("flip_v_prob", float)):
        val = _get(parser, "augment", key, conv, None, path)
        if val is not None:
            aug[key] = val
    rc.augment = AugmentRanges(**aug)
    try:
        rc.augment.validate()
    except ValueError as exc:
        raise ValueError(f"{path}: [augment]: {exc}") from exc

    opt = {}
    for key, conv in (("kind", str.strip), ("learning_rate", float), ("beta1", float),
                      ("beta2", float), ("epsilon", float)):
        val = _get(parser, "optimizer", key, conv, None, path)
        if val is not None:
            opt[key] = val
    rc.optimizer = OptimizerConfig(**opt)
    try:
        rc.optimizer.validate()
    except ValueError as exc:
        raise ValueError(f"{path}: [optimizer]: {exc}") from exc

    if parser.has_section("palette"):
        entries = []
        for name, raw in parser.items("palette"):
            vals = _ints(raw)
            if len(vals) != 3 or any(not (0 <= v <= 255) for v in vals):
                raise ValueError(f"{path}: [palette] {name} = {raw!r}: expected 'R,G,B' in 0-255")
            entries.append((name, vals))
        rc.palette = ClassPalette(entries)
    if len(rc.palette) != rc.network.num_classes:
        raise ValueError(f"{path}: palette has {len(rc.palette)} classes but "
                         f"[network] num_classes = {rc.network.num_classes}")

    rc.train_images = _get(parser, "data", "train_images", str.strip, rc.train_images, path)
    rc.train_masks = _get(parser, "data", "train_masks", str.strip, rc.train_masks, path)
    rc.val_images = _get(parser, "data", "val_images", str.strip, rc.val_images, path)
    rc.val_masks = _get(parser, "data", "val_masks", str.strip, rc.val_masks, path)

    rc.epochs = _get(parser, "run", "epochs", int, rc.epochs, path)
    rc.steps_per_epoch = _get(parser, "run", "steps_per_epoch", int, rc.steps_per_epoch, path)
    rc.seed = _get(parser, "run", "seed", int, rc.seed, path)
    rc.output_dir = _get(parser, "run", "output_dir", str.strip, rc.output_dir, path)
    rc.early_stop_tanimoto = _get(parser, "run", "early_stop_tanimoto", float,
                                  rc.early_stop_tanimoto, path)
    if rc.epochs < 0:
        raise ValueError(f"{path}: [run] epochs must be >= 0")
    if rc.steps_per_epoch < 1:
        raise ValueError(f"{path}: [run] steps_per_epoch must be >= 1")
    return rc
