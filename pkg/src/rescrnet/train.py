"""End-to-end optimization loop: forward, Tanimoto loss, backward, update,
validation, checkpointing, and CSV metric logging."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import epoch_stream
from .losses import (LossConfig, contour_weight_map, dice_coefficient, tanimoto_loss,
                     tanimoto_with_complement)
from .metrics import METRIC_COLUMNS, confusion_and_metrics, metrics_from_counts


class Adam:
    """Bias-corrected adaptive-moment update over a named parameter dict."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape "
                                 f"{p.data.shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, params, learning_rate=1e-3, **_):
        self.params = dict(params)
        self.lr = learning_rate
        self.t = 0

    def step(self):
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            p.data -= self.lr * p.grad


def make_optimizer(params, opt_cfg):
    cls = {"adam": Adam, "sgd": SGD}[opt_cfg.kind]
    return cls(params, learning_rate=opt_cfg.learning_rate, beta1=opt_cfg.beta1,
               beta2=opt_cfg.beta2, epsilon=opt_cfg.epsilon)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_tanimoto: float
    val_loss: float | None
    val_tanimoto: float | None
    per_class: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)


@dataclass
class TrainRun:
    records: list
    best_epoch: int
    best_checkpoint: str
    last_checkpoint: str
    seed: int


def _fmt(v):
    return "" if v is None else f"{v:.8f}"


def _csv_header(class_names):
    cols = ["epoch", "train_loss", "train_tanimoto", "val_loss", "val_tanimoto"]
    for name in class_names:
        for m in METRIC_COLUMNS:
            cols.append(f"{name}_{m}")
    return cols


def evaluate(model, dataset, loss_cfg=None):
    """Deterministic (dropout-off) per-class and macro metrics plus mean loss."""
    loss_cfg = loss_cfg or LossConfig()
    pairs = dataset.pairs() if hasattr(dataset, "pairs") else list(dataset)
    losses, tani, soft_dice = [], [], []
    k = model.cfg.num_classes
    agg = None
    for img, msk in pairs:
        probs = model.forward(img[None]).data[0]
        if msk.shape[-1] != k:
            raise ValueError(f"mask has {msk.shape[-1]} classes, model expects {k}")
        t_tilde = tanimoto_with_complement(probs, msk, loss_cfg.smooth_s)
        losses.append(1.0 - t_tilde)
        tani.append(t_tilde)
        soft_dice.append(dice_coefficient(probs, msk, loss_cfg.smooth_s))
        cm = confusion_and_metrics(probs, msk)
        if agg is None:
            agg = cm["counts"]
        else:
            for a, c in zip(agg, cm["counts"]):
                a.tp += c.tp
                a.fp += c.fp
                a.fn += c.fn
                a.tn += c.tn
    per_class = [metrics_from_counts(c) for c in agg]
    macro = {m: float(np.mean([pc[m] for pc in per_class])) for m in METRIC_COLUMNS}
    return {
        "loss": float(np.mean(losses)),
        "tanimoto": float(np.mean(tani)),
        "soft_dice": float(np.mean(soft_dice)),
        "per_class": per_class,
        "macro": macro,
    }


def format_metric_table(result, class_names):
    """Per-class five-metric table (Dice, Jaccard, Precision, Recall, F1)."""
    header = f"{'class':<16}" + "".join(f"{m:>11}" for m in
                                        ("dice", "jaccard", "precision", "recall", "f1"))
    lines = [header]
    for name, pc in zip(class_names, result["per_class"]):
        lines.append(f"{name:<16}" + "".join(f"{pc[m]:>11.4f}" for m in METRIC_COLUMNS))
    lines.append(f"{'macro':<16}" + "".join(f"{result['macro'][m]:>11.4f}"
                                            for m in METRIC_COLUMNS))
    return "\n".join(lines)


def predict(model, image):
    """Softmax probabilities [H,W,K] for a single [H,W,C] image of any size."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"predict expects one [H,W,C] image, got rank {image.ndim}")
    if image.shape[-1] != model.cfg.input_channels:
        raise ValueError(f"image has {image.shape[-1]} channels, model expects "
                         f"{model.cfg.input_channels}")
    return model.forward(image[None]).data[0]


def train(model, dataset_train, dataset_val, run_cfg, log=None):
    """Run the full optimization loop and return the TrainRun record.

    Per epoch: `steps_per_epoch` augmented full-dataset batches, each with a
    forward/loss/backward/update cycle, then an un-augmented validation pass.
    Checkpoints the best epoch (by validation Tanimoto-with-complement, or
    training when no validation set exists) and the last epoch.
    """
    out_dir = Path(run_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_names = run_cfg.palette.names

    seeds = np.random.SeedSequence(run_cfg.seed).spawn(2)
    rng_aug = np.random.default_rng(seeds[0])
    rng_drop = np.random.default_rng(seeds[1])

    train_pairs = dataset_train.pairs() if hasattr(dataset_train, "pairs") else list(dataset_train)
    train_ids = dataset_train.ids() if hasattr(dataset_train, "ids") else [
        str(i) for i in range(len(train_pairs))]

    optimizer = make_optimizer(model.params, run_cfg.optimizer)
    loss_cfg = run_cfg.loss
    loss_cfg.validate(num_classes=model.cfg.num_classes)

    csv_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    records = []
    best_score = -np.inf
    best_epoch = -1

    model.save(last_path)
    model.save(best_path)

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(class_names))

        for epoch in range(run_cfg.epochs):
            batch_losses, batch_tani = [], []
            stream = epoch_stream(train_pairs, run_cfg.steps_per_epoch, rng_aug,
                                  ranges=run_cfg.augment)
            for xb, yb in stream:
                weight_map = None
                if loss_cfg.contour_weighting:
                    weight_map = np.stack([contour_weight_map(m, loss_cfg) for m in yb])
                try:
                    with T.record():
                        probs = model.forward(xb, training=True, rng=rng_drop)
                        loss = tanimoto_loss(probs, yb, loss_cfg, weight_map)
                        T.backward(loss)
                except FloatingPointError as exc:
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} "
                        f"(batch items: {', '.join(train_ids)}): {exc}") from exc
                optimizer.step()
                model.zero_grad()
                batch_losses.append(loss.item())
                batch_tani.append(tanimoto_with_complement(probs.data, yb, loss_cfg.smooth_s))

            train_loss = float(np.mean(batch_losses))
            train_tani = float(np.mean(batch_tani))
            if dataset_val is not None:
                val = evaluate(model, dataset_val, loss_cfg)
                val_loss, val_tani = val["loss"], val["tanimoto"]
                per_class, macro = val["per_class"], val["macro"]
                score = val_tani
            else:
                val_loss = val_tani = None
                per_class, macro = [], {}
                score = train_tani

            rec = EpochRecord(epoch=epoch, train_loss=train_loss, train_tanimoto=train_tani,
                              val_loss=val_loss, val_tanimoto=val_tani,
                              per_class=per_class, macro=macro)
            records.append(rec)
            row = [str(epoch), _fmt(train_loss), _fmt(train_tani),
                   _fmt(val_loss), _fmt(val_tani)]
            for i in range(len(class_names)):
                for m in METRIC_COLUMNS:
                    row.append(_fmt(per_class[i][m]) if i < len(per_class) else "")
            writer.writerow(row)
            fh.flush()

            model.save(last_path)
            if score > best_score:
                best_score = score
                best_epoch = epoch
                model.save(best_path)
            if log is not None:
                log(f"epoch {epoch}: train_loss={train_loss:.4f} "
                    f"train_T~={train_tani:.4f}"
                    + (f" val_T~={val_tani:.4f}" if val_tani is not None else ""))
            if (run_cfg.early_stop_tanimoto is not None
                    and train_tani >= run_cfg.early_stop_tanimoto):
                break

    return TrainRun(records=records, best_epoch=best_epoch,
                    best_checkpoint=str(best_path), last_checkpoint=str(last_path),
                    seed=run_cfg.seed)
