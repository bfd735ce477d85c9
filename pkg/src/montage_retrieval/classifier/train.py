"""Training loop, best-epoch selection and inference helpers."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .. import metrics
from ..errors import DegenerateData, ShapeMismatch
from ..montage import MontageImage, downsample_montage
from ..volume_io import _lerp_axis
from .model import ArchitectureDescriptor, Model, forward, init_model, loss_and_grads, softmax
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    class_weights: tuple = (1.0, 10.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5
    selection_metric: str = "f1"

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be two positive numbers")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d


def resize_image(pixels: np.ndarray, side: int) -> np.ndarray:
    """Box-average when the factor is an integer, bilinear otherwise."""
    h, w = pixels.shape
    if (h, w) == (side, side):
        return pixels
    if h % side == 0 and w % side == 0:
        return downsample_montage(MontageImage(pixels), side).pixels
    return _lerp_axis(_lerp_axis(pixels, 0, side), 1, side)


def standardize(pixels: np.ndarray) -> np.ndarray:
    std = pixels.std()
    if std == 0:
        return np.zeros_like(pixels)
    return (pixels - pixels.mean()) / std


def prepare_input(montage, side: int) -> np.ndarray:
    """Montage (image or array) -> standardized ``(1, side, side)`` float64 array."""
    pixels = montage.pixels if isinstance(montage, MontageImage) else np.asarray(montage, dtype=np.float64)
    if pixels.ndim != 2:
        raise ShapeMismatch(f"montage must be 2D, got {pixels.shape}")
    return standardize(resize_image(pixels, side))[None]


def predict_batch(model: Model, X: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Class-1 probabilities for a prepared ``(n, 1, side, side)`` array."""
    out = [softmax(forward(model, X[i:i + chunk]))[:, 1] for i in range(0, len(X), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def predict(model: Model, montage) -> float:
    x = prepare_input(montage, model.arch.input_side)[None]
    return float(predict_batch(model, x)[0])


def select_epoch(history) -> int:
    """1-based epoch with the highest validation F1; AUC breaks ties, then the earliest wins."""
    best, key = None, None
    for i, h in enumerate(history):
        k = (h["val_f1"], h.get("val_auc", 0.0))
        if key is None or k > key:
            best, key = i, k
    return best + 1


def _val_metrics(scores, labels, threshold):
    pm = metrics.prf1(metrics.confusion(scores, labels, threshold))
    try:
        a = metrics.roc_auc(scores, labels)
    except metrics.SingleClass:
        a = float("nan")
    return {"val_accuracy": pm.accuracy, "val_precision": pm.precision,
            "val_recall": pm.recall, "val_f1": pm.f1, "val_auc": a}


def train(train_set, val_set, cfg: TrainConfig, arch: ArchitectureDescriptor, callback=None):
    """Train from scratch and return ``(best_model, history)``.

    ``train_set`` and ``val_set`` are ``(X, y)`` with ``X`` prepared by
    :func:`prepare_input` and stacked to ``(n, 1, side, side)``.
    """
    X, y = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1], dtype=np.int64)
    Xv, yv = np.asarray(val_set[0], dtype=np.float64), np.asarray(val_set[1], dtype=np.int64)
    if len(X) == 0 or len(Xv) == 0:
        raise DegenerateData("training and validation sets must be non-empty")
    if len(np.unique(y)) < 2:
        raise DegenerateData("training set contains a single class")
    if len(np.unique(yv)) < 2:
        raise DegenerateData("validation set contains a single class")

    rng = np.random.default_rng(cfg.seed)
    model = init_model(arch, int(rng.integers(2**31 - 1)))
    state = AdamState.zeros_like(model.params)
    history = []
    best, best_key = None, None
    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(X))
            seen, loss_sum = 0.0, 0.0
            for start in range(0, len(X), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss, grads = loss_and_grads(model, X[idx], y[idx], cfg.class_weights)
                adam_step(state, grads, model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
                weight = float(np.sum(np.asarray(cfg.class_weights)[y[idx]]))
                loss_sum += loss * weight
                seen += weight
            rec = {"epoch": epoch, "train_loss": loss_sum / seen}
            rec.update(_val_metrics(predict_batch(model, Xv), yv, cfg.threshold))
            history.append(rec)
            key = (rec["val_f1"], rec["val_auc"])
            if best_key is None or key > best_key:
                best, best_key = model.copy(), key
            log.info("epoch %d loss %.4f val f1 %.3f auc %.3f", epoch, rec["train_loss"],
                     rec["val_f1"], rec["val_auc"])
            if callback is not None:
                callback(rec, model)
    selected = select_epoch(history)
    best.provenance.update({"seed": cfg.seed, "epoch": selected})
    return best, history
