from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..worldsim import BACKGROUND, NUM_CATEGORIES

NUM_CLASSES = NUM_CATEGORIES + 1  # categories then background


def to_class_ids(semantic: np.ndarray) -> np.ndarray:
    """Map category ids 0..5 and background 255 to contiguous class ids 0..6."""
    return np.where(semantic == BACKGROUND, NUM_CATEGORIES, semantic).astype(np.int64)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n: int = NUM_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    idx = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n * n).reshape(n, n)


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def pixel_accuracy(conf: np.ndarray) -> float:
    return float(np.trace(conf) / conf.sum())


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {gt.shape}")
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return math.sqrt(float(np.mean(d * d)))


@dataclass
class EvalReport:
    split: str
    task: str
    n_frames: int
    category_iou: list = field(default_factory=list)
    mean_iou: float | None = None
    pixel_accuracy: float | None = None
    presence_accuracy: list = field(default_factory=list)
    depth_rmse: float | None = None
    depth_baseline_rmse: float | None = None
    model: str = ""
    config_hash: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["category_iou"] = [None if (v is None or math.isnan(v)) else v for v in d["category_iou"]]
        return json.dumps(d, sort_keys=True)
