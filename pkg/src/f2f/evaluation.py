"""Segmentation metrics, per-class reports, MSE error maps and the
effective-receptive-field gradient probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError
from .functional import log_max_softmax
from .io import normalized_pgm, write_csv, write_pgm
from .stub import SingleFrameModel, to_batch
from .tensor import backward


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, classes: int, ignore_id: int = 255):
        self.classes = classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
        keep = gt != self.ignore_id
        pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        c = self.classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValueError(f"labels outside [0, {c})")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.classes, self.ignore_id)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes with empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def confusion(pred, gt, classes: int, ignore_id: int = 255) -> ConfusionMatrix:
    return ConfusionMatrix(classes, ignore_id).update(pred, gt)


def miou(cm: ConfusionMatrix, class_ids: Sequence[int] | None = None) -> float:
    ious = cm.iou()
    if class_ids is not None:
        ious = ious[list(class_ids)]
    scored = ious[~np.isnan(ious)]
    if scored.size == 0:
        raise ValueError("mIoU undefined: no class has a non-empty union")
    return float(scored.mean())


def miou_mo(cm: ConfusionMatrix, moving_ids: Sequence[int]) -> float:
    return miou(cm, moving_ids)


def per_class_report(rows: dict[str, ConfusionMatrix], class_names: Sequence[str]) -> tuple[list[str], list[list]]:
    """Table with one row per named confusion matrix: per-class IoU and the mean.

    Classes never seen in any row are dropped from the table.
    """
    ious = {name: cm.iou() for name, cm in rows.items()}
    scored = [i for i in range(len(class_names)) if any(not np.isnan(v[i]) for v in ious.values())]
    header = ["row"] + [class_names[i] for i in scored] + ["mean"]
    table = []
    for name, cm in rows.items():
        v = ious[name]
        table.append([name] + [float(v[i]) for i in scored] + [miou(cm)])
    return header, table


def write_report(path, rows: dict[str, ConfusionMatrix], class_names: Sequence[str]):
    header, table = per_class_report(rows, class_names)
    write_csv(path, header, table)


# -- MSE error maps -------------------------------------------------------

def mse_error_map(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> np.ndarray:
    """Per-feature-pixel squared error averaged over channels and samples.

    Inputs are matched (D, h, w) forecasts and true features.
    """
    if len(predictions) == 0:
        raise DataError("mse_error_map needs at least one clip")
    if len(predictions) != len(targets):
        raise ShapeError("predictions and targets differ in length")
    acc = None
    for p, t in zip(predictions, targets):
        err = ((np.asarray(p, np.float64) - np.asarray(t, np.float64)) ** 2).mean(axis=0)
        acc = err if acc is None else acc + err
    return acc / len(predictions)


def write_error_map(prefix, emap: np.ndarray):
    normalized_pgm(f"{prefix}.pgm", emap)
    write_csv(f"{prefix}.csv", ["row"] + [f"c{j}" for j in range(emap.shape[1])],
              [[i] + list(map(float, emap[i])) for i in range(emap.shape[0])])


# -- effective receptive field -------------------------------------------

@dataclass
class ErfReport:
    probe: tuple[int, int]
    magnitudes: list  # one (H, W) map per input frame, oldest first
    threshold: float
    masks: list
    k: int
    flagged: bool = False
    notes: list = field(default_factory=list)

    def centroids(self) -> list:
        """Mask centroid (row, col) per frame; None for empty masks."""
        out = []
        for m in self.masks:
            ys, xs = np.nonzero(m)
            out.append((float(ys.mean()), float(xs.mean())) if ys.size else None)
        return out


def default_k(height: int, width: int, fraction: float = 0.0015) -> int:
    return max(1, int(round(fraction * height * width)))


def kth_largest(values: np.ndarray, k: int) -> float:
    flat = np.asarray(values).reshape(-1)
    k = min(k, flat.size)
    return float(np.partition(flat, flat.size - k)[flat.size - k])


def erf_probe(stub: SingleFrameModel, f2f, frames: Sequence[np.ndarray], probe: tuple[int, int],
              k: int | None = None, normalizer=None) -> ErfReport:
    """Gradient of the forecast's log-max-softmax at ``probe`` wrt each input frame.

    ``frames`` are the T observed (H, W[, ch]) images, oldest first. Magnitudes
    take the max over colour channels; the threshold is the k-th largest
    magnitude in the last frame.
    """
    h, w = np.asarray(frames[0]).shape[:2]
    r, c = probe
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"probe pixel {probe} outside the {h}x{w} image")
    k = default_k(h, w) if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    dtype = stub.encoder[0].weight.dtype
    images = [to_batch(np.asarray(f)[None], dtype) for f in frames]
    for img in images:
        img.requires_grad = True
    feats = [stub.features(img) for img in images]
    if normalizer is not None:
        feats = [normalizer.apply_tensor(f) for f in feats]
    forecast = f2f(feats)
    if normalizer is not None:
        forecast = normalizer.invert_tensor(forecast)
    score = log_max_softmax(stub.logits(forecast))[0, r, c]
    mags = []
    if score.requires_grad:
        backward(score)
        for img in images:
            g = img.grad if img.grad is not None else np.zeros_like(img.data)
            mags.append(np.abs(g[0]).max(axis=0))
    else:
        mags = [np.zeros((h, w)) for _ in images]
    threshold = kth_largest(mags[-1], k)
    flagged = threshold <= 0.0
    if flagged:
        masks = [np.zeros((h, w), dtype=bool) for _ in mags]
    else:
        masks = [m >= threshold for m in mags]
    notes = ["zero gradient everywhere"] if flagged else []
    return ErfReport((r, c), mags, threshold, masks, k, flagged, notes)


def write_erf(prefix, report: ErfReport):
    for i, (mag, mask) in enumerate(zip(report.magnitudes, report.masks)):
        normalized_pgm(f"{prefix}_grad{i}.pgm", mag)
        write_pgm(f"{prefix}_mask{i}.pgm", mask.astype(np.uint8) * 255)
    cents = report.centroids()
    write_csv(f"{prefix}.csv", ["frame", "mask_pixels", "centroid_row", "centroid_col", "threshold"],
              [[i, int(m.sum()), "" if cc is None else cc[0], "" if cc is None else cc[1], report.threshold]
               for i, (m, cc) in enumerate(zip(report.masks, cents))])
