"""Metrics: confusion matrices, precision-recall over score-ratio sweeps,
voting-confidence aggregation, and codebook size/accuracy sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, prune_by_gain, word_statistics
from .detector import Detection, DetectorConfig, classify_features
from .model import (
    TrainingParams,
    TrainingSample,
    activation_counts,
    train,
    _sample_features,
)
from .synthgen import GroundTruth


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (n, n); rows = true class, columns = predicted
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total


def confusion(predictions: list[str], truths: list[str],
              class_names: list[str]) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must have equal length")
    if not predictions:
        raise ValueError("cannot build a confusion matrix from no results")
    index = {name: i for i, name in enumerate(class_names)}
    counts = np.zeros((len(class_names), len(class_names)), dtype=np.int64)
    for pred, true in zip(predictions, truths):
        if true not in index:
            raise ValueError(f"unknown true label {true!r}")
        if pred not in index:
            raise ValueError(f"unknown predicted label {pred!r}")
        counts[index[true], index[pred]] += 1
    return ConfusionMatrix(counts, list(class_names))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class PRCurve:
    points: list[PRPoint]

    def auc(self) -> float:
        """Trapezoidal area under precision over the observed recall range."""
        pts = sorted(self.points, key=lambda p: (p.recall, p.precision))
        if len(pts) < 2:
            return 0.0
        recalls = np.array([p.recall for p in pts])
        precisions = np.array([p.precision for p in pts])
        return float(np.trapezoid(precisions, recalls))


def _center_in_box(det: Detection, truth: GroundTruth) -> bool:
    x0, y0, x1, y1 = truth.box
    return x0 <= det.x <= x1 and y0 <= det.y <= y1


def _count_matches(detections: list[Detection], truths: list[GroundTruth]):
    """Greedy matching by score: a detection is a true positive iff its
    center lies inside a so-far unmatched ground-truth box of its class."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].x,
                                  detections[i].y))
    taken = [False] * len(truths)
    tp = 0
    for i in order:
        det = detections[i]
        for j, truth in enumerate(truths):
            if taken[j] or truth.class_id != det.class_id:
                continue
            if _center_in_box(det, truth):
                taken[j] = True
                tp += 1
                break
    return tp, len(detections) - tp


def pr_curve(detections_per_image: list[list[Detection]],
             truths_per_image: list[list[GroundTruth]],
             thresholds) -> PRCurve:
    """Precision/recall as the hypothesis-score ratio threshold sweeps.

    detections_per_image should be produced with a permissive ratio (near 0)
    so every threshold on the grid re-filters the same detection pool against
    the image's strongest score."""
    if len(detections_per_image) != len(truths_per_image):
        raise ValueError("detections and truths must be per image")
    n_truths = sum(len(t) for t in truths_per_image)
    if n_truths == 0:
        raise ValueError("no ground truth objects")
    points = []
    for t in thresholds:
        tp = 0
        fp = 0
        for dets, truths in zip(detections_per_image, truths_per_image):
            if not dets:
                continue
            top = max(d.score for d in dets)
            kept = [d for d in dets if d.score >= t * top]
            tp_i, fp_i = _count_matches(kept, truths)
            tp += tp_i
            fp += fp_i
        precision = tp / (tp + fp) if tp + fp else 1.0
        points.append(PRPoint(threshold=float(t), precision=precision,
                              recall=tp / n_truths))
    return PRCurve(points)


@dataclass(frozen=True)
class SweepPoint:
    t_ig: float
    codebook_size: int
    accuracy: float


def codebook_sweep(train_samples: list[TrainingSample],
                   test_samples: list[TrainingSample],
                   codebook: Codebook, t_ig_grid,
                   train_params: TrainingParams,
                   config: DetectorConfig) -> list[SweepPoint]:
    """Retrain and re-evaluate classification accuracy at each gain
    threshold. The t_ig = 0 point is the unpruned baseline; sizes along the
    grid are non-increasing."""
    counts = activation_counts(train_samples, codebook, train_params)
    stats = word_statistics(codebook, counts)
    points = []
    for t_ig in t_ig_grid:
        pruned = prune_by_gain(codebook, stats, float(t_ig)).codebook
        model = train(train_samples, pruned, train_params)
        correct = 0
        for sample in test_samples:
            fs = _sample_features(sample, train_params)
            label = classify_features(fs, sample.mask.shape, model, config)
            if label == model.class_names[sample.class_id]:
                correct += 1
        accuracy = correct / len(test_samples)
        points.append(SweepPoint(t_ig=float(t_ig), codebook_size=len(pruned),
                                 accuracy=accuracy))
    return points


# ---------------------------------------------------------------------------
# CSV artifacts


def write_confusion_csv(matrix: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + matrix.class_names)
        for i, name in enumerate(matrix.class_names):
            writer.writerow([name] + [int(v) for v in matrix.counts[i]])
        writer.writerow(["accuracy", repr(matrix.accuracy)])


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ratio", "precision", "recall"])
        for p in curve.points:
            writer.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ig", "codebook_size", "accuracy"])
        for p in points:
            writer.writerow([repr(p.t_ig), p.codebook_size, repr(p.accuracy)])
