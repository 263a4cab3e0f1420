"""Top-down figure-ground segmentation from backprojected votes.

Every vote supporting a hypothesis traces back to a training occurrence with
a mask patch. The patches, scaled to each feature's support and weighted by
the vote weights, accumulate into figure and ground probability maps; the
binary segmentation is where figure evidence outweighs ground evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureSet
from .model import Model
from .voting import Hypothesis, Vote


@dataclass
class ProbabilityMap:
    values: np.ndarray   # (H, W) in [0, 1]
    weights: np.ndarray  # (H, W) accumulated contribution weight; 0 = untouched


@dataclass
class Contribution:
    """One backprojected vote: the patch to stamp, its top-left placement,
    and the vote weight."""

    feature_id: int
    occurrence_id: int
    weight: float
    patch: np.ndarray  # (side, side) uint8 in {0, 1}
    x0: int
    y0: int


@dataclass
class SegmentationResult:
    figure: ProbabilityMap
    ground: ProbabilityMap
    mask: np.ndarray  # (H, W) uint8 in {0, 1}


def _resize_nearest(patch: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize; output values are a subset of the input's."""
    h, w = patch.shape
    if (h, w) == (side, side):
        return patch
    ys = np.minimum((np.arange(side) * h) // side, h - 1)
    xs = np.minimum((np.arange(side) * w) // side, w - 1)
    return patch[np.ix_(ys, xs)]


def majority_class(votes: list[Vote], supporting, model: Model) -> int | None:
    """Class with the largest supporting weight; ties go to the lower id.
    Votes in the class-free space resolve their class through the occurrence
    that produced them."""
    totals: dict[int, float] = {}
    for i in supporting:
        v = votes[i]
        cls = v.class_id
        if cls is None:
            cls = model.occurrences[v.occurrence_id].class_id
        totals[cls] = totals.get(cls, 0.0) + v.weight
    if not totals:
        return None
    return min(totals, key=lambda c: (-totals[c], c))


def backproject(hypothesis: Hypothesis, votes: list[Vote], model: Model,
                features: FeatureSet,
                support_factor: float = 16.0) -> list[Contribution]:
    """Trace the hypothesis back to its supporting votes.

    In the class-free space the hypothesis class is the majority vote over
    supporting weight, and only patches of that class are kept; votes of
    other classes inside the window are treated as false positives."""
    if hypothesis.class_id is not None:
        target = hypothesis.class_id
    else:
        target = majority_class(votes, hypothesis.supporting, model)
    contributions = []
    for i in hypothesis.supporting:
        v = votes[i]
        occ = model.occurrences[v.occurrence_id]
        if target is not None and occ.class_id != target:
            continue
        x = float(features.positions[v.feature_id, 0])
        y = float(features.positions[v.feature_id, 1])
        s = float(features.scales[v.feature_id])
        side = max(1, int(np.rint(support_factor * s)))
        patch = _resize_nearest(occ.mask_patch, side)
        contributions.append(Contribution(
            feature_id=v.feature_id,
            occurrence_id=v.occurrence_id,
            weight=v.weight,
            patch=patch,
            x0=int(np.rint(x - side / 2.0)),
            y0=int(np.rint(y - side / 2.0)),
        ))
    return contributions


def probability_maps(contributions: list[Contribution],
                     shape: tuple[int, int]) -> tuple[ProbabilityMap, ProbabilityMap]:
    """Accumulate weighted mask patches into figure and ground maps.

    At a pixel covered by contributions, figure is the weighted average of
    the patch values and ground its complement. Untouched pixels have zero
    weight in both maps and count as background downstream."""
    h, w = shape
    fig_num = np.zeros((h, w))
    denom = np.zeros((h, w))
    for c in contributions:
        side = c.patch.shape[0]
        y0, y1 = max(0, c.y0), min(h, c.y0 + side)
        x0, x1 = max(0, c.x0), min(w, c.x0 + side)
        if y1 <= y0 or x1 <= x0:
            continue
        sub = c.patch[y0 - c.y0: y1 - c.y0, x0 - c.x0: x1 - c.x0]
        fig_num[y0:y1, x0:x1] += c.weight * sub
        denom[y0:y1, x0:x1] += c.weight
    touched = denom > 0
    figure = np.zeros((h, w))
    ground = np.zeros((h, w))
    figure[touched] = fig_num[touched] / denom[touched]
    ground[touched] = 1.0 - figure[touched]
    return (ProbabilityMap(figure, denom.copy()),
            ProbabilityMap(ground, denom.copy()))


def segment(figure: ProbabilityMap, ground: ProbabilityMap) -> np.ndarray:
    """Binary mask: covered pixels where figure evidence exceeds ground;
    ties and untouched pixels are background."""
    if figure.values.shape != ground.values.shape:
        raise ValueError("figure and ground maps must have the same shape")
    mask = (figure.weights > 0) & (figure.values > ground.values)
    return mask.astype(np.uint8)


def segment_hypothesis(hypothesis: Hypothesis, votes: list[Vote], model: Model,
                       features: FeatureSet, shape: tuple[int, int],
                       support_factor: float = 16.0) -> SegmentationResult:
    contributions = backproject(hypothesis, votes, model, features, support_factor)
    figure, ground = probability_maps(contributions, shape)
    return SegmentationResult(figure, ground, segment(figure, ground))
